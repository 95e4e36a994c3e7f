"""Aggregation-weight statistics, consecutive-manager similarity, and report files.

Output schemas (version 1):

* weights.csv: modality, layer, expert, mean_weight, token_variance, samples
  (``expert`` >= N denotes the prior cross-modal output C_{expert-N+1}
  for joint SAE weights)
* similarity.csv: modality, layer_pair, unimodal_cos, crossmodal_cos, samples
* budget.csv: component, params, flops (last row ``total``)
* budget.json: {"schema": 1, "components": {name: {params, flops}}, "config": {...}}
* summary.json: schema version, file manifest and headline numbers
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .budget import COMPONENTS, BudgetReport
from .errors import ContractError
from .model import ManagerTower
from .objectives import PairBatch

SCHEMA_VERSION = 1
MODALITY_NAMES = {"v": "vision", "t": "text"}


@dataclass
class WeightRow:
    modality: str
    layer: int
    expert: int
    mean_weight: float
    token_variance: float
    samples: int


@dataclass
class WeightReport:
    rows: list[WeightRow] = field(default_factory=list)

    def table(self, modality: str) -> dict:
        """layer -> array of per-expert mean weights."""
        out: dict[int, list] = {}
        for r in self.rows:
            if r.modality == modality:
                out.setdefault(r.layer, []).append(r.mean_weight)
        return {k: np.array(v) for k, v in out.items()}

    def variance(self, modality: str) -> dict:
        out: dict[int, list] = {}
        for r in self.rows:
            if r.modality == modality:
                out.setdefault(r.layer, []).append(r.token_variance)
        return {k: np.array(v) for k, v in out.items()}


@dataclass
class SimilarityRow:
    modality: str
    layer_pair: str
    unimodal_cos: float
    crossmodal_cos: float
    samples: int


@dataclass
class SimilarityReport:
    rows: list[SimilarityRow] = field(default_factory=list)


def _forward_batches(model: ManagerTower, batches):
    batches = list(batches)
    if not batches:
        raise ContractError("diagnostics need a non-empty dataset")
    with T.no_grad():
        for b in batches:
            yield b, model(b.images, b.ids, b.text_mask, training=False)


def _token_mask(batch: PairBatch, modality: str, length: int) -> np.ndarray:
    if modality == "t" and batch.text_mask is not None:
        return np.asarray(batch.text_mask, dtype=bool)
    return np.ones((len(batch), length), dtype=bool)


def per_token_weights(weights, batch: int, length: int, dim: int) -> np.ndarray:
    """Effective weights [B, K, L]: broadcast to [B, K, L, D], then averaged over D."""
    w = weights.data if isinstance(weights, T.Tensor) else np.asarray(weights)
    if w.ndim == 3:
        w = w[None]
    full = np.broadcast_to(w, (batch, w.shape[-3], length, dim))
    return full.mean(axis=-1)


def shifted_variance(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Population variance computed about the first element; exactly 0 for constant input."""
    first = np.take(x, [0], axis=axis)
    d = x - first
    return np.mean(d * d, axis=axis) - np.mean(d, axis=axis) ** 2


def manager_weight_stats(model: ManagerTower, batches) -> WeightReport:
    """Mean weight per expert over valid tokens and samples, and mean per-sample token variance.

    For SAE_SPLIT_INIT only the uni-modal group is reported; joint SAE reports
    all N + l - 1 entries. Inference mode, so no exploration noise.
    """
    sums: dict = {}
    for batch, out in _forward_batches(model, batches):
        st = out.state
        for mod, outs in (("v", st.v_managers), ("t", st.t_managers)):
            top = st.cv[-1] if mod == "v" else st.ct[-1]
            b, length, dim = top.shape
            mask = _token_mask(batch, mod, length)
            for i, mo in enumerate(outs):
                w = per_token_weights(mo.weights, b, length, dim)       # [B, K, L]
                for s in range(b):
                    valid = w[s][:, mask[s]]                             # [K, L_valid]
                    var = shifted_variance(valid, axis=-1)
                    acc = sums.setdefault((mod, i + 1), {"mean": [], "var": [], "n": 0})
                    acc["mean"].append(valid.mean(axis=-1))
                    acc["var"].append(var)
                    acc["n"] += 1
    rows = []
    for (mod, layer), acc in sorted(sums.items()):
        means = np.array(acc["mean"])
        vars_ = np.array(acc["var"])
        for e in range(means.shape[1]):
            rows.append(WeightRow(MODALITY_NAMES[mod], layer, e,
                                  math.fsum(means[:, e]) / acc["n"],
                                  math.fsum(vars_[:, e]) / acc["n"], acc["n"]))
    return WeightReport(rows)


def flat_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two flattened arrays; 0.0 when either has zero norm."""
    a, b = np.ravel(a), np.ravel(b)
    na, nb = math.sqrt(math.fsum(a * a)), math.sqrt(math.fsum(b * b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return max(-1.0, min(1.0, math.fsum(a * b) / (na * nb)))


def consecutive_manager_cosine(model: ManagerTower, batches) -> SimilarityReport:
    """Per sample, flatten each manager's uni-modal and cross-modal addends over valid
    tokens, take the cosine between layers l and l+1, then average over samples.

    Layer 1 managers have no cross-modal addend, so the (1, 2) cross-modal
    entry is NaN.
    """
    if model.cfg.crossmodal.layers < 2:
        raise ContractError("similarity needs at least two cross-modal layers")
    acc: dict = {}
    for batch, out in _forward_batches(model, batches):
        st = out.state
        for mod, outs in (("v", st.v_managers), ("t", st.t_managers)):
            mask = _token_mask(batch, mod, outs[0].unimodal.shape[-2])
            for i in range(len(outs) - 1):
                a, b = outs[i], outs[i + 1]
                for s in range(len(batch)):
                    m = mask[s]
                    uni = flat_cosine(a.unimodal.data[s][m], b.unimodal.data[s][m])
                    if a.crossmodal is None or b.crossmodal is None:
                        cross = float("nan")
                    else:
                        cross = flat_cosine(_row(a.crossmodal, s)[m], _row(b.crossmodal, s)[m])
                    slot = acc.setdefault((mod, i + 1), {"uni": [], "cross": []})
                    slot["uni"].append(uni)
                    slot["cross"].append(cross)
    rows = []
    for (mod, layer), slot in sorted(acc.items()):
        n = len(slot["uni"])
        cross = slot["cross"]
        cross_mean = float("nan") if any(math.isnan(c) for c in cross) else math.fsum(cross) / n
        rows.append(SimilarityRow(MODALITY_NAMES[mod], f"{layer}-{layer + 1}",
                                  math.fsum(slot["uni"]) / n, cross_mean, n))
    return SimilarityReport(rows)


def _row(t, s: int) -> np.ndarray:
    data = t.data
    return data[s] if data.ndim == 3 else data


# ---------------------------------------------------------------- emission

def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def write_weights_csv(report: WeightReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["modality", "layer", "expert", "mean_weight", "token_variance", "samples"])
        for r in report.rows:
            w.writerow([r.modality, r.layer, r.expert, _fmt(r.mean_weight),
                        _fmt(r.token_variance), r.samples])


def read_weights_csv(path) -> WeightReport:
    with open(path, newline="") as fh:
        return WeightReport([WeightRow(r["modality"], int(r["layer"]), int(r["expert"]),
                                       float(r["mean_weight"]), float(r["token_variance"]),
                                       int(r["samples"])) for r in csv.DictReader(fh)])


def write_similarity_csv(report: SimilarityReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["modality", "layer_pair", "unimodal_cos", "crossmodal_cos", "samples"])
        for r in report.rows:
            w.writerow([r.modality, r.layer_pair, _fmt(r.unimodal_cos), _fmt(r.crossmodal_cos),
                        r.samples])


def read_similarity_csv(path) -> SimilarityReport:
    with open(path, newline="") as fh:
        return SimilarityReport([SimilarityRow(r["modality"], r["layer_pair"],
                                               float(r["unimodal_cos"]), float(r["crossmodal_cos"]),
                                               int(r["samples"])) for r in csv.DictReader(fh)])


def write_budget(report: BudgetReport, csv_path, json_path) -> None:
    d = report.as_dict()
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "params", "flops"])
        for c in (*COMPONENTS, "total"):
            w.writerow([c, d["components"][c]["params"], d["components"][c]["flops"]])
    Path(json_path).write_text(json.dumps({"schema": SCHEMA_VERSION, **d}, indent=2,
                                          sort_keys=True) + "\n")


def emit_reports(reports: list, out_dir) -> dict:
    """Write every report in ``reports`` plus summary.json; returns the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files, headline = [], {}
    for rep in reports:
        if isinstance(rep, WeightReport):
            write_weights_csv(rep, out / "weights.csv")
            files.append("weights.csv")
            headline["weight_layers"] = len({(r.modality, r.layer) for r in rep.rows})
        elif isinstance(rep, SimilarityReport):
            write_similarity_csv(rep, out / "similarity.csv")
            files.append("similarity.csv")
            headline["similarity_pairs"] = len(rep.rows)
        elif isinstance(rep, BudgetReport):
            write_budget(rep, out / "budget.csv", out / "budget.json")
            files += ["budget.csv", "budget.json"]
            headline["total_params"] = rep.total_params
            headline["total_flops"] = rep.total_flops
        else:
            raise TypeError(f"cannot emit {type(rep).__name__}")
    summary = {"schema": SCHEMA_VERSION, "files": files, "headline": headline}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
