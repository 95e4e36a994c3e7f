"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

The lines are printed as they are decided and repeated in the terminal summary.
"""
from __future__ import annotations

import statistics
import time

import numpy as np
import pytest

from managertower import CrossModalConfig, CrossModalTower, EncoderConfig, ManagerTower, ModelConfig, Rng
from managertower.budget import delta_checks
from managertower.config import RunConfig
from managertower.crossmodal import CrossModalState, forward_tower
from managertower.diagnostics import consecutive_manager_cosine, manager_weight_stats
from managertower.encoders import LayerStack
from managertower.experiment import build, evaluate_heldout, gradcheck_run, train
from managertower.managers import expand_weights
from managertower.synthdata import PatternSpec, eval_batches, make_dataset
from managertower.tensor import Tensor
from managertower.trainer import load_checkpoint

from conftest import ACCEPTANCE_LINES
from test_crossmodal import frozen_one_hot_copy, randomize

SEEDS = (0, 1, 2, 3, 4)
KINDS = ["SAE", "SAE_SPLIT_INIT", "SAUE", "AAUE", "XATTN", "CONCAT"]


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number} ({title}): {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def small_batches(seed=5, n=12, size=6):
    spec = PatternSpec()
    held = make_dataset(spec, n, Rng(seed).child("held"))
    return eval_batches(held, size, spec, Rng(seed).child("eb"))


# ---------------------------------------------------------------- 1

def test_criterion_1_budget_deltas():
    t0 = time.perf_counter()
    checks = delta_checks()
    elapsed = time.perf_counter() - t0
    wanted = checks[:3]                 # the SAUE FLOP delta is informational only
    ok = all(c.passed for c in wanted) and elapsed < 1.0
    detail = "; ".join(f"{c.name} = {c.measured:.4f}{c.unit}" for c in wanted)
    record(1, "budget deltas", ok, f"{detail}; {elapsed * 1000:.0f} ms")


# ---------------------------------------------------------------- 2

def test_criterion_2_gradient_correctness():
    cfg = RunConfig()
    cm = cfg.model.crossmodal
    assert (cm.hidden, cm.heads, cm.layers, cm.n_experts) == (32, 4, 3, 6)
    assert (cfg.model.encoder.vision_len, cfg.model.encoder.max_len) == (17, 12)
    exp = build(cfg)
    report = gradcheck_run(exp, size=4, coords=6, h=1e-4)
    worst = report.worst(1)[0]
    record(2, "gradient correctness", report.max_rel_error < 1e-4,
           f"{len(report.checks)} tensors, max rel error {report.max_rel_error:.2e} ({worst.name})")


# ---------------------------------------------------------------- 3

def test_criterion_3_normalization_invariants():
    root = Rng(3)
    worst, count = 0.0, 0
    kinds_seen = set()
    for i in range(100):
        r = root.child("case", i)
        kind = KINDS[i % len(KINDS)]
        n = int(r.integers(2, 7))
        layers = int(r.integers(1, 4))
        cm = CrossModalConfig(layers=layers, n_experts=n, hidden=8, heads=2, ffn_mult=2, manager=kind,
                              query=["prev", "fused"][int(r.integers(0, 2))],
                              granularity=["dimension", "expert"][int(r.integers(0, 2))])
        cfg = ModelConfig(EncoderConfig(depth=n, hidden=8, heads=2, ffn_mult=2), cm)
        model = ManagerTower(cfg, r.child("model"))
        randomize(model, r.child("perturb"), scale=0.5)
        spec = PatternSpec()
        data = make_dataset(spec, 3, r.child("data"))
        b = eval_batches(data, 3, spec, r.child("batch"))[0]
        out = model(b.images, b.ids, b.text_mask, training=bool(i % 2), rng=r.child("noise"))
        for outs, top in ((out.state.v_managers, out.state.cv[-1]), (out.state.t_managers, out.state.ct[-1])):
            _, length, dim = top.shape
            for mo in outs:
                for w in (mo.weights, mo.cross_weights):
                    if w is None:
                        continue
                    dense = expand_weights(w, length, dim)
                    assert np.all(dense >= 0)
                    worst = max(worst, float(np.max(np.abs(dense.sum(axis=-3) - 1.0))))
                    count += 1
        kinds_seen.add(kind)
    record(3, "normalization invariants", worst <= 1e-6 and kinds_seen == set(KINDS),
           f"{count} weight tensors over 100 configs, max |sum - 1| = {worst:.1e}")


# ---------------------------------------------------------------- 4

def test_criterion_4_one_hot_reduction():
    root = Rng(4)
    worst = 0.0
    for i in range(20):
        r = root.child("case", i)
        n = int(r.integers(2, 7))
        layers = int(r.integers(1, n + 1))
        bt = CrossModalTower(CrossModalConfig(layers=layers, n_experts=n, hidden=8, heads=2,
                                              bt_reference=True), 8, r.child("tower"))
        randomize(bt, r.child("perturb"))
        ref = frozen_one_hot_copy(bt)
        lv, lt = int(r.integers(2, 6)), int(r.integers(2, 6))
        vs = LayerStack(Tensor(r.normal(size=(n, lv, 8))), "vision")
        ts = LayerStack(Tensor(r.normal(size=(n, lt, 8))), "text")
        v0, t0 = Tensor(r.normal(size=(lv, 8))), Tensor(r.normal(size=(lt, 8)))
        a = forward_tower(vs, ts, bt, CrossModalState([v0], [t0]), False, None)
        b = forward_tower(vs, ts, ref, CrossModalState([v0], [t0]), False, None)
        for x, y in zip(a.cv + a.ct, b.cv + b.ct):
            worst = max(worst, float(np.max(np.abs(x.data - y.data))))
    record(4, "one-hot reduction", worst <= 1e-9, f"max elementwise difference {worst:.1e} over 20 inputs")


# ---------------------------------------------------------------- 5 and 6 share training runs

@pytest.fixture(scope="module")
def toy_runs():
    runs = {}
    for name, bt in (("AAUE", False), ("BT", True)):
        for seed in SEEDS:
            cfg = RunConfig(seed=seed)
            cfg.model.crossmodal.bt_reference = bt
            exp = build(cfg)
            initial = evaluate_heldout(exp)
            t0 = time.perf_counter()
            train(exp)
            final = evaluate_heldout(exp)
            runs[name, seed] = {"exp": exp, "acc": final.itm_acc,
                                "mlm_ratio": final.loss_mlm / initial.loss_mlm,
                                "seconds": time.perf_counter() - t0}
    return runs


def test_criterion_5_static_vs_adaptive(toy_runs):
    saue = ManagerTower(ModelConfig(crossmodal=CrossModalConfig(manager="SAUE")), Rng(5))
    randomize(saue, Rng(6), scale=0.5)
    batches = small_batches()
    static = max(r.token_variance for r in manager_weight_stats(saue, batches).rows)
    trained = toy_runs["AAUE", SEEDS[0]]["exp"]
    rep = manager_weight_stats(trained.model, trained.heldout_batches)
    layers = sorted({r.layer for r in rep.rows if r.layer >= 2})
    per_layer = {(m, l): min(r.token_variance for r in rep.rows if r.layer == l and r.modality == m)
                 for m in ("vision", "text") for l in layers}
    ok = static == 0.0 and layers and all(v > 0 for v in per_layer.values())
    smallest = min(per_layer.values())
    record(5, "static vs adaptive", ok,
           f"SAUE max token variance {static!r}; trained AAUE min per-expert variance in layers "
           f"{layers[0]}..{layers[-1]} = {smallest:.3e}")


def test_criterion_6_learnability(toy_runs):
    accs = {k: [toy_runs[k, s]["acc"] for s in SEEDS] for k in ("AAUE", "BT")}
    ratios = [toy_runs["AAUE", s]["mlm_ratio"] for s in SEEDS]
    med_aaue, med_bt = statistics.median(accs["AAUE"]), statistics.median(accs["BT"])
    med_ratio = statistics.median(ratios)
    slowest = max(sum(toy_runs[k, s]["seconds"] for s in SEEDS) for k in ("AAUE", "BT"))
    ok = med_aaue > 0.90 and med_ratio < 0.5 and med_aaue >= med_bt and slowest < 600
    record(6, "learnability", ok,
           f"median held-out ITM acc AAUE {med_aaue:.3f} {[round(a, 3) for a in accs['AAUE']]}, "
           f"BT {med_bt:.3f} {[round(a, 3) for a in accs['BT']]}; median MLM loss ratio "
           f"{med_ratio:.3f}; slowest config {slowest:.0f} s for 5 seeds")


# ---------------------------------------------------------------- 7

def test_criterion_7_diagnostics_fidelity():
    batches = small_batches()
    aaue = ManagerTower(ModelConfig(), Rng(7))
    for mgr in list(aaue.tower.v_managers) + list(aaue.tower.t_managers):
        if hasattr(mgr, "generator"):
            mgr.generator.data[...] = 0.0
    uniform = max(abs(r.mean_weight - 1 / 6) for r in manager_weight_stats(aaue, batches).rows)
    sae = ManagerTower(ModelConfig(crossmodal=CrossModalConfig(manager="SAE")), Rng(8))
    cos = max(abs(r.unimodal_cos - 1.0) for r in consecutive_manager_cosine(sae, batches).rows)
    record(7, "diagnostics fidelity", uniform <= 1e-9 and cos <= 1e-9,
           f"max |weight - 1/6| = {uniform:.1e}; max |cos - 1| = {cos:.1e}")


# ---------------------------------------------------------------- 8

def test_criterion_8_determinism_and_persistence(tmp_path):
    def run(out, steps, resume=None):
        cfg = RunConfig(seed=11)
        cfg.trainer.steps = steps
        cfg.trainer.checkpoint_every = 4
        cfg.optim.total_steps = 8
        exp = build(cfg)
        return train(exp, out, resume)

    a = run(tmp_path / "a", 8)
    b = run(tmp_path / "b", 8)
    same_metrics = (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    same_ckpt = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                    for f in ("checkpoint_000004.bin", "checkpoint_final.bin"))
    resumed = run(tmp_path / "c", 8, load_checkpoint(tmp_path / "a/checkpoint_000004.bin"))
    same_trace = resumed.metrics[-4:] == a.metrics[4:] and len(a.metrics) == 8
    same_final = (tmp_path / "c/checkpoint_final.bin").read_bytes() == (tmp_path / "a/checkpoint_final.bin").read_bytes()
    record(8, "determinism and persistence", same_metrics and same_ckpt and same_trace and same_final,
           f"byte-identical metrics {same_metrics}, checkpoints {same_ckpt}; resume trace {same_trace}, "
           f"final checkpoint {same_final}")
