"""AdamW training loop with warmup-linear schedule, LR groups and exact checkpoints."""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NonFiniteGradientError
from .model import ManagerTower
from .objectives import (MaskPlan, PairBatch, apply_mask, itc_loss, itc_similarity,
                         itm_loss, itm_pool_and_logits, mlm_loss, sample_hard_negatives)
from .synthdata import BatchStream
from .tensor import Rng, Tensor

CHECKPOINT_MAGIC = b"MTCKPT01"
CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ("step", "loss_mlm", "loss_itm", "loss_itc", "itm_acc", "lr", "grad_norm")


@dataclass
class OptimConfig:
    base_lr: float = 1e-3
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    total_steps: int = 300
    cross_modal_lr_multiplier: float = 5.0
    grad_clip: float = 0.0     # 0 disables clipping

    def validate(self, path: str = "optim") -> None:
        if self.base_lr < 0:
            raise ConfigError("base_lr must be >= 0", path + ".base_lr")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError("warmup_ratio must lie in [0, 1)", path + ".warmup_ratio")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0", path + ".total_steps")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("betas must be two values in [0, 1)", path + ".betas")
        if self.eps <= 0:
            raise ConfigError("eps must be > 0", path + ".eps")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0", path + ".weight_decay")
        if self.cross_modal_lr_multiplier < 0:
            raise ConfigError("cross_modal_lr_multiplier must be >= 0",
                              path + ".cross_modal_lr_multiplier")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0", path + ".grad_clip")

    @property
    def warmup_steps(self) -> int:
        return int(self.warmup_ratio * self.total_steps)


# Base-size pre-training hyperparameters, kept as a named profile.
PAPER_OPTIM = OptimConfig(base_lr=1e-5, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.01,
                          warmup_ratio=0.1, total_steps=100_000, cross_modal_lr_multiplier=5.0)


def lr_at_step(step: int, cfg: OptimConfig) -> float:
    """Linear ramp 0 -> base_lr over the warmup, then linear decay to 0."""
    total = cfg.total_steps
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    warm = cfg.warmup_steps
    if step < warm:
        return cfg.base_lr * step / warm
    if total == warm:
        return cfg.base_lr
    return cfg.base_lr * (total - step) / (total - warm)


# ---------------------------------------------------------------- AdamW

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def decays(name: str, p: Tensor) -> bool:
    """Decay matrices only; biases, LN gains, temperatures and 1-D weights are exempt."""
    return p.ndim >= 2


def adamw_step(params: dict, state: AdamState, lr: float, cfg: OptimConfig,
               lr_scale: dict | None = None) -> None:
    """One in-place update of every parameter in ``params`` (name -> Tensor).

    Weight decay is decoupled: weights shrink by lr * wd directly. Parameters
    without a gradient are treated as having a zero gradient.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(name)
    state.step += 1
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        lr_p = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        if cfg.weight_decay and decays(name, p):
            p.data *= 1.0 - lr_p * cfg.weight_decay
        p.data -= lr_p * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def lr_scales(model: ManagerTower, cfg: OptimConfig) -> dict:
    return {name: (cfg.cross_modal_lr_multiplier if model.is_cross_modal(name) else 1.0)
            for name, _ in model.named_parameters()}


def global_grad_norm(params) -> float:
    total = math.fsum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)
    return math.sqrt(total)


def clip_gradients(params, max_norm: float, norm: float) -> None:
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale


# ---------------------------------------------------------------- losses

@dataclass
class ObjectiveWeights:
    """Loss weights. The heavy ITC weight aligns the uni-modal encoders early, which
    gets toy ITM off its chance plateau within a 300-step budget."""
    mlm: float = 1.0
    itm: float = 1.0
    itc: float = 10.0

    def validate(self, path: str = "objectives") -> None:
        for key in ("mlm", "itm", "itc"):
            if getattr(self, key) < 0:
                raise ConfigError("objective weights must be >= 0", f"{path}.{key}")
        if self.mlm == self.itm == self.itc == 0:
            raise ConfigError("at least one objective weight must be positive", path)


@dataclass
class StepLosses:
    total: Tensor
    mlm: float
    itm: float
    itc: float
    itm_acc: float
    mlm_count: int = 0


def mask_matched(batch: PairBatch, ratio: float, rng: Rng, vocab: int) -> tuple[np.ndarray, MaskPlan]:
    """Mask caption tokens of matched rows only; mismatched captions stay intact."""
    pos = np.nonzero(batch.labels == 1)[0]
    ids = batch.ids.copy()
    if pos.size == 0:
        return ids, MaskPlan.empty(ratio)
    masked, sub = apply_mask(batch.ids[pos], ratio, rng, vocab)
    ids[pos] = masked
    return ids, MaskPlan(pos[sub.rows], sub.cols, sub.original, ratio)


def _rows(batch: PairBatch, rows: np.ndarray, ids: np.ndarray) -> tuple:
    return batch.images[rows], ids[rows], batch.text_mask[rows]


NEGATIVE_MODES = ("stream", "hard")


def _same_content(multisets) -> np.ndarray:
    keys = list(multisets)
    return np.array([[a == b for b in keys] for a in keys], dtype=bool)


def compute_losses(model: ManagerTower, batch: PairBatch, weights: ObjectiveWeights,
                   rng: Rng, training: bool, mask_ratio: float = 0.15,
                   mask_vocab: int | None = None, negatives: str = "stream") -> StepLosses:
    """MLM on masked matched rows; ITM and ITC on intact captions.

    The objectives use separate forward passes so that the presence of MASK
    tokens cannot reveal the match label to the ITM head.

    ``negatives="stream"`` scores the batch as delivered (its mismatched rows
    are the ITM negatives). ``negatives="hard"`` scores only the matched rows
    and pairs each image with one in-batch caption drawn from the detached ITC
    similarity, never one that describes the same multiset.
    """
    if negatives not in NEGATIVE_MODES:
        raise ConfigError(f"negatives must be one of {NEGATIVE_MODES}", "trainer.itm_negatives")
    vocab = mask_vocab or model.cfg.encoder.vocab
    ids, plan = mask_matched(batch, mask_ratio, rng.child("mask"), vocab)
    total = Tensor(0.0)
    l_mlm = l_itm = l_itc = 0.0
    acc = float("nan")
    if weights.mlm and len(plan):
        pos = np.unique(plan.rows)
        local = np.searchsorted(pos, plan.rows)
        out = model(*_rows(batch, pos, ids), training=training, rng=rng.child("noise", "mlm"))
        loss = mlm_loss(out.state, MaskPlan(local, plan.cols, plan.original, plan.ratio),
                        model.mlm_head)
        total = total + loss * weights.mlm
        l_mlm = loss.item()
    pos = np.nonzero(batch.labels == 1)[0]
    use_itc = weights.itc and pos.size >= 2
    hard = negatives == "hard" and pos.size >= 2 and batch.multisets is not None
    if not (weights.itm or use_itc):
        return StepLosses(total, l_mlm, l_itm, l_itc, acc, len(plan))
    if hard:
        out = model(*_rows(batch, pos, batch.ids), training=training, rng=rng.child("noise", "itm"))
        v, t = out.v_layers[-1][:, 0], out.t_layers[-1][:, 0]
    else:
        out = model(batch.images, batch.ids, batch.text_mask, training=training,
                    rng=rng.child("noise", "itm"))
        v, t = out.v_layers[-1][pos, 0], out.t_layers[-1][pos, 0]
    sim = itc_similarity(v, t, model.itc_head) if (use_itc or hard) else None
    if weights.itm:
        logits = itm_pool_and_logits(out.state, model.itm_head)
        labels = batch.labels if not hard else np.ones(pos.size, dtype=np.int64)
        if hard:
            same = _same_content([batch.multisets[i] for i in pos])
            np.fill_diagonal(same, False)
            keep = ~np.all(same | np.eye(pos.size, dtype=bool), axis=1)
            if keep.any():
                same[~keep] = False      # rows dropped below; keeps the sampler's contract
                # one hard caption per image; a single direction keeps ITM classes balanced
                cap = pos[sample_hard_negatives(sim.data, rng.child("hard"), same)[keep]]
                img = pos[keep]
                neg = model(batch.images[img], batch.ids[cap], batch.text_mask[cap],
                            training=training, rng=rng.child("noise", "hard"))
                logits = T.concat([logits, itm_pool_and_logits(neg.state, model.itm_head)])
                labels = np.concatenate([labels, np.zeros(img.size, dtype=np.int64)])
        loss = itm_loss(logits, labels)
        total = total + loss * weights.itm
        l_itm = loss.item()
        acc = float(np.mean(logits.data.argmax(-1) == labels))
    if use_itc:
        loss = itc_loss(sim, model.itc_head.temperature())
        total = total + loss * weights.itc
        l_itc = loss.item()
    return StepLosses(total, l_mlm, l_itm, l_itc, acc, len(plan))


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    step: int
    params: dict            # name -> ndarray
    adam: AdamState
    rng_state: dict
    config_digest: str = ""


def checkpoint_from(model: ManagerTower, adam: AdamState, step: int, rng: Rng,
                    config_digest: str = "") -> Checkpoint:
    return Checkpoint(step, model.state_dict(),
                      AdamState(adam.step, {k: v.copy() for k, v in adam.m.items()},
                                {k: v.copy() for k, v in adam.v.items()}),
                      rng.get_state(), config_digest)


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    """Magic, u64 manifest length, canonical JSON manifest, little-endian f64 payload."""
    arrays = [("param/" + k, v) for k, v in ck.params.items()]
    for k in sorted(ck.adam.m):
        arrays.append(("adam_m/" + k, ck.adam.m[k]))
        arrays.append(("adam_v/" + k, ck.adam.v[k]))
    entries, offset, chunks = [], 0, []
    for name, a in arrays:
        a = np.asarray(a, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.size
    manifest = {"version": CHECKPOINT_VERSION, "step": ck.step, "adam_step": ck.adam.step,
                "config_sha256": ck.config_digest, "rng": ck.rng_state, "entries": entries}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_checkpoint(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<Q", data, 8)
    manifest = json.loads(data[16:16 + n])
    if manifest["version"] != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {manifest['version']}")
    base = 16 + n
    params, m, v = {}, {}, {}
    for e in manifest["entries"]:
        a = np.frombuffer(data, "<f8", e["count"], base + 8 * e["offset"])
        a = a.reshape(e["shape"]).astype(np.float64)
        kind, name = e["name"].split("/", 1)
        {"param": params, "adam_m": m, "adam_v": v}[kind][name] = a
    return Checkpoint(manifest["step"], params, AdamState(manifest["adam_step"], m, v),
                      manifest["rng"], manifest["config_sha256"])


def restore(model: ManagerTower, ck: Checkpoint) -> AdamState:
    model.load_state_dict(ck.params)
    return AdamState(ck.adam.step, {k: a.copy() for k, a in ck.adam.m.items()},
                     {k: a.copy() for k, a in ck.adam.v.items()})


# ---------------------------------------------------------------- loop

@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 32
    mask_ratio: float = 0.15
    log_every: int = 1
    checkpoint_every: int = 0    # 0 keeps only the final checkpoint
    objectives: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    itm_negatives: str = "stream"   # "hard": in-batch negatives drawn from ITC similarity

    def validate(self, path: str = "trainer") -> None:
        if self.itm_negatives not in NEGATIVE_MODES:
            raise ConfigError(f"itm_negatives must be one of {NEGATIVE_MODES}", path + ".itm_negatives")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0", path + ".steps")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2", path + ".batch_size")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1]", path + ".mask_ratio")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1", path + ".log_every")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0", path + ".checkpoint_every")
        self.objectives.validate(path + ".objectives")


@dataclass
class TrainResult:
    metrics: list[dict]
    checkpoint: Checkpoint
    checkpoints: dict = field(default_factory=dict)   # step -> path


def format_metrics(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["step"]] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def train_loop(model: ManagerTower, stream: BatchStream, tcfg: TrainConfig, ocfg: OptimConfig,
               rng: Rng, out_dir=None, resume: Checkpoint | None = None,
               config_digest: str = "", mask_vocab: int | None = None) -> TrainResult:
    """Run steps [start, tcfg.steps); batch k and its rng depend only on (seed, k).

    Step k applies the learning rate for update k + 1 of the schedule, so the
    first update uses a positive rate when warmup is non-zero.
    """
    tcfg.validate()
    ocfg.validate()
    params = dict(model.named_parameters())
    scales = lr_scales(model, ocfg)
    adam = restore(model, resume) if resume is not None else AdamState()
    start = resume.step if resume is not None else 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv" if out is not None else None
    rows: list[dict] = read_metrics(metrics_path) if (resume is not None and metrics_path
                                                      and metrics_path.exists()) else []
    rows = [r for r in rows if r["step"] < start]
    saved = {}
    total = max(ocfg.total_steps, tcfg.steps)
    sched = OptimConfig(**{**ocfg.__dict__, "total_steps": total})
    for k in range(start, tcfg.steps):
        step_rng = rng.child("step", k)
        batch = stream.batch_at(k)
        model.zero_grad()
        losses = compute_losses(model, batch, tcfg.objectives, step_rng, training=True,
                                negatives=tcfg.itm_negatives,
                                mask_ratio=tcfg.mask_ratio, mask_vocab=mask_vocab)
        T.backward(losses.total)
        plist = list(params.values())
        norm = global_grad_norm(plist)
        clip_gradients(plist, ocfg.grad_clip, norm)
        lr = lr_at_step(min(k + 1, total), sched)
        adamw_step(params, adam, lr, ocfg, scales)
        if (k + 1) % tcfg.log_every == 0 or k + 1 == tcfg.steps:
            rows.append({"step": k + 1, "loss_mlm": losses.mlm, "loss_itm": losses.itm,
                         "loss_itc": losses.itc, "itm_acc": losses.itm_acc, "lr": lr,
                         "grad_norm": norm})
        if out is not None and tcfg.checkpoint_every and (k + 1) % tcfg.checkpoint_every == 0:
            path = out / f"checkpoint_{k + 1:06d}.bin"
            save_checkpoint(checkpoint_from(model, adam, k + 1, rng, config_digest), path)
            saved[k + 1] = path
    final = checkpoint_from(model, adam, max(start, tcfg.steps), rng, config_digest)
    if out is not None:
        path = out / "checkpoint_final.bin"
        save_checkpoint(final, path)
        saved[final.step] = path
        metrics_path.write_text(format_metrics(rows))
    return TrainResult(rows, final, saved)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    itm_acc: float
    loss_itm: float
    loss_mlm: float
    pairs: int


def evaluate(model: ManagerTower, batches: list[PairBatch], rng: Rng, mask_ratio: float = 0.15,
             mask_vocab: int | None = None) -> EvalResult:
    """Deterministic held-out metrics; noise off, fixed mask draws per batch."""
    if not batches:
        raise ContractError("evaluation needs at least one batch")
    correct = n = 0
    itm_terms, mlm_terms, mlm_counts = [], [], []
    w = ObjectiveWeights(mlm=1.0, itm=1.0, itc=0.0)
    with T.no_grad():
        for j, b in enumerate(batches):
            r = compute_losses(model, b, w, rng.child("eval", j), training=False,
                               mask_ratio=mask_ratio, mask_vocab=mask_vocab)
            correct += r.itm_acc * len(b)
            n += len(b)
            itm_terms.append(r.itm * len(b))
            mlm_terms.append(r.mlm * r.mlm_count)
            mlm_counts.append(r.mlm_count)
    return EvalResult(correct / n, math.fsum(itm_terms) / n,
                      math.fsum(mlm_terms) / max(1, sum(mlm_counts)), n)
