"""Pre-training heads and losses: MLM, ITM, ITC, and a multi-label demo head."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .crossmodal import CrossModalState
from .encoders import BOS, EOS, MASK, NUM_SPECIALS, PAD
from .errors import ContractError, DimensionError
from .nn import LayerNorm, Linear, Module, param
from .tensor import Rng, Tensor

SPECIAL_IDS = (PAD, BOS, EOS, MASK)
ITC_INIT_TEMPERATURE = 0.07


@dataclass
class MaskPlan:
    """Masked (row, col) positions and the ids they originally held."""

    rows: np.ndarray
    cols: np.ndarray
    original: np.ndarray
    ratio: float = 0.15

    def __len__(self) -> int:
        return int(self.cols.size)

    @classmethod
    def empty(cls, ratio: float = 0.15) -> MaskPlan:
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), ratio)


@dataclass
class PairBatch:
    images: np.ndarray          # [B, P, patch_dim]
    ids: np.ndarray             # [B, L_T]
    text_mask: np.ndarray       # [B, L_T] bool, False on padding
    labels: np.ndarray          # [B] 1 matched, 0 mismatched
    multisets: list = field(default_factory=list)
    caption_multisets: list = field(default_factory=list)
    pair_ids: np.ndarray | None = None
    plan: MaskPlan | None = None

    def __len__(self) -> int:
        return int(self.labels.size)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise ContractError("pair labels must be 0 or 1")


# ---------------------------------------------------------------- masking

def maskable(ids: np.ndarray) -> np.ndarray:
    return ~np.isin(ids, SPECIAL_IDS)


def apply_mask(seq, ratio: float, rng: Rng, vocab: int) -> tuple[np.ndarray, MaskPlan]:
    """Select each non-special token with probability ``ratio``; fill 80/10/10.

    Selected tokens become MASK 80% of the time, a random non-special token
    10% of the time, and stay unchanged otherwise. Works on one sequence [L]
    or a batch [B, L].
    """
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"mask ratio {ratio} outside [0, 1]")
    ids = np.array(seq, dtype=np.int64)
    squeeze = ids.ndim == 1
    ids2 = ids[None] if squeeze else ids
    can = maskable(ids2)
    pick = can & (rng.random(ids2.shape) < ratio)
    rows, cols = np.nonzero(pick)
    original = ids2[rows, cols].copy()
    fill = rng.random(rows.size)
    random_tok = rng.integers(NUM_SPECIALS, vocab, size=rows.size)
    out = ids2.copy()
    out[rows[fill < 0.8], cols[fill < 0.8]] = MASK
    swap = (fill >= 0.8) & (fill < 0.9)
    out[rows[swap], cols[swap]] = random_tok[swap]
    plan = MaskPlan(rows.astype(np.int64), cols.astype(np.int64), original, ratio)
    return (out[0] if squeeze else out), plan


# ---------------------------------------------------------------- MLM

class MLMHead(Module):
    """Dense + GELU + LN, then a decoder tied to the word-embedding table."""

    def __init__(self, d: int, uni_hidden: int, word_table: Tensor, rng: Rng):
        self.dense = Linear(d, uni_hidden, rng.child("dense"))
        self.ln = LayerNorm(uni_hidden)
        self.decoder_weight = word_table
        self.decoder_bias = param(np.zeros(word_table.shape[0]))

    def __call__(self, h) -> Tensor:
        h = self.ln(T.gelu(self.dense(h)))
        return T.matmul(h, self.decoder_weight.T) + self.decoder_bias


def mlm_loss(state: CrossModalState, plan: MaskPlan, head: MLMHead) -> Tensor:
    """Cross-entropy of the original ids at masked positions of the top text layer."""
    if len(plan) == 0:
        warnings.warn("empty mask plan: MLM loss defined as zero", RuntimeWarning, stacklevel=2)
        return Tensor(0.0)
    top = state.t_top
    rows = top[plan.rows, plan.cols] if top.ndim == 3 else top[plan.cols]
    return T.cross_entropy_logits(head(rows), plan.original)


# ---------------------------------------------------------------- ITM

class ITMHead(Module):
    def __init__(self, d: int, rng: Rng, classes: int = 2):
        self.pool_v = Linear(d, d, rng.child("pool_v"))
        self.pool_t = Linear(d, d, rng.child("pool_t"))
        self.classifier = Linear(2 * d, classes, rng.child("cls"))


def pooled(state: CrossModalState, pool_v: Linear, pool_t: Linear) -> Tensor:
    """tanh-pooled class token (visual slot 0) and start token (textual slot 0), concatenated."""
    pv = T.tanh(pool_v(state.v_top[..., 0, :]))
    pt = T.tanh(pool_t(state.t_top[..., 0, :]))
    return T.concat([pv, pt], axis=-1)


def itm_pool_and_logits(state: CrossModalState, head: ITMHead) -> Tensor:
    return head.classifier(pooled(state, head.pool_v, head.pool_t))


def itm_loss(logits: Tensor, labels) -> Tensor:
    return T.cross_entropy_logits(logits, np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------- ITC

class ITCHead(Module):
    """Linear projections on the uni-modal encoders plus a learnable temperature."""

    def __init__(self, uni_hidden: int, dim: int, rng: Rng):
        self.proj_v = Linear(uni_hidden, dim, rng.child("v"))
        self.proj_t = Linear(uni_hidden, dim, rng.child("t"))
        self.log_temperature = param(math.log(ITC_INIT_TEMPERATURE))

    def temperature(self) -> Tensor:
        return T.exp(self.log_temperature)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    return x / T.sqrt(T.sum(x * x, axis=-1, keepdims=True) + eps)


def itc_similarity(v_top, t_top, head: ITCHead) -> Tensor:
    """[B, B] dot products of projected, length-normalized image and text vectors."""
    zv = l2_normalize(head.proj_v(v_top))
    zt = l2_normalize(head.proj_t(t_top))
    return T.matmul(zv, zt.T)


def itc_loss(sim, temperature=1.0) -> Tensor:
    """Symmetric cross-entropy of rows and columns against the diagonal."""
    sim = T.as_tensor(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise DimensionError(f"itc_loss expects a square [B, B] matrix, got {sim.shape}")
    b = sim.shape[0]
    if b < 2:
        raise ContractError("ITC needs at least two pairs")
    logits = sim / temperature
    target = np.arange(b)
    return (T.cross_entropy_logits(logits, target) + T.cross_entropy_logits(logits.T, target)) * 0.5


def hard_negative_probs(sim, exclude=None) -> np.ndarray:
    """Row-wise softmax over off-diagonal entries; the diagonal gets probability 0.

    ``exclude`` is an optional boolean [B, B] mask of further forbidden columns
    (e.g. captions that happen to describe the same content). Every row must
    keep at least one allowed column.
    """
    s = np.array(sim.data if isinstance(sim, Tensor) else sim, dtype=np.float64)
    b = s.shape[0]
    s[np.arange(b), np.arange(b)] = -np.inf
    if exclude is not None:
        s[np.asarray(exclude, dtype=bool)] = -np.inf
    if np.any(np.all(np.isneginf(s), axis=1)):
        raise ContractError("a row has no admissible negative")
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def sample_hard_negatives(sim, rng: Rng, exclude=None) -> np.ndarray:
    """One in-batch negative column per row, drawn from :func:`hard_negative_probs`."""
    b = (sim.shape if isinstance(sim, Tensor) else np.shape(sim))[0]
    if b < 2:
        raise ContractError("hard-negative sampling needs a batch of at least 2")
    probs = hard_negative_probs(sim, exclude)
    u = rng.random(b)
    cdf = np.cumsum(probs, axis=1)
    picks = (u[:, None] >= cdf).sum(axis=1)
    picks = np.minimum(picks, b - 1)
    # guard against round-off landing on a zero-probability column
    bad = probs[np.arange(b), picks] == 0.0
    if bad.any():
        for i in np.nonzero(bad)[0]:
            picks[i] = int(np.argmax(probs[i]))
    return picks


# ---------------------------------------------------------------- multi-label head

class MultiLabelHead(Module):
    """Pooled concat -> MLP -> per-class logits for binary cross-entropy."""

    def __init__(self, d: int, classes: int, rng: Rng):
        self.pool_v = Linear(d, d, rng.child("pool_v"))
        self.pool_t = Linear(d, d, rng.child("pool_t"))
        self.hidden = Linear(2 * d, 2 * d, rng.child("hidden"))
        self.out = Linear(2 * d, classes, rng.child("out"))

    def __call__(self, state: CrossModalState) -> Tensor:
        h = pooled(state, self.pool_v, self.pool_t)
        return self.out(T.gelu(self.hidden(h)))


def multilabel_loss(logits: Tensor, targets) -> Tensor:
    return T.bce_with_logits(logits, targets)
