"""Managers: aggregate the top-N uni-modal expert outputs for one cross-modal layer.

Every manager returns a :class:`ManagerOutput` whose ``output`` is the sum of
an aggregated uni-modal term and (when a previous cross-modal output exists)
a cross-modal term. Aggregation weights are normalized over the expert axis,
which is axis ``-3`` once weights are broadcast against a [..., N, L, D]
stack.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import LayerStack
from .errors import ConfigError, ContractError, DimensionError
from .nn import LayerNorm, Linear, Module, attend, param
from .tensor import Rng, Tensor, trunc_normal

DEFAULT_NOISE_STD = 1.0 / 6.0


class ManagerKind(str, enum.Enum):
    SAE = "SAE"
    SAE_SPLIT_INIT = "SAE_SPLIT_INIT"
    SAUE = "SAUE"
    AAUE = "AAUE"
    XATTN = "XATTN"
    CONCAT = "CONCAT"


STATIC_KINDS = (ManagerKind.SAE, ManagerKind.SAE_SPLIT_INIT, ManagerKind.SAUE)
QUERY_MODES = ("prev", "fused")
GRANULARITIES = ("expert", "dimension")


@dataclass
class ManagerOutput:
    output: Tensor
    unimodal: Tensor
    crossmodal: Tensor | None
    # broadcastable against [..., K, L, D]; K = N, or N + l - 1 for joint SAE
    weights: Tensor
    # second normalized group for SAE_SPLIT_INIT (the cross-modal part)
    cross_weights: Tensor | None = None


def expand_weights(weights, length: int, dim: int) -> np.ndarray:
    """Materialize weights as a dense [..., K, L, D] array."""
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    lead = w.shape[:-3]
    return np.broadcast_to(w, (*lead, w.shape[-3], length, dim))


def broadcast_static_weights(w) -> Tensor:
    """[N, 1] or [N, D] static weights -> [N, 1, 1] or [N, 1, D] for broadcasting."""
    w = T.as_tensor(w)
    if w.ndim != 2:
        raise DimensionError(f"static weights must be [N, 1] or [N, D], got {w.shape}")
    return T.reshape(w, (w.shape[0], 1, w.shape[1]))


def _weight_init(n: int, width: int) -> np.ndarray:
    return np.full((n, width), 1.0 / n)


def _stack_priors(priors: list) -> Tensor:
    return T.stack(priors, axis=-3)


class Manager(Module):
    kind: ManagerKind

    def __call__(self, stack: LayerStack, priors: list, other_prev=None, other_mask=None,
                 training: bool = False, rng: Rng | None = None) -> ManagerOutput:
        raise NotImplementedError


# ---------------------------------------------------------------- SAE


class SAEManager(Manager):
    """Softmax-weighted sum over the N experts and cross-modal outputs C_1..C_{l-1}.

    With ``split=True`` the uni-modal and cross-modal weights are normalized
    and tempered separately, initialized at 1/N and 1/(l-1).
    """

    def __init__(self, n: int, d: int, layer: int, granularity: str = "dimension", split: bool = False):
        self.kind = ManagerKind.SAE_SPLIT_INIT if split else ManagerKind.SAE
        self.n, self.layer, self.split = n, layer, split
        width = d if granularity == "dimension" else 1
        n_prior = layer - 1
        if split:
            self.weight = param(_weight_init(n, width))
            self.log_temperature = param(0.0)
            if n_prior:
                self.cross_weight = param(_weight_init(n_prior, width))
                self.cross_log_temperature = param(0.0)
        else:
            self.weight = param(_weight_init(n + n_prior, width))
            self.log_temperature = param(0.0)
        self.expert_ln = LayerNorm((n, 1, d))
        if n_prior:
            self.prior_ln = LayerNorm((n_prior, 1, d))

    def normalized(self) -> tuple[Tensor, Tensor | None]:
        w = T.softmax_with_temperature(self.weight, self.log_temperature, axis=0)
        if self.split and self.layer > 1:
            wc = T.softmax_with_temperature(self.cross_weight, self.cross_log_temperature, axis=0)
            return broadcast_static_weights(w), broadcast_static_weights(wc)
        return broadcast_static_weights(w), None

    def __call__(self, stack, priors, other_prev=None, other_mask=None, training=False, rng=None):
        return sae_parts(stack, priors, self)


def sae_parts(stack: LayerStack, prior_cross: list, params: SAEManager) -> ManagerOutput:
    if len(prior_cross) != params.layer - 1:
        raise ContractError(f"SAE at layer {params.layer} needs {params.layer - 1} prior outputs, "
                            f"got {len(prior_cross)}")
    w, wc = params.normalized()
    experts = params.expert_ln(stack.reps)
    n = params.n
    if not prior_cross:
        uni = T.sum(w * experts, axis=-3)
        return ManagerOutput(uni, uni, None, w)
    priors = params.prior_ln(_stack_priors(prior_cross))
    if params.split:
        uni = T.sum(w * experts, axis=-3)
        cross = T.sum(wc * priors, axis=-3)
        return ManagerOutput(uni + cross, uni, cross, w, wc)
    uni = T.sum(w[:n] * experts, axis=-3)
    cross = T.sum(w[n:] * priors, axis=-3)
    return ManagerOutput(uni + cross, uni, cross, w)


def sae_aggregate(stack: LayerStack, prior_cross: list, params: SAEManager) -> Tensor:
    return sae_parts(stack, prior_cross, params).output


# ---------------------------------------------------------------- SAUE


class SAUEManager(Manager):
    """Static softmax weights over experts plus an unnormalized W_C on LN(C_{l-1}).

    Layer-1 managers have no previous cross-modal output and hence no W_C.
    """

    kind = ManagerKind.SAUE

    def __init__(self, n: int, d: int, has_cross: bool = True, granularity: str = "dimension"):
        width = d if granularity == "dimension" else 1
        self.n = n
        self.weight = param(_weight_init(n, width))
        self.log_temperature = param(0.0)
        self.expert_ln = LayerNorm((n, 1, d))
        self.has_cross = has_cross
        if has_cross:
            self.cross_weight = param(np.ones((1, d)))
            self.cross_ln = LayerNorm(d)
        self.fixed: np.ndarray | None = None

    def freeze_one_hot(self, expert: int) -> None:
        """Pin the normalized weights to a one-hot vector and W_C to ones."""
        fixed = np.zeros(self.weight.shape)
        fixed[expert] = 1.0
        self.fixed = fixed
        if self.has_cross:
            self.cross_weight.data[...] = 1.0

    def normalized(self) -> Tensor:
        if self.fixed is not None:
            return broadcast_static_weights(Tensor(self.fixed))
        return broadcast_static_weights(
            T.softmax_with_temperature(self.weight, self.log_temperature, axis=0))

    def __call__(self, stack, priors, other_prev=None, other_mask=None, training=False, rng=None):
        prev = priors[-1] if (priors and self.has_cross) else None
        return saue_parts(stack, prev, self)


def saue_parts(stack: LayerStack, prev_cross, params: SAUEManager) -> ManagerOutput:
    w = params.normalized()
    uni = T.sum(w * params.expert_ln(stack.reps), axis=-3)
    if prev_cross is None:
        return ManagerOutput(uni, uni, None, w)
    if not params.has_cross:
        raise ContractError("this SAUE manager was built without a cross-modal input")
    cross = params.cross_weight * params.cross_ln(prev_cross)
    return ManagerOutput(uni + cross, uni, cross, w)


def saue_aggregate(stack: LayerStack, prev_cross, params: SAUEManager) -> Tensor:
    return saue_parts(stack, prev_cross, params).output


# ---------------------------------------------------------------- fused query


class FusedQuery(Module):
    """Cross-attention with query/key projections only (no value or output projection)."""

    def __init__(self, d: int, heads: int, rng: Rng):
        self.heads = heads
        self.query = Linear(d, d, rng.child("q"))
        self.key = Linear(d, d, rng.child("k"))


def fused_query(cv, ct, params: FusedQuery, key_mask=None) -> Tensor:
    """Attend from ``cv`` rows over ``ct`` rows; values are the raw ``ct`` rows."""
    return attend(params.query(cv), params.key(ct), T.as_tensor(ct), params.heads, key_mask)


# ---------------------------------------------------------------- adaptive managers


class _AdaptiveBase(Manager):
    """Shared state of the query-driven managers: W_C, LNs, temperature, query path."""

    def __init__(self, n: int, d: int, heads: int, query: str, rng: Rng):
        if query not in QUERY_MODES:
            raise ConfigError(f"unknown query mode {query!r}", "manager.query")
        self.n = n
        self.query_mode = query
        self.cross_weight = param(np.ones((1, d)))
        self.log_temperature = param(0.0)
        self.expert_ln = LayerNorm((n, 1, d))
        self.cross_ln = LayerNorm(d)
        if query == "fused":
            self.fused = FusedQuery(d, heads, rng.child("fused"))
            self.query_ln = LayerNorm(d)

    def make_query(self, prev, other_prev, other_mask=None) -> Tensor:
        if self.query_mode == "fused":
            if other_prev is None:
                raise ContractError("fused query needs the other modality's previous output")
            return fused_query(prev, other_prev, self.fused, other_mask)
        return T.as_tensor(prev)

    def query_norm(self, query) -> Tensor:
        return self.query_ln(query) if self.query_mode == "fused" else self.cross_ln(query)

    def _finish(self, experts_ln: Tensor, prev, weights: Tensor) -> ManagerOutput:
        uni = T.sum(weights * experts_ln, axis=-3)
        cross = self.cross_weight * self.cross_ln(prev)
        return ManagerOutput(uni + cross, uni, cross, weights)

    @staticmethod
    def _prev(priors):
        if not priors:
            raise ContractError("adaptive managers need the previous cross-modal output")
        return priors[-1]


class AAUEManager(_AdaptiveBase):
    """Per-token expert weights softmax(LN(query) W_M + eps), tempered."""

    kind = ManagerKind.AAUE

    def __init__(self, n: int, d: int, heads: int, rng: Rng, query: str = "fused",
                 noise_std: float = DEFAULT_NOISE_STD):
        super().__init__(n, d, heads, query, rng)
        if noise_std < 0:
            raise ConfigError("noise_std must be >= 0", "manager.noise_std")
        self.generator = param(trunc_normal(rng.child("wm"), (d, n)))
        self.noise_std = noise_std

    def __call__(self, stack, priors, other_prev=None, other_mask=None, training=False, rng=None):
        prev = self._prev(priors)
        query = self.make_query(prev, other_prev, other_mask)
        w = aaue_weights(stack, query, self, training, rng)
        return aaue_parts(stack, prev, w, self)


def aaue_weights(stack: LayerStack, query, params: AAUEManager, training: bool = False,
                 rng: Rng | None = None) -> Tensor:
    """Per-token weights [..., N, L] from the query; Gaussian noise only when training."""
    logits = T.matmul(params.query_norm(query), params.generator)  # [..., L, N]
    if training and params.noise_std > 0:
        if rng is None:
            raise ContractError("training-mode AAUE needs an rng for exploration noise")
        logits = logits + rng.normal(0.0, params.noise_std, size=logits.shape)
    w = T.softmax_with_temperature(logits, params.log_temperature, axis=-1)
    return T.swapaxes(w, -1, -2)


def aaue_parts(stack: LayerStack, prev_cross, weights, params: _AdaptiveBase) -> ManagerOutput:
    weights = T.as_tensor(weights)
    n, length = stack.reps.shape[-3], stack.reps.shape[-2]
    if weights.shape[-2:] != (n, length):
        raise DimensionError(f"weights {weights.shape} do not match [N={n}, L={length}]")
    w = T.reshape(weights, (*weights.shape, 1))
    return params._finish(params.expert_ln(stack.reps), prev_cross, w)


def aaue_aggregate(stack: LayerStack, prev_cross, weights, params: _AdaptiveBase) -> Tensor:
    return aaue_parts(stack, prev_cross, weights, params).output


class CrossAttentionManager(_AdaptiveBase):
    """Weights from attention scores between query tokens and each expert's first token."""

    kind = ManagerKind.XATTN

    def __init__(self, n: int, d: int, heads: int, rng: Rng, query: str = "prev"):
        super().__init__(n, d, heads, query, rng)
        self.score_query = Linear(d, d, rng.child("xq"))
        self.score_key = Linear(d, d, rng.child("xk"))

    def __call__(self, stack, priors, other_prev=None, other_mask=None, training=False, rng=None):
        prev = self._prev(priors)
        query = self.make_query(prev, other_prev, other_mask)
        experts = self.expert_ln(stack.reps)
        w = _xattn_weights(experts, query, self)
        return self._finish(experts, prev, T.reshape(w, (*w.shape, 1)))


def _xattn_weights(experts_ln: Tensor, query, params: CrossAttentionManager) -> Tensor:
    q = params.score_query(params.query_norm(query))          # [..., L, D]
    k = params.score_key(experts_ln[..., :, 0, :])            # [..., N, D]
    scores = T.matmul(q, k.T) * (1.0 / math.sqrt(q.shape[-1]))  # [..., L, N]
    return T.swapaxes(T.softmax_with_temperature(scores, params.log_temperature, axis=-1), -1, -2)


def xattn_manager_weights(stack: LayerStack, query, params: CrossAttentionManager) -> Tensor:
    return _xattn_weights(params.expert_ln(stack.reps), query, params)


class ConcatAttentionManager(_AdaptiveBase):
    """Per-(expert, token, dimension) weights from [query ; expert] projected 2D -> D."""

    kind = ManagerKind.CONCAT

    def __init__(self, n: int, d: int, heads: int, rng: Rng, query: str = "prev"):
        super().__init__(n, d, heads, query, rng)
        self.proj = Linear(2 * d, d, rng.child("proj"))

    def __call__(self, stack, priors, other_prev=None, other_mask=None, training=False, rng=None):
        prev = self._prev(priors)
        query = self.make_query(prev, other_prev, other_mask)
        return concat_parts(stack, prev, self, query)


def concat_parts(stack: LayerStack, prev_cross, params: ConcatAttentionManager, query=None) -> ManagerOutput:
    query = prev_cross if query is None else query
    experts = params.expert_ln(stack.reps)
    q = params.query_norm(query)
    q = T.broadcast_to(T.reshape(q, (*q.shape[:-2], 1, *q.shape[-2:])), experts.shape)
    logits = params.proj(T.concat([q, experts], axis=-1))  # [..., N, L, D]
    w = T.softmax_with_temperature(logits, params.log_temperature, axis=-3)
    return params._finish(experts, prev_cross, w)


def concat_attention_aggregate(stack: LayerStack, prev_cross, params: ConcatAttentionManager,
                               query=None) -> Tensor:
    return concat_parts(stack, prev_cross, params, query).output


# ---------------------------------------------------------------- one-hot bridge


class OneHotBridge(Manager):
    """Frozen one-hot routing: LN(expert e) (+ LN(C_{l-1})). Holds no parameters."""

    kind = ManagerKind.SAUE

    def __init__(self, n: int, d: int, expert: int, has_cross: bool = True):
        if not 0 <= expert < n:
            raise ConfigError(f"expert index {expert} outside [0, {n})")
        self.n, self.expert, self.has_cross = n, expert, has_cross
        self.ln = LayerNorm(d, affine=False)
        w = np.zeros((n, 1, 1))
        w[expert] = 1.0
        self.fixed = w

    def __call__(self, stack, priors, other_prev=None, other_mask=None, training=False, rng=None):
        uni = self.ln(stack.reps[..., self.expert, :, :])
        w = Tensor(self.fixed)
        if priors and self.has_cross:
            cross = self.ln(priors[-1])
            return ManagerOutput(uni + cross, uni, cross, w)
        return ManagerOutput(uni, uni, None, w)


# ---------------------------------------------------------------- factory


def build_manager(kind, n: int, d: int, heads: int, layer: int, rng: Rng, query: str = "fused",
                  granularity: str = "dimension", noise_std: float = DEFAULT_NOISE_STD) -> Manager:
    """Manager for cross-modal layer ``layer`` (1-based).

    SAE kinds apply at every layer. All other kinds use an SAUE manager at
    layer 1, which has no previous cross-modal output to query with.
    """
    kind = ManagerKind(kind)
    if granularity not in GRANULARITIES:
        raise ConfigError(f"unknown granularity {granularity!r}", "manager.granularity")
    if kind in (ManagerKind.SAE, ManagerKind.SAE_SPLIT_INIT):
        return SAEManager(n, d, layer, granularity, split=kind is ManagerKind.SAE_SPLIT_INIT)
    if kind is ManagerKind.SAUE or layer == 1:
        return SAUEManager(n, d, has_cross=layer > 1, granularity=granularity)
    if kind is ManagerKind.AAUE:
        return AAUEManager(n, d, heads, rng, query, noise_std)
    if kind is ManagerKind.XATTN:
        return CrossAttentionManager(n, d, heads, rng, query)
    return ConcatAttentionManager(n, d, heads, rng, query)
