"""Co-attention cross-modal tower with a visual and a textual manager per layer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import LayerStack
from .errors import ConfigError
from .managers import (DEFAULT_NOISE_STD, GRANULARITIES, QUERY_MODES, Manager, ManagerKind,
                       ManagerOutput, OneHotBridge, build_manager)
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from .tensor import Rng, Tensor


@dataclass
class CrossModalConfig:
    layers: int = 3
    n_experts: int = 6
    hidden: int = 32
    heads: int = 4
    ffn_mult: int = 4
    manager: str = "AAUE"
    query: str = "fused"
    granularity: str = "dimension"
    noise_std: float = DEFAULT_NOISE_STD
    bt_reference: bool = False
    prenorm: bool = False

    def validate(self, path: str = "crossmodal") -> None:
        if self.layers < 1:
            raise ConfigError("need at least one cross-modal layer", path + ".layers")
        if self.n_experts < 1:
            raise ConfigError("need at least one expert", path + ".n_experts")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}", path)
        try:
            ManagerKind(self.manager)
        except ValueError:
            raise ConfigError(f"unknown manager kind {self.manager!r}", path + ".manager") from None
        if self.query not in QUERY_MODES:
            raise ConfigError(f"query must be one of {QUERY_MODES}", path + ".query")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}", path + ".granularity")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0", path + ".noise_std")
        if self.bt_reference and self.layers > self.n_experts:
            raise ConfigError("bt_reference needs layers <= n_experts (one expert per layer)",
                              path + ".layers")


class CoAttentionHalf(Module):
    """One modality's MSA, MCA and FFN blocks with their layer norms."""

    def __init__(self, d: int, heads: int, ffn_mult: int, rng: Rng):
        self.self_attn = MultiHeadAttention(d, heads, rng.child("self"))
        self.ln_self = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads, rng.child("cross"))
        self.ln_cross = LayerNorm(d)
        self.ffn = FeedForward(d, ffn_mult, rng.child("ffn"))
        self.ln_ffn = LayerNorm(d)


class CoAttentionLayer(Module):
    def __init__(self, d: int, heads: int, ffn_mult: int, rng: Rng, prenorm: bool = False):
        self.prenorm = prenorm
        self.vision = CoAttentionHalf(d, heads, ffn_mult, rng.child("v"))
        self.text = CoAttentionHalf(d, heads, ffn_mult, rng.child("t"))

    def __call__(self, cv, ct, v_mask=None, t_mask=None):
        return co_attention_layer(cv, ct, self, v_mask, t_mask)


def co_attention_layer(cv_in, ct_in, params: CoAttentionLayer, v_mask=None, t_mask=None):
    """MSA -> MCA -> FFN per modality.

    Both MCA blocks read the other modality's MSA output from this same layer,
    so the result does not depend on which modality is computed first.
    """
    v, t = params.vision, params.text
    if params.prenorm:
        hv, ht = v.ln_self(cv_in), t.ln_self(ct_in)
        sv = cv_in + v.self_attn(hv, hv, v_mask)
        st = ct_in + t.self_attn(ht, ht, t_mask)
        hv, ht = v.ln_cross(sv), t.ln_cross(st)
        xv = sv + v.cross_attn(hv, ht, t_mask)
        xt = st + t.cross_attn(ht, hv, v_mask)
        return xv + v.ffn(v.ln_ffn(xv)), xt + t.ffn(t.ln_ffn(xt))
    sv = v.ln_self(cv_in + v.self_attn(cv_in, cv_in, v_mask))
    st = t.ln_self(ct_in + t.self_attn(ct_in, ct_in, t_mask))
    xv = v.ln_cross(sv + v.cross_attn(sv, st, t_mask))
    xt = t.ln_cross(st + t.cross_attn(st, sv, v_mask))
    return v.ln_ffn(xv + v.ffn(xv)), t.ln_ffn(xt + t.ffn(xt))


@dataclass
class CrossModalState:
    """Per-layer outputs; index 0 holds the projected last uni-modal layer."""

    cv: list[Tensor]
    ct: list[Tensor]
    v_managers: list[ManagerOutput] = field(default_factory=list)
    t_managers: list[ManagerOutput] = field(default_factory=list)
    v_mask: np.ndarray | None = None
    t_mask: np.ndarray | None = None

    @property
    def v_top(self) -> Tensor:
        return self.cv[-1]

    @property
    def t_top(self) -> Tensor:
        return self.ct[-1]


class CrossModalTower(Module):
    def __init__(self, cfg: CrossModalConfig, uni_hidden: int, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        d, n = cfg.hidden, cfg.n_experts
        self.proj_v = Linear(uni_hidden, d, rng.child("proj_v"))
        self.proj_t = Linear(uni_hidden, d, rng.child("proj_t"))
        self.layers = [CoAttentionLayer(d, cfg.heads, cfg.ffn_mult, rng.child("layer", i), cfg.prenorm)
                       for i in range(cfg.layers)]
        self.v_managers: list[Manager] = []
        self.t_managers: list[Manager] = []
        for i in range(cfg.layers):
            layer = i + 1
            if cfg.bt_reference:
                self.v_managers.append(OneHotBridge(n, d, expert=i, has_cross=layer > 1))
                self.t_managers.append(OneHotBridge(n, d, expert=i, has_cross=layer > 1))
                continue
            for mod, bucket in (("v", self.v_managers), ("t", self.t_managers)):
                bucket.append(build_manager(cfg.manager, n, d, cfg.heads, layer,
                                            rng.child("manager", mod, i), cfg.query,
                                            cfg.granularity, cfg.noise_std))

    def init_state(self, v_last, t_last, v_mask=None, t_mask=None) -> CrossModalState:
        return init_state(v_last, t_last, self, v_mask, t_mask)

    def __call__(self, vstack: LayerStack, tstack: LayerStack, state: CrossModalState,
                 training: bool = False, rng: Rng | None = None) -> CrossModalState:
        return forward_tower(vstack, tstack, self, state, training, rng)


def init_state(v_last, t_last, params: CrossModalTower, v_mask=None, t_mask=None) -> CrossModalState:
    """C_0 for each modality: last uni-modal layer through its linear projection."""
    return CrossModalState([params.proj_v(v_last)], [params.proj_t(t_last)],
                           v_mask=v_mask, t_mask=t_mask)


def forward_tower(vstack: LayerStack, tstack: LayerStack, params: CrossModalTower,
                  state: CrossModalState, training: bool = False,
                  rng: Rng | None = None) -> CrossModalState:
    """Run every cross-modal layer, feeding each one its two managers' outputs.

    Layer 1 managers see only the expert stacks. Later managers also see
    C_{l-1} of their own modality and, for fused queries, of the other one.
    Manager outputs are recorded on the returned state.
    """
    cfg = params.cfg
    for stack in (vstack, tstack):
        if stack.n_experts != cfg.n_experts:
            raise ConfigError(f"{stack.modality} stack has {stack.n_experts} experts, "
                              f"config expects {cfg.n_experts}", "crossmodal.n_experts")
    noisy = training and rng is not None
    vm, tm = state.v_mask, state.t_mask
    for i, layer in enumerate(params.layers):
        v_prior, t_prior = state.cv[1:], state.ct[1:]
        other_v = state.cv[-1] if i else None
        other_t = state.ct[-1] if i else None
        mv = params.v_managers[i](vstack, v_prior, other_t, tm, training,
                                  rng.child("noise", i, 0) if noisy else None)
        mt = params.t_managers[i](tstack, t_prior, other_v, vm, training,
                                  rng.child("noise", i, 1) if noisy else None)
        cv, ct = layer(mv.output, mt.output, vm, tm)
        state.v_managers.append(mv)
        state.t_managers.append(mt)
        state.cv.append(cv)
        state.ct.append(ct)
    return state
