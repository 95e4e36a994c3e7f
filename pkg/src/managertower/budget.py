"""Analytic parameter and forward-FLOP accounting.

FLOP convention: one multiply-add is one FLOP; layer norm and softmax cost 5
operations per element; activations, residual adds and element-wise
products cost 1 per element. Counts are per sample.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

from .crossmodal import CrossModalConfig
from .encoders import EncoderConfig
from .managers import ManagerKind
from .model import ManagerTower, ModelConfig

COMPONENTS = ("vision_encoder", "text_encoder", "crossmodal_layers", "managers",
              "fused_query", "heads")
LN_OPS = 5
SOFTMAX_OPS = 5


@dataclass
class BudgetReport:
    params: dict = field(default_factory=dict)   # component -> int
    flops: dict = field(default_factory=dict)    # component -> int
    config: dict = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    def as_dict(self) -> dict:
        comps = {c: {"params": int(self.params.get(c, 0)), "flops": int(self.flops.get(c, 0))}
                 for c in COMPONENTS}
        comps["total"] = {"params": self.total_params, "flops": self.total_flops}
        return {"components": comps, "config": self.config}


# ---------------------------------------------------------------- parameters

def linear_params(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_in * d_out + (d_out if bias else 0)


def ln_params(d: int) -> int:
    return 2 * d


def mha_params(d: int) -> int:
    return 4 * linear_params(d, d)


def ffn_params(d: int, mult: int) -> int:
    return linear_params(d, d * mult) + linear_params(d * mult, d)


def encoder_layer_params(d: int, mult: int) -> int:
    return mha_params(d) + ffn_params(d, mult) + 2 * ln_params(d)


def manager_params(cm: CrossModalConfig, layer: int) -> tuple[int, int]:
    """(manager parameters excluding the fused query, fused-query parameters)."""
    n, d = cm.n_experts, cm.hidden
    if cm.bt_reference:
        return 0, 0
    kind = ManagerKind(cm.manager)
    w = d if cm.granularity == "dimension" else 1
    expert_ln = 2 * n * d
    if kind in (ManagerKind.SAE, ManagerKind.SAE_SPLIT_INIT):
        prior = layer - 1
        p = expert_ln + 2 * prior * d
        if kind is ManagerKind.SAE:
            return p + (n + prior) * w + 1, 0
        return p + n * w + 1 + (prior * w + 1 if prior else 0), 0
    if kind is ManagerKind.SAUE or layer == 1:
        return n * w + 1 + expert_ln + (3 * d if layer > 1 else 0), 0
    base = d + 1 + expert_ln + 2 * d
    fused = 2 * linear_params(d, d) + ln_params(d) if cm.query == "fused" else 0
    if kind is ManagerKind.AAUE:
        return base + d * n, fused
    if kind is ManagerKind.XATTN:
        return base + 2 * linear_params(d, d), fused
    return base + linear_params(2 * d, d), fused


def count_params(cfg: ModelConfig) -> BudgetReport:
    enc, cm = cfg.encoder, cfg.crossmodal
    h, d = enc.hidden, cm.hidden
    layers = enc.depth * encoder_layer_params(h, enc.ffn_mult)
    vision = linear_params(enc.patch_dim, h, bias=False) + h + enc.vision_len * h + layers
    text = enc.vocab * h + enc.max_len * h + layers
    half = 2 * mha_params(d) + ffn_params(d, cm.ffn_mult) + 3 * ln_params(d)
    cross = 2 * linear_params(h, d) + cm.layers * 2 * half + 2 * d + cm.n_experts * d
    managers = fused = 0
    for layer in range(1, cm.layers + 1):
        m, f = manager_params(cm, layer)
        managers += 2 * m
        fused += 2 * f
    itc = cfg.resolved_itc_dim
    heads = (linear_params(d, h) + ln_params(h) + enc.vocab           # MLM, decoder tied
             + 2 * linear_params(d, d) + linear_params(2 * d, 2)      # ITM
             + 2 * linear_params(h, itc) + 1)                         # ITC
    if cfg.vqa_classes:
        heads += 2 * linear_params(d, d) + linear_params(2 * d, 2 * d) + linear_params(2 * d, cfg.vqa_classes)
    return BudgetReport(
        params={"vision_encoder": vision, "text_encoder": text, "crossmodal_layers": cross,
                "managers": managers, "fused_query": fused, "heads": heads},
        config=config_echo(cfg))


def component_of(name: str) -> str:
    """Budget component that an instantiated parameter name belongs to."""
    if name.startswith(("patch_embed.", "vision_encoder.")):
        return "vision_encoder"
    if name.startswith(("text_embed.", "text_encoder.")):
        return "text_encoder"
    if name.startswith("tower.") and "_managers." in name:
        return "fused_query" if (".fused." in name or ".query_ln." in name) else "managers"
    if name.startswith(("tower.", "stack_embed.")):
        return "crossmodal_layers"
    return "heads"


def enumerate_params(model: ManagerTower) -> dict:
    out = dict.fromkeys(COMPONENTS, 0)
    for name, p in model.named_parameters():
        out[component_of(name)] += p.size
    return out


# ---------------------------------------------------------------- FLOPs

def linear_flops(rows: int, d_in: int, d_out: int) -> int:
    return rows * d_in * d_out


def attention_core_flops(lq: int, lk: int, d: int, heads: int) -> int:
    return 2 * lq * lk * d + SOFTMAX_OPS * heads * lq * lk


def mha_flops(lq: int, lk: int, d: int, heads: int, value_proj: bool = True,
              out_proj: bool = True) -> int:
    f = linear_flops(lq, d, d) + linear_flops(lk, d, d) + attention_core_flops(lq, lk, d, heads)
    f += linear_flops(lk, d, d) if value_proj else 0
    f += linear_flops(lq, d, d) if out_proj else 0
    return f


def ffn_flops(rows: int, d: int, mult: int) -> int:
    return 2 * linear_flops(rows, d, d * mult) + rows * d * mult


def encoder_layer_flops(length: int, d: int, heads: int, mult: int) -> int:
    return (mha_flops(length, length, d, heads) + ffn_flops(length, d, mult)
            + 2 * LN_OPS * length * d + 2 * length * d)


def coattention_half_flops(length: int, other: int, d: int, heads: int, mult: int) -> int:
    return (mha_flops(length, length, d, heads) + mha_flops(length, other, d, heads)
            + ffn_flops(length, d, mult) + 3 * LN_OPS * length * d + 3 * length * d)


def manager_flops(cm: CrossModalConfig, layer: int, length: int, other: int) -> tuple[int, int]:
    """(manager FLOPs excluding the fused query, fused-query FLOPs) for one modality."""
    n, d = cm.n_experts, cm.hidden
    ld = length * d
    cross_term = LN_OPS * ld + 2 * ld        # LN(C), W_C product, final add
    if cm.bt_reference:
        return LN_OPS * ld + (LN_OPS * ld + ld if layer > 1 else 0), 0
    kind = ManagerKind(cm.manager)
    w = d if cm.granularity == "dimension" else 1
    experts = LN_OPS * n * ld + n * ld       # LN of every expert, weighted sum
    if kind in (ManagerKind.SAE, ManagerKind.SAE_SPLIT_INIT):
        prior = layer - 1
        k = n + prior
        return (SOFTMAX_OPS * k * w + experts + prior * (LN_OPS * ld + ld)
                + (ld if prior else 0)), 0
    if kind is ManagerKind.SAUE or layer == 1:
        return SOFTMAX_OPS * n * w + experts + (cross_term if layer > 1 else 0), 0
    fused = 0
    if cm.query == "fused":
        fused = (mha_flops(length, other, d, cm.heads, value_proj=False, out_proj=False)
                 + LN_OPS * ld)
    if kind is ManagerKind.AAUE:
        gen = linear_flops(length, d, n) + SOFTMAX_OPS * length * n
    elif kind is ManagerKind.XATTN:
        gen = (linear_flops(length, d, d) + linear_flops(n, d, d) + length * n * d
               + SOFTMAX_OPS * length * n)
    else:
        gen = linear_flops(n * length, 2 * d, d) + SOFTMAX_OPS * n * ld
    return experts + cross_term + gen, fused


def estimate_flops(cfg: ModelConfig, text_len: int | None = None,
                   vision_len: int | None = None) -> BudgetReport:
    enc, cm = cfg.encoder, cfg.crossmodal
    lt = text_len if text_len is not None else enc.max_len
    lv = vision_len if vision_len is not None else enc.vision_len
    h, d, n = enc.hidden, cm.hidden, cm.n_experts
    vision = (linear_flops(lv - 1, enc.patch_dim, h) + lv * h
              + enc.depth * encoder_layer_flops(lv, h, enc.heads, enc.ffn_mult))
    text = lt * h + enc.depth * encoder_layer_flops(lt, h, enc.heads, enc.ffn_mult)
    cross = (linear_flops(n * (lv + lt), h, d) + 2 * n * (lv + lt) * d
             + cm.layers * (coattention_half_flops(lv, lt, d, cm.heads, cm.ffn_mult)
                            + coattention_half_flops(lt, lv, d, cm.heads, cm.ffn_mult)))
    managers = fused = 0
    for layer in range(1, cm.layers + 1):
        for length, other in ((lv, lt), (lt, lv)):
            m, f = manager_flops(cm, layer, length, other)
            managers += m
            fused += f
    heads = 2 * linear_flops(1, d, d) + 2 * d + linear_flops(1, 2 * d, 2)   # ITM pooler
    return BudgetReport(
        flops={"vision_encoder": vision, "text_encoder": text, "crossmodal_layers": cross,
               "managers": managers, "fused_query": fused, "heads": heads},
        config={**config_echo(cfg), "text_len": lt, "vision_len": lv})


def budget(cfg: ModelConfig, text_len: int | None = None, vision_len: int | None = None) -> BudgetReport:
    p = count_params(cfg)
    f = estimate_flops(cfg, text_len, vision_len)
    return BudgetReport(p.params, f.flops, f.config)


def config_echo(cfg: ModelConfig) -> dict:
    cm, enc = cfg.crossmodal, cfg.encoder
    return {"hidden": cm.hidden, "uni_hidden": enc.hidden, "heads": cm.heads,
            "crossmodal_layers": cm.layers, "n_experts": cm.n_experts, "manager": cm.manager,
            "query": cm.query, "granularity": cm.granularity, "bt_reference": cm.bt_reference,
            "encoder_depth": enc.depth}


# ---------------------------------------------------------------- profiles and delta checks

PAPER_TEXT_LEN = 50
PAPER_VISION_LEN = 577


def paper_profile(**crossmodal) -> ModelConfig:
    """Base-size backbones (12 layers, width 768) and a 6-layer, 6-expert tower."""
    enc = EncoderConfig(depth=12, hidden=768, heads=12, ffn_mult=4, vocab=50265, max_len=514,
                        patch_dim=768, grid=24)
    cm = CrossModalConfig(**{"layers": 6, "n_experts": 6, "hidden": 768, "heads": 12,
                             "ffn_mult": 4, "manager": "AAUE", "query": "fused",
                             "granularity": "dimension", **crossmodal})
    return ModelConfig(enc, cm)


def toy_profile(**crossmodal) -> ModelConfig:
    return ModelConfig(EncoderConfig(), CrossModalConfig(**crossmodal))


@dataclass
class DeltaCheck:
    name: str
    measured: float
    target: float
    rel_tol: float
    unit: str

    @property
    def passed(self) -> bool:
        return abs(self.measured - self.target) <= self.rel_tol * abs(self.target)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name}: {self.measured:.4f}{self.unit} "
                f"(target {self.target}{self.unit} +/- {self.rel_tol:.0%})")


def variant(cfg: ModelConfig, **crossmodal) -> ModelConfig:
    out = copy.deepcopy(cfg)
    for k, v in crossmodal.items():
        setattr(out.crossmodal, k, v)
    return out


def delta_checks(base: ModelConfig | None = None, text_len: int = PAPER_TEXT_LEN,
                 vision_len: int = PAPER_VISION_LEN) -> list[DeltaCheck]:
    """Variant differences that the architecture fixes independently of backbone conventions."""
    base = base or paper_profile()
    fused = variant(base, manager="AAUE", query="fused", bt_reference=False)
    prev = variant(base, manager="AAUE", query="prev", bt_reference=False)
    saue = variant(base, manager="SAUE", bt_reference=False)
    bt = variant(base, bt_reference=True)

    def p(c):
        return count_params(c).total_params / 1e6

    def f(c):
        return estimate_flops(c, text_len, vision_len).total_flops / 1e9

    return [
        DeltaCheck("params AAUE(fused) - AAUE(prev)", p(fused) - p(prev), 11.87, 0.01, "M"),
        DeltaCheck("params SAUE - bt_reference", p(saue) - p(bt), 0.19, 0.05, "M"),
        DeltaCheck("flops AAUE(fused) - AAUE(prev)", f(fused) - f(prev), 4.17, 0.15, "G"),
        DeltaCheck("flops SAUE - bt_reference", f(saue) - f(bt), 0.09, 0.50, "G"),
    ]
