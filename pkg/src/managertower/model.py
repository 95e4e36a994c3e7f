"""Full model: two uni-modal encoders, the managed cross-modal tower, and heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .crossmodal import CrossModalConfig, CrossModalState, CrossModalTower
from .encoders import (EncoderConfig, LayerStack, PatchEmbeddings, StackEmbeddings, TextEmbeddings,
                       UniModalEncoder, top_n_stack)
from .errors import ConfigError
from .nn import Module
from .objectives import ITCHead, ITMHead, MLMHead, MultiLabelHead
from .tensor import Rng, Tensor


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    crossmodal: CrossModalConfig = field(default_factory=CrossModalConfig)
    itc_dim: int = 0          # 0 means half the uni-modal width
    vqa_classes: int = 0      # 0 disables the multi-label head

    def validate(self, path: str = "model") -> None:
        self.encoder.validate(self.crossmodal.n_experts, path + ".encoder")
        self.crossmodal.validate(path + ".crossmodal")
        if self.itc_dim < 0:
            raise ConfigError("itc_dim must be >= 0", path + ".itc_dim")
        if self.vqa_classes < 0:
            raise ConfigError("vqa_classes must be >= 0", path + ".vqa_classes")

    @property
    def resolved_itc_dim(self) -> int:
        return self.itc_dim or max(1, self.encoder.hidden // 2)


@dataclass
class ModelOutput:
    state: CrossModalState
    v_layers: list[Tensor]
    t_layers: list[Tensor]
    vstack: LayerStack
    tstack: LayerStack


class ManagerTower(Module):
    """Encoders -> top-N stacks -> managed co-attention tower.

    Encoder layer outputs pass through the entry projections W_V / W_T
    before stacking, so managers see cross-modal-width experts; C_0 is the
    projected last layer.
    """

    def __init__(self, cfg: ModelConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        enc, cm = cfg.encoder, cfg.crossmodal
        self.patch_embed = PatchEmbeddings(enc, rng.child("patch"))
        self.text_embed = TextEmbeddings(enc, rng.child("text"))
        self.vision_encoder = UniModalEncoder(enc, rng.child("venc"))
        self.text_encoder = UniModalEncoder(enc, rng.child("tenc"))
        self.stack_embed = StackEmbeddings(cm.n_experts, cm.hidden, rng.child("stack"))
        self.tower = CrossModalTower(cm, enc.hidden, rng.child("tower"))
        self.mlm_head = MLMHead(cm.hidden, enc.hidden, self.text_embed.word, rng.child("mlm"))
        self.itm_head = ITMHead(cm.hidden, rng.child("itm"))
        self.itc_head = ITCHead(enc.hidden, cfg.resolved_itc_dim, rng.child("itc"))
        self.vqa_head = (MultiLabelHead(cm.hidden, cfg.vqa_classes, rng.child("vqa"))
                         if cfg.vqa_classes else None)

    # parameters trained at the cross-modal learning rate
    CROSS_MODAL_PREFIXES = ("stack_embed.", "tower.", "mlm_head.", "itm_head.", "itc_head.",
                            "vqa_head.")

    def is_cross_modal(self, name: str) -> bool:
        return name.startswith(self.CROSS_MODAL_PREFIXES)

    def encode(self, images, ids, text_mask=None) -> tuple[list[Tensor], list[Tensor]]:
        v_layers = self.vision_encoder(self.patch_embed(images))
        t_layers = self.text_encoder(self.text_embed(ids), text_mask)
        return v_layers, t_layers

    def __call__(self, images, ids, text_mask=None, training: bool = False,
                 rng: Rng | None = None) -> ModelOutput:
        v_layers, t_layers = self.encode(images, ids, text_mask)
        return self.fuse(v_layers, t_layers, text_mask, training, rng)

    def fuse(self, v_layers, t_layers, text_mask=None, training: bool = False,
             rng: Rng | None = None) -> ModelOutput:
        n = self.cfg.crossmodal.n_experts
        tw = self.tower
        v_top = [tw.proj_v(x) for x in v_layers[len(v_layers) - n:]]
        t_top = [tw.proj_t(x) for x in t_layers[len(t_layers) - n:]]
        vstack = top_n_stack(v_top, n, self.stack_embed, "vision")
        tstack = top_n_stack(t_top, n, self.stack_embed, "text", text_mask)
        state = CrossModalState([v_top[-1]], [t_top[-1]], v_mask=None,
                                t_mask=None if text_mask is None else np.asarray(text_mask, bool))
        state = tw(vstack, tstack, state, training, rng)
        return ModelOutput(state, v_layers, t_layers, vstack, tstack)
