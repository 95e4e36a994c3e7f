"""Toy uni-modal encoders that expose every layer's output."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import EncoderLayer, Linear, Module, param
from .tensor import Rng, Tensor, trunc_normal

PAD, BOS, EOS, MASK = 0, 1, 2, 3
NUM_SPECIALS = 4
MODALITIES = ("vision", "text")


@dataclass
class EncoderConfig:
    depth: int = 6
    hidden: int = 32
    heads: int = 4
    ffn_mult: int = 4
    vocab: int = 32
    max_len: int = 12
    patch_dim: int = 16
    grid: int = 4
    prenorm: bool = False

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def vision_len(self) -> int:
        return self.num_patches + 1

    def validate(self, n_experts: int, path: str = "encoder") -> None:
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}", path)
        if self.depth < n_experts:
            raise ConfigError(f"depth {self.depth} < expert count {n_experts}", path + ".depth")
        if self.vocab <= NUM_SPECIALS:
            raise ConfigError("vocab must exceed the special-token count", path + ".vocab")


class TextEmbeddings(Module):
    def __init__(self, cfg: EncoderConfig, rng: Rng):
        self.word = param(trunc_normal(rng.child("word"), (cfg.vocab, cfg.hidden)))
        self.position = param(trunc_normal(rng.child("pos"), (cfg.max_len, cfg.hidden)))

    def __call__(self, ids) -> Tensor:
        return embed_text(ids, self)


def embed_text(ids, params: TextEmbeddings) -> Tensor:
    """Token embedding plus learned position embedding; ``ids`` is [..., L]."""
    ids = np.asarray(ids)
    length = ids.shape[-1]
    max_len = params.position.shape[0]
    if length > max_len:
        raise DimensionError(f"sequence length {length} exceeds max_len {max_len}")
    return T.embedding(params.word, ids) + params.position[:length]


class PatchEmbeddings(Module):
    def __init__(self, cfg: EncoderConfig, rng: Rng):
        self.proj = Linear(cfg.patch_dim, cfg.hidden, rng.child("proj"), bias=False)
        self.cls = param(trunc_normal(rng.child("cls"), (cfg.hidden,)))
        self.position = param(trunc_normal(rng.child("pos"), (cfg.vision_len, cfg.hidden)))

    def __call__(self, patches) -> Tensor:
        return embed_patches(patches, self)


def embed_patches(patches, params: PatchEmbeddings) -> Tensor:
    """Project [..., P, patch_dim] patches, prepend the class slot, add positions."""
    patches = T.as_tensor(patches)
    patch_dim = params.proj.weight.shape[0]
    if patches.shape[-1] != patch_dim:
        raise DimensionError(f"patch width {patches.shape[-1]} != configured patch_dim {patch_dim}")
    x = params.proj(patches)
    lead = x.shape[:-2]
    cls = T.broadcast_to(T.reshape(params.cls, (1, -1)), (*lead, 1, x.shape[-1]))
    x = T.concat([cls, x], axis=-2)
    length = x.shape[-2]
    if length > params.position.shape[0]:
        raise DimensionError(f"{length - 1} patches exceed the configured grid")
    return x + params.position[:length]


class UniModalEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: Rng):
        self.layers = [
            EncoderLayer(cfg.hidden, cfg.heads, cfg.ffn_mult, rng.child(i), cfg.prenorm)
            for i in range(cfg.depth)
        ]

    def __call__(self, x0, key_mask=None) -> list[Tensor]:
        return encode_layers(x0, self, key_mask)


def encode_layers(x0, params: UniModalEncoder, key_mask=None) -> list[Tensor]:
    """Run every layer and return all outputs, bottom to top."""
    outputs = []
    x = T.as_tensor(x0)
    for layer in params.layers:
        x = layer(x, key_mask)
        outputs.append(x)
    return outputs


@dataclass
class LayerStack:
    """Top-N layer outputs as [..., N, L, D]; expert i is encoder layer depth-N+i."""

    reps: Tensor
    modality: str
    mask: np.ndarray | None = None

    @property
    def n_experts(self) -> int:
        return self.reps.shape[-3]


class StackEmbeddings(Module):
    """Modality-type and layer-index embeddings shared by all managers."""

    def __init__(self, n_experts: int, hidden: int, rng: Rng):
        self.modality = param(trunc_normal(rng.child("type"), (len(MODALITIES), hidden)))
        self.layer_index = param(trunc_normal(rng.child("layer"), (n_experts, hidden)))


def top_n_stack(layer_outputs: list, n: int, embeddings: StackEmbeddings | None,
                modality: str, mask: np.ndarray | None = None) -> LayerStack:
    if n > len(layer_outputs):
        raise ConfigError(f"cannot take top {n} of {len(layer_outputs)} layers", "n_experts")
    if modality not in MODALITIES:
        raise ConfigError(f"unknown modality {modality!r}")
    reps = T.stack(layer_outputs[len(layer_outputs) - n:], axis=-3)
    if embeddings is not None:
        d = reps.shape[-1]
        type_vec = embeddings.modality[MODALITIES.index(modality)]
        reps = reps + type_vec + T.reshape(embeddings.layer_index[:n], (n, 1, d))
    return LayerStack(reps, modality, mask)
