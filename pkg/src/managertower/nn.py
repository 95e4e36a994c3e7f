"""Parameter containers and the transformer building blocks."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor, trunc_normal

INIT_STD = 0.02


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Walks its attributes to enumerate parameters in definition order.

    A parameter is any attribute Tensor with ``requires_grad``; sub-modules
    and lists of sub-modules are traversed recursively. A tensor reachable
    under several names (tied weights) is reported once, under the first.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _walk(self, prefix: str):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value._walk(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != p.shape:
                raise ValueError(f"{name}: shape {src.shape} != {p.shape}")
            p.data[...] = src


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, std: float = INIT_STD):
        self.weight = param(trunc_normal(rng, (d_in, d_out), std))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, shape, eps: float = 1e-5, affine: bool = True):
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        self.eps = eps
        self.gain = param(np.ones(shape)) if affine else None
        self.bias = param(np.zeros(shape)) if affine else None

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


def key_mask_bias(key_mask: np.ndarray | None) -> np.ndarray | None:
    """Additive score bias [..., 1, 1, Lk]: 0 for valid keys, -1e9 for padding."""
    if key_mask is None:
        return None
    m = np.asarray(key_mask, dtype=bool)
    return np.where(m, 0.0, -1e9)[..., None, None, :]


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, d = x.shape
    return T.swapaxes(T.reshape(x, (*lead, length, heads, d // heads)), -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    x = T.swapaxes(x, -2, -3)
    *lead, length, heads, dh = x.shape
    return T.reshape(x, (*lead, length, heads * dh))


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int, key_mask=None) -> Tensor:
    """Scaled dot-product attention over [..., L, D] inputs split into heads."""
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = T.matmul(qh, kh.T) * (1.0 / math.sqrt(q.shape[-1] // heads))
    bias = key_mask_bias(key_mask)
    if bias is not None:
        scores = scores + bias
    return merge_heads(T.matmul(T.softmax(scores, axis=-1), vh))


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: Rng, value_proj: bool = True, out_proj: bool = True):
        if d % heads:
            raise ValueError(f"hidden size {d} not divisible by {heads} heads")
        self.heads = heads
        self.query = Linear(d, d, rng.child("q"))
        self.key = Linear(d, d, rng.child("k"))
        self.value = Linear(d, d, rng.child("v")) if value_proj else None
        self.output = Linear(d, d, rng.child("o")) if out_proj else None

    def __call__(self, x, context, key_mask=None) -> Tensor:
        v = self.value(context) if self.value is not None else T.as_tensor(context)
        out = attend(self.query(x), self.key(context), v, self.heads, key_mask)
        return self.output(out) if self.output is not None else out


class FeedForward(Module):
    def __init__(self, d: int, mult: int, rng: Rng):
        self.inner = Linear(d, d * mult, rng.child("in"))
        self.outer = Linear(d * mult, d, rng.child("out"))

    def __call__(self, x) -> Tensor:
        return self.outer(T.gelu(self.inner(x)))


class EncoderLayer(Module):
    """Self-attention + FFN block with residuals; post-norm unless ``prenorm``."""

    def __init__(self, d: int, heads: int, ffn_mult: int, rng: Rng, prenorm: bool = False):
        self.prenorm = prenorm
        self.attn = MultiHeadAttention(d, heads, rng.child("attn"))
        self.ln_attn = LayerNorm(d)
        self.ffn = FeedForward(d, ffn_mult, rng.child("ffn"))
        self.ln_ffn = LayerNorm(d)

    def __call__(self, x, key_mask=None) -> Tensor:
        if self.prenorm:
            h = self.ln_attn(x)
            x = x + self.attn(h, h, key_mask)
            return x + self.ffn(self.ln_ffn(x))
        x = self.ln_attn(x + self.attn(x, x, key_mask))
        return self.ln_ffn(x + self.ffn(x))
