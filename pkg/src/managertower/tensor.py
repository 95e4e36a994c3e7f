"""Float64 tensors with reverse-mode automatic differentiation.

Every op takes and returns :class:`Tensor`; plain numbers and numpy arrays
are accepted wherever a tensor is, and are treated as constants. A graph is
only recorded when at least one input requires a gradient and grad mode is
on (see :func:`no_grad`).

Broadcasting follows numpy: trailing axes are aligned, missing leading axes
are treated as extent 1, and only extents of 1 stretch.
"""
from __future__ import annotations

import contextlib
import math
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

DTYPE = np.float64
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    # numpy defers to our reflected operators instead of building object arrays
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> Tensor:
        return swapaxes(self, -1, -2)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a} and {b} are not broadcastable") from None


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def elementwise(op: str, a, b) -> Tensor:
    """Dispatch ``add``/``sub``/``mul`` by name."""
    table = {"add": add, "sub": sub, "mul": mul}
    if op not in table:
        raise ContractError(f"unknown elementwise op {op!r}")
    return table[op](a, b)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw)


def activation(kind: str, x) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "tanh":
        return tanh(x)
    raise ContractError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if _broadcast_shape(a.shape, shape, "broadcast_to") != shape:
        raise DimensionError(f"broadcast_to: cannot expand {a.shape} to {shape}")
    src = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (unbroadcast(g, src),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]
    src = a.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def bw(g):
        full = np.zeros(src, dtype=DTYPE)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(np.array(out, dtype=DTYPE), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: incompatible shapes {[t.shape for t in ts]}") from None

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, bw)


# ---------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, p = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, p) if a.ndim > 2 else a.data.T @ g
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight (+ bias)`` with ``weight`` stored as [D_in, D_out]; ``x`` may be a vector."""
    x = as_tensor(x)
    if x.ndim == 1:
        out = reshape(matmul(reshape(x, (1, -1)), weight), (-1,))
    else:
        out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# ---------------------------------------------------------------- normalization

def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain``/``bias`` if given.

    ``gain`` and ``bias`` must broadcast against ``x``; a [D] vector is the
    usual case, [N, 1, D] gives each of N stacked inputs its own affine.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"layer_norm: empty normalization axis in shape {x.shape}")
    gain = as_tensor(gain) if gain is not None else None
    bias = as_tensor(bias) if bias is not None else None
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        _broadcast_shape(x.shape, gain.shape, "layer_norm gain")
        out = out * gain.data
    if bias is not None:
        _broadcast_shape(x.shape, bias.shape, "layer_norm bias")
        out = out + bias.data
    parents = [x] + [p for p in (gain, bias) if p is not None]

    def bw(g):
        dxhat = g * gain.data if gain is not None else g
        dx = None
        if x.requires_grad:
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            dx = unbroadcast(inv * (dxhat - m1 - xhat * m2), x.shape)
        grads = [dx]
        if gain is not None:
            grads.append(unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None)
        if bias is not None:
            grads.append(unbroadcast(g, bias.shape) if bias.requires_grad else None)
        return tuple(grads)

    return _make(out, parents, bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


def softmax_with_temperature(logits, log_temperature, axis: int = -1) -> Tensor:
    """``softmax(logits / exp(log_temperature))`` along ``axis``."""
    return softmax(div(logits, exp(log_temperature)), axis=axis)


# ---------------------------------------------------------------- lookups and losses

def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"embedding ids must be integers, got dtype {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab}): min {ids.min()}, max {ids.max()}")
    src = table.shape

    def bw(g):
        full = np.zeros(src, dtype=DTYPE)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), bw)


def cross_entropy_logits(logits, target) -> Tensor:
    """Mean negative log-likelihood of integer ``target`` under row-wise softmax."""
    logits = as_tensor(logits)
    target = np.asarray(target)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_logits expects [B, K] logits, got {logits.shape}")
    b, k = logits.shape
    if target.shape != (b,):
        raise DimensionError(f"target shape {target.shape} does not match batch {b}")
    if b and (target.min() < 0 or target.max() >= k):
        raise IndexError(f"target class out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    out = np.asarray(-logp[rows, target].mean(), dtype=DTYPE)

    def bw(g):
        grad = np.exp(logp)
        grad[rows, target] -= 1.0
        return (grad * (g / b),)

    return _make(out, (logits,), bw)


def bce_with_logits(logits, target) -> Tensor:
    """Mean binary cross-entropy over every element (multi-label heads)."""
    logits = as_tensor(logits)
    t = np.asarray(target, dtype=DTYPE)
    if t.shape != logits.shape:
        raise DimensionError(f"bce target shape {t.shape} != logits shape {logits.shape}")
    x = logits.data
    n = x.size
    out = np.asarray((np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).mean(), dtype=DTYPE)

    def bw(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return ((sig - t) * (g / n),)

    return _make(out, (logits,), bw)


# ---------------------------------------------------------------- backprop

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-5,
                     indices: Iterable[tuple] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at leaf ``x``.

    ``x.data`` is perturbed in place and restored. When ``indices`` is given
    only those entries are estimated and the rest are left as NaN.
    """
    base = x.data
    grad = np.full(base.shape, np.nan) if indices is not None else np.zeros(base.shape)
    idx_iter = indices if indices is not None else np.ndindex(*base.shape)
    with no_grad():
        for idx in idx_iter:
            orig = base[idx]
            base[idx] = orig + h
            fp = _scalar(f(x))
            base[idx] = orig - h
            fm = _scalar(f(x))
            base[idx] = orig
            grad[idx] = (fp - fm) / (2 * h)
    return grad


def directional_diff(f: Callable[[Tensor], object], x: Tensor, direction: np.ndarray,
                     h: float = 1e-5) -> float:
    """Central-difference estimate of ``<grad f(x), direction>``."""
    orig = x.data.copy()
    with no_grad():
        x.data[...] = orig + h * direction
        fp = _scalar(f(x))
        x.data[...] = orig - h * direction
        fm = _scalar(f(x))
        x.data[...] = orig
    return (fp - fm) / (2 * h)


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


# ---------------------------------------------------------------- randomness

def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    k = int(k)
    if k < 0:
        raise ContractError(f"rng keys must be non-negative, got {k}")
    return k


class Rng:
    """Seeded Philox stream with deterministic child streams.

    ``child(*keys)`` derives an independent stream from the seed and a key
    path, so draws never depend on the order other children were used in.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys) -> Rng:
        return Rng(self.seed, self.path + tuple(_key(k) for k in keys))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def get_state(self) -> dict:
        bg = self._gen.bit_generator.state
        return {"seed": self.seed, "path": list(self.path), "bit_generator": _jsonable(bg)}

    @classmethod
    def from_state(cls, state: dict) -> Rng:
        rng = cls(state["seed"], tuple(state["path"]))
        bg = rng._gen.bit_generator
        current = bg.state
        bg.state = _restore(state["bit_generator"], current)
        return rng


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _restore(saved, template):
    if isinstance(template, dict):
        return {k: _restore(saved[k], v) for k, v in template.items()}
    if isinstance(template, np.ndarray):
        return np.array(saved, dtype=template.dtype)
    return saved


def trunc_normal(rng: Rng, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within ``bound`` std."""
    out = rng.normal(0.0, 1.0, size=shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, 1.0, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std
