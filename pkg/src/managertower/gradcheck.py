"""Finite-difference sweep over every parameter of a model."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import Rng, Tensor

DEFAULT_FLOOR = 1e-6


def relative_error(analytic: float, numeric: float, floor: float = DEFAULT_FLOOR) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps true zeros from dividing by noise."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class ParamCheck:
    name: str
    size: int
    coords: int
    max_rel_error: float
    directional_rel_error: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, self.directional_rel_error)


@dataclass
class GradcheckReport:
    checks: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((c.worst for c in self.checks), default=0.0)

    def worst(self, k: int = 5) -> list[ParamCheck]:
        return sorted(self.checks, key=lambda c: -c.worst)[:k]

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def gradcheck_model(model: Module, loss_fn: Callable[[], Tensor], rng: Rng, h: float = 1e-5,
                    coords_per_tensor: int = 6, floor: float = DEFAULT_FLOOR,
                    full_below: int = 8) -> GradcheckReport:
    """Compare backprop against central differences for every parameter tensor.

    Each tensor gets one directional-derivative check along a random unit
    direction (covers every coordinate at once) plus per-coordinate checks:
    all coordinates when the tensor has at most ``full_below`` entries,
    otherwise ``coords_per_tensor`` sampled ones. ``loss_fn`` must be
    deterministic.
    """
    params = list(model.named_parameters())
    model.zero_grad()
    loss = loss_fn()
    T.backward(loss)
    grads = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
             for name, p in params}

    def f(_x):
        return loss_fn()

    report = GradcheckReport()
    for i, (name, p) in enumerate(params):
        r = rng.child("param", i)
        g = grads[name]
        if p.size <= full_below:
            flat = np.arange(p.size)
        else:
            flat = r.choice(p.size, size=min(coords_per_tensor, p.size), replace=False)
        idx = [np.unravel_index(int(j), p.shape) for j in flat]
        num = T.finite_diff_grad(f, p, h=h, indices=idx)
        worst = max((relative_error(float(g[k]), float(num[k]), floor) for k in idx), default=0.0)
        direction = r.normal(size=p.shape)
        direction /= np.linalg.norm(direction)
        d_num = T.directional_diff(f, p, direction, h)
        d_ana = float(np.sum(g * direction))
        report.checks.append(ParamCheck(name, p.size, len(idx), worst,
                                        relative_error(d_ana, d_num, floor)))
    model.zero_grad()
    return report


def perturb_parameters(model: Module, rng: Rng, std: float = 0.05) -> None:
    """Add Gaussian jitter to every parameter so no gradient sits at a symmetric point."""
    for i, (_, p) in enumerate(model.named_parameters()):
        p.data += rng.child("jitter", i).normal(0.0, std, size=p.shape)
