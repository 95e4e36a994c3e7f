from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from managertower import Rng
from managertower.encoders import LayerStack

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def make_stack(rng: Rng, n=6, length=4, d=8, modality="vision"):
    from managertower.tensor import Tensor
    return LayerStack(Tensor(rng.normal(size=(n, length, d)), requires_grad=True), modality)


def ln_np(x, eps=1e-5):
    """Straight-line layer norm over the last axis (two-pass mean/variance)."""
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


@pytest.fixture
def rng():
    return Rng(20240601)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split()[0])):
            terminalreporter.write_line(line)
