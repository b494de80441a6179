"""Central finite-difference gradient checks against reverse mode."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward

REL_FLOOR = 1e-6


def numeric_grad(fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-4) -> dict[str, np.ndarray]:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``params``.

    ``fn`` must rebuild its graph from the current parameter values and be
    deterministic (fixed noise seed) for the check to be meaningful.
    """
    out = {}
    for name, p in params.items():
        base = p.data.copy()
        g = np.zeros_like(base)
        flat = g.reshape(-1)
        for i in range(base.size):
            bumped = base.copy().reshape(-1)
            bumped[i] += h
            p.assign(bumped.reshape(base.shape))
            up = float(fn().data)
            bumped[i] -= 2 * h
            p.assign(bumped.reshape(base.shape))
            down = float(fn().data)
            flat[i] = (up - down) / (2 * h)
        p.assign(base)
        out[name] = g
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = REL_FLOOR) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def grad_check(fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-4) -> dict[str, float]:
    """Per-parameter relative error between reverse-mode and finite-difference gradients."""
    analytic = backward(fn(), params)
    numeric = numeric_grad(fn, params, h)
    return {k: relative_error(analytic[k], numeric[k]) for k in params}
