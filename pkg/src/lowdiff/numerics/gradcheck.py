"""Finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import Tape, Tensor, backward


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (only ``coords`` if given)."""
    x = np.array(x, dtype=np.float64)
    g = np.full(x.shape, np.nan)
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return g


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-4,
    coords: Optional[list] = None,
) -> float:
    """Max over coordinates of ``|autodiff - central| / max(1, |central|)``.

    ``f`` maps a tensor to a scalar tensor.  Work is done in float64.
    """
    x = np.asarray(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True, name="x")
    with Tape() as tape:
        y = f(xt)
    auto = backward(tape, y).get("x", np.zeros_like(x))

    def scalar(v: np.ndarray) -> float:
        return f(Tensor(v.copy())).item()

    num = numerical_grad(scalar, x, h, coords)
    mask = ~np.isnan(num)
    err = np.abs(auto[mask] - num[mask]) / np.maximum(1.0, np.abs(num[mask]))
    return float(err.max()) if err.size else 0.0
