"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np


def numeric_grad(f: Callable[[], float], x: np.ndarray, index, h: float = 1e-5) -> float:
    """d f / d x[index] by central differences; ``x`` is perturbed in place and restored."""
    old = x[index]
    x[index] = old + h
    plus = f()
    x[index] = old - h
    minus = f()
    x[index] = old
    return (plus - minus) / (2 * h)


def relative_error(analytic, numeric) -> float:
    """``max|a - n| / max(max|a|, max|n|)`` over the checked entries (0 if both vanish)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def check(f, x, analytic, rng, samples=None, h=1e-5) -> float:
    """Relative error between ``analytic`` (same shape as ``x``) and finite differences.

    ``samples`` limits the check to that many random entries of ``x``.
    """
    if samples is None or samples >= x.size:
        flat = np.arange(x.size)
    else:
        flat = rng.choice(x.size, size=samples, replace=False)
    idx = [np.unravel_index(i, x.shape) for i in flat]
    num = [numeric_grad(f, x, i, h) for i in idx]
    ana = [analytic[i] for i in idx]
    return relative_error(ana, num)
