"""Shared helpers: finite-difference oracles used across modules."""

import numpy as np


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar callable f w.r.t. x.

    x is perturbed in place entry by entry and restored, so f must read the
    live array (not a copy taken earlier).
    """
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Worst entrywise difference scaled by the larger array magnitude."""
    denom = max(np.abs(a).max(), np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / denom)
