"""Central finite-difference gradients for checking backward rules."""

from __future__ import annotations

import numpy as np


def numerical_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """d f() / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def rel_error(a, b, floor: float = 1e-8) -> float:
    """||a - b|| / max(||a||, ||b||, floor).

    The floor keeps a pair of (numerically) zero gradients, e.g. query
    weights of attention over a single row, from reading as a mismatch.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
