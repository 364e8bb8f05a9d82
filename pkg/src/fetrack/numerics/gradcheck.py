"""Central finite-difference oracles for the analytic backward passes."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from fetrack.numerics.tensor import GradTape, Tensor


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def numerical_grad(f: Callable[[], float], arrays: Sequence[np.ndarray], eps: float = 1e-5) -> list:
    """Central differences of scalar ``f`` w.r.t. each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                    floor: float = 1e-8) -> dict:
    """Compare tape gradients of scalar ``fn()`` with finite differences.

    Returns ``{param_name_or_index: rel_error}``. Run in float64.
    """
    with GradTape() as tape:
        out = fn()
    analytic = tape.gradient(out, list(params))

    def f():
        return float(fn().data)

    numeric = numerical_grad(f, [p.data for p in params], eps=eps)
    return {(p.name or str(i)): rel_error(a, n, floor)
            for i, (p, a, n) in enumerate(zip(params, analytic, numeric))}
