"""Central finite-difference checks for hand-written backward passes."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``x``, perturbing in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    for _ in it:
        i = it.multi_index
        orig = x[i].copy()
        x[i] = orig + eps
        fp = f()
        x[i] = orig - eps
        fm = f()
        x[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def grad_check(
    forward: Callable[..., np.ndarray],
    backward: Callable[..., Mapping[str, np.ndarray]],
    inputs: dict[str, np.ndarray],
    eps: float = 1e-4,
    seed: int = 0,
) -> dict[str, float]:
    """Compare a layer's analytic gradients against finite differences.

    ``forward(**inputs)`` returns the layer output. ``backward(dout, **inputs)``
    returns a mapping from input name to gradient. The scalar probed is
    ``sum(r * forward(...))`` for a fixed random ``r``, which exercises every
    output. The layer must be deterministic (dropout off).

    Returns the max relative error for each input name; the arrays in
    ``inputs`` should be float64 for the check to be meaningful.
    """
    rng = np.random.default_rng(seed)
    out = np.asarray(forward(**inputs))
    r = rng.standard_normal(out.shape)

    def loss() -> float:
        return float(np.sum(r * forward(**inputs)))

    analytic = backward(r, **inputs)
    return {
        name: relative_error(analytic[name], numeric_gradient(loss, inputs[name], eps))
        for name in analytic
    }


def max_relative_error(errors: Mapping[str, float]) -> float:
    return max(errors.values()) if errors else 0.0
