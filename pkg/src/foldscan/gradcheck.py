"""Central finite differences and error metrics."""

from __future__ import annotations

from typing import Callable

import numpy as np


def rel_error(a, b, atol: float = 0.0) -> float:
    """max|a - b| / max(max|a|, max|b|, atol); 0 when both vanish.

    ``atol`` keeps gradients that are (near) zero from dividing noise by noise.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), atol)
    diff = np.abs(a - b).max(initial=0.0)
    return float(diff / scale) if scale > 0 else float(diff)


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (x left unchanged)."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def unit_direction(rng: np.random.Generator, params: dict) -> dict:
    """Random direction over a dict of arrays with unit total 2-norm."""
    v = {k: rng.standard_normal(np.shape(a)) for k, a in params.items()}
    norm = np.sqrt(sum(float((x * x).sum()) for x in v.values()))
    return {k: x / norm for k, x in v.items()}


def directional_fd(f: Callable[[dict], float], params: dict, direction: dict,
                   eps: float = 1e-5) -> float:
    """(f(p + eps*v) - f(p - eps*v)) / (2 eps) over a dict of arrays."""
    plus = {k: params[k] + eps * direction.get(k, 0.0) for k in params}
    minus = {k: params[k] - eps * direction.get(k, 0.0) for k in params}
    return (f(plus) - f(minus)) / (2 * eps)
