"""Central finite-difference gradient checking for the autodiff engine."""
from __future__ import annotations

import numpy as np

from mambasr.tensor import Tensor

STEP = 1e-5


def numeric_grad(fn, t: Tensor, step: float = STEP) -> np.ndarray:
    """d fn() / d t.data by central differences; ``fn`` returns a scalar Tensor."""
    out = np.zeros_like(t.data)
    it = np.nditer(t.data, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = t.data[i]
        t.data[i] = orig + step
        fp = float(fn().data)
        t.data[i] = orig - step
        fm = float(fn().data)
        t.data[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out


def max_violation(analytic: np.ndarray, numeric: np.ndarray, rel: float, abs_small: float = 1e-7) -> float:
    """Largest error ratio against the tolerance; <= 1 means pass.

    Where the analytic gradient is below 1e-6 the absolute error must stay
    under ``abs_small``; elsewhere the relative error under ``rel``.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    err = np.abs(analytic - numeric)
    small = np.abs(analytic) < 1e-6
    ratio = np.where(small, err / abs_small, err / (rel * np.maximum(np.abs(analytic), 1e-300)))
    return float(ratio.max()) if ratio.size else 0.0


def check(fn, tensors, rel: float = 1e-4) -> float:
    """Run backward once and compare every tensor's grad with finite differences.

    Returns the worst violation ratio across all tensors.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, max_violation(analytic, numeric_grad(fn, t), rel))
    return worst


def leaf(rng: np.random.Generator, *shape, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)
