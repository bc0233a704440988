"""Optional numba kernels for the selective scan.

Arrays are batch-major ``[B, m, S, L]`` so each state channel is one
contiguous row walked serially. Importing this module never fails; check
``AVAILABLE`` before calling the kernels.
"""
from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

AVAILABLE = numba is not None


def _recurrence_rows(coeff, x, out):
    rows, length = x.shape
    for r in range(rows):
        acc = 0.0
        for t in range(length):
            acc = coeff[r, t] * acc + x[r, t]
            out[r, t] = acc


def _scan_backward_rows(abar, phi, bu, h, gh, A, dfull, g_bu, g_delta, g_a):
    # One row per (batch, head, state). G_t = gh_t + Abar_{t+1} G_{t+1};
    # writes the gradient wrt B u, accumulates per-row gradients wrt delta and a.
    rows, length = abar.shape
    for r in range(rows):
        acc = 0.0
        nxt = 0.0
        ga = 0.0
        ar = A[r]
        for t in range(length - 1, -1, -1):
            acc = gh[r, t] + nxt * acc
            nxt = abar[r, t]
            hp = h[r, t - 1] if t > 0 else 0.0
            g_abar = acc * hp
            g_phi = acc * bu[r, t]
            g_bu[r, t] = acc * phi[r, t]
            g_delta[r, t] = (g_abar * ar + g_phi) * nxt
            ga += g_abar * nxt * dfull[r, t] * ar + g_phi * (dfull[r, t] * nxt - phi[r, t])
        g_a[r] = ga


if AVAILABLE:
    _recurrence_rows = numba.njit(cache=True, nogil=True)(_recurrence_rows)
    _scan_backward_rows = numba.njit(cache=True, nogil=True)(_scan_backward_rows)


def recurrence_rows(coeff: np.ndarray, x: np.ndarray) -> np.ndarray:
    """h_t = coeff_t h_{t-1} + x_t along the last axis of C-contiguous arrays."""
    shape = x.shape
    c2 = np.ascontiguousarray(coeff).reshape(-1, shape[-1])
    x2 = np.ascontiguousarray(x).reshape(-1, shape[-1])
    out = np.empty_like(x2)
    _recurrence_rows(c2, x2, out)
    return out.reshape(shape)


def scan_backward(abar, phi, bu, h, gh, A, dfull):
    """Returns (g_bu, g_delta_full, g_a_rows) for the batch-major scan.

    ``A`` broadcasts against ``abar.shape[:-1]``; ``dfull`` against ``abar``.
    """
    shape = abar.shape
    flat = [np.ascontiguousarray(v).reshape(-1, shape[-1]) for v in (abar, phi, bu, h, gh)]
    a_rows = np.ascontiguousarray(np.broadcast_to(A, shape[:-1])).reshape(-1)
    d_rows = np.ascontiguousarray(np.broadcast_to(dfull, shape)).reshape(-1, shape[-1])
    g_bu = np.empty_like(flat[0])
    g_delta = np.empty_like(flat[0])
    g_a = np.empty(flat[0].shape[0])
    _scan_backward_rows(*flat, a_rows, d_rows, g_bu, g_delta, g_a)
    return g_bu.reshape(shape), g_delta.reshape(shape), g_a.reshape(shape[:-1])
