"""Separable resampling with explicit weight matrices.

Both resamplers use the pixel-centre (align-corners-false) convention: output
index ``i`` of a resize by factor ``f`` maps to input coordinate
``(i + 0.5) * f - 0.5`` for downsampling, and ``(i + 0.5) / k - 0.5`` for
upsampling by ``k``.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import ConfigError, DimensionError

CUBIC_A = -0.5


def _cubic(t: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror indices into [0, n) without repeating the edge sample."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


@lru_cache(maxsize=64)
def cubic_upsample_matrix(n_in: int, k: int) -> np.ndarray:
    """[n_in * k, n_in] Catmull-Rom (a = -0.5) interpolation weights."""
    n_out = n_in * k
    src = (np.arange(n_out) + 0.5) / k - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for offset in (-1, 0, 1, 2):
        np.add.at(mat, (rows, reflect_index(base + offset, n_in)), _cubic(frac - offset))
    mat.setflags(write=False)
    return mat


def bicubic_upsample(x: np.ndarray, k: int) -> np.ndarray:
    """Upsample the trailing two axes of ``x`` by the integer factor ``k``."""
    if int(k) != k or k < 1:
        raise ConfigError(f"scale factor must be an integer >= 1, got {k}")
    k = int(k)
    x = np.asarray(x, dtype=np.float64)
    if k == 1:
        return x.copy()
    rows = cubic_upsample_matrix(x.shape[-2], k)
    cols = cubic_upsample_matrix(x.shape[-1], k)
    return np.matmul(np.matmul(rows, x), cols.T)


@lru_cache(maxsize=64)
def linear_downsample_matrix(n_in: int, factor: int) -> np.ndarray:
    """[n_in // factor, n_in] linear interpolation weights at the coarse grid centres."""
    n_out = n_in // factor
    src = (np.arange(n_out) + 0.5) * factor - 0.5
    lo = np.floor(src).astype(int)
    frac = src - lo
    hi = np.minimum(lo + 1, n_in - 1)
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    mat.setflags(write=False)
    return mat


def linear_downsample(x: np.ndarray, factor_h: int, factor_w: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    if h % factor_h or w % factor_w:
        raise DimensionError(f"factors {factor_h}x{factor_w} do not divide extent {h}x{w}")
    return np.matmul(np.matmul(linear_downsample_matrix(h, factor_h), x),
                     linear_downsample_matrix(w, factor_w).T)
