"""Training losses and full-reference image quality metrics.

Metrics work on 2D arrays (or [..., H, W] batches where noted) with values
in [0, data_range]. The perceptual proxy is a fixed random conv network, not
a learned metric; its report column is ``lpips_proxy`` for that reason.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .errors import ConfigError, DimensionError, ParameterError
from .tensor import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
GMSD_C = 170.0 / 255.0 ** 2
PREWITT_X = np.array([[1.0, 0.0, -1.0]] * 3) / 3.0
PREWITT_Y = PREWITT_X.T.copy()


# ---------------------------------------------------------------------- losses

@dataclass(frozen=True)
class RandomFeature:
    seed: int = 0
    layers: int = 3
    base_channels: int = 8

    def __post_init__(self):
        if self.layers < 1 or self.base_channels < 1:
            raise ConfigError("RandomFeature needs at least one layer and one channel")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 4.0
    perceptual: RandomFeature | None = field(default_factory=RandomFeature)

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError(f"loss lambda must be >= 0, got {self.lam}")


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def l1_loss(pred, target) -> Tensor:
    """Mean absolute difference; subgradient sign(0) = 0."""
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    _same_shape(pred, target, "l1_loss")
    return T.mean_all(T.abs(pred - target))


@lru_cache(maxsize=16)
def _feature_weights(seed: int, layers: int, base: int) -> tuple[np.ndarray, ...]:
    out, cin = [], 1
    for i in range(layers):
        cout = base * 2 ** i
        gen = rngmod.derive(seed, "perceptual", i)
        w = gen.normal(0.0, np.sqrt(2.0 / (9 * cin)), size=(cout, cin, 3, 3))
        w.setflags(write=False)
        out.append(w)
        cin = cout
    return tuple(out)


def random_features(x, cfg: RandomFeature) -> list[Tensor]:
    """Unit-normalized feature maps of a fixed strided conv + SiLU stack on [B, 1, H, W]."""
    h = T.as_tensor(x) * 2.0 - 1.0
    feats = []
    for w in _feature_weights(cfg.seed, cfg.layers, cfg.base_channels):
        h = T.silu(T.conv2d_3x3(h, Tensor(w), stride=2))
        feats.append(T.normalize_channels(h))
    return feats


def perceptual_random_feature(pred, target, seed: int = 0, layers: int = 3, base_channels: int = 8) -> Tensor:
    """Sum over stages of the mean squared difference of normalized features."""
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    _same_shape(pred, target, "perceptual_random_feature")
    if pred.ndim == 2:
        pred = T.reshape(pred, (1, 1) + pred.shape)
        target = T.reshape(target, (1, 1) + target.shape)
    cfg = RandomFeature(seed, layers, base_channels)
    total = None
    for fp, ft in zip(random_features(pred, cfg), random_features(target, cfg)):
        diff = fp - ft
        term = T.mean_all(diff * diff)
        total = term if total is None else total + term
    return total


def composite_loss(pred, target, cfg: LossConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (total, l1, perceptual) with total = lam * l1 + perceptual."""
    l1 = l1_loss(pred, target)
    if cfg.perceptual is None:
        perc = Tensor(np.zeros(()))
    else:
        pc = cfg.perceptual
        perc = perceptual_random_feature(pred, target, pc.seed, pc.layers, pc.base_channels)
    return l1 * cfg.lam + perc, l1, perc


# --------------------------------------------------------------------- metrics

def _pair(pred, target, op):
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"{op}: shapes {pred.shape} and {target.shape} differ")
    return pred, target


def psnr(pred, target, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` flags identical images."""
    if not data_range > 0:
        raise ParameterError(f"psnr: data_range must be positive, got {data_range}")
    pred, target = _pair(pred, target, "psnr")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1D Gaussian taps; the 2D window is their outer product."""
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_same(img: np.ndarray, taps_r: np.ndarray, taps_c: np.ndarray) -> np.ndarray:
    # separable correlation with reflect padding; output has the input's extent
    pr, pc = len(taps_r) // 2, len(taps_c) // 2
    p = np.pad(img, ((pr, pr), (pc, pc)), mode="reflect")
    h, w = img.shape
    rows = sum(taps_r[i] * p[i:i + h, :] for i in range(len(taps_r)))
    return sum(taps_c[j] * rows[:, j:j + w] for j in range(len(taps_c)))


def ssim_map(pred, target, data_range: float = 1.0) -> np.ndarray:
    pred, target = _pair(pred, target, "ssim")
    if pred.ndim != 2 or min(pred.shape) < SSIM_WINDOW:
        raise DimensionError(f"ssim: need a 2D image of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {pred.shape}")
    if not data_range > 0:
        raise ParameterError(f"ssim: data_range must be positive, got {data_range}")
    g = gaussian_window()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mx, my = _filter_same(pred, g, g), _filter_same(target, g, g)
    sxx = _filter_same(pred * pred, g, g) - mx * mx
    syy = _filter_same(target * target, g, g) - my * my
    sxy = _filter_same(pred * target, g, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(pred, target, data_range: float = 1.0) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), reflect-padded borders."""
    return float(np.mean(ssim_map(pred, target, data_range)))


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    p = np.pad(img, 1, mode="reflect") if min(img.shape) > 1 else np.pad(img, 1, mode="edge")
    h, w = img.shape
    gx = sum(PREWITT_X[i, j] * p[i:i + h, j:j + w] for i in range(3) for j in range(3))
    gy = sum(PREWITT_Y[i, j] * p[i:i + h, j:j + w] for i in range(3) for j in range(3))
    return np.sqrt(gx * gx + gy * gy)


def gmsd(pred, target, c: float = GMSD_C) -> float:
    """Population SD of the gradient-magnitude-similarity map (Prewitt, full resolution)."""
    pred, target = _pair(pred, target, "gmsd")
    if pred.ndim != 2:
        raise DimensionError(f"gmsd: expected a 2D image, got {pred.shape}")
    m1, m2 = gradient_magnitude(pred), gradient_magnitude(target)
    gms = (2.0 * m1 * m2 + c) / (m1 * m1 + m2 * m2 + c)
    return float(np.std(gms))


def lpips_proxy(pred, target, cfg: RandomFeature | None = None) -> float:
    cfg = cfg or RandomFeature()
    pred, target = _pair(pred, target, "lpips_proxy")
    with T.no_grad():
        return float(perceptual_random_feature(pred, target, cfg.seed, cfg.layers, cfg.base_channels).data)


# ---------------------------------------------------------------------- report

METRICS = ("psnr_db", "ssim", "gmsd", "lpips_proxy")


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, image_id: str, method: str, pred, target, data_range: float = 1.0,
            proxy: RandomFeature | None = None) -> dict:
        row = {"image_id": image_id, "method": method,
               "psnr_db": psnr(pred, target, data_range),
               "ssim": ssim(pred, target, data_range),
               "gmsd": gmsd(pred, target),
               "lpips_proxy": lpips_proxy(pred, target, proxy)}
        self.rows.append(row)
        return row

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def values(self, method: str, metric: str) -> np.ndarray:
        return np.array([r[metric] for r in self.rows if r["method"] == method], dtype=np.float64)

    def aggregate(self) -> list[dict]:
        """Mean and sample SD (ddof 1; 0 for a single image) per method and metric."""
        out = []
        for method in self.methods():
            for metric in METRICS:
                v = self.values(method, metric)
                sd = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
                out.append({"method": method, "metric": metric, "mean": float(np.mean(v)), "sd": sd})
        return out

    def write_csv(self, path) -> None:
        _write_rows(path, ["image_id", "method", *METRICS], self.rows)

    def write_summary_csv(self, path) -> None:
        _write_rows(path, ["method", "metric", "mean", "sd"], self.aggregate())

    @classmethod
    def read_csv(cls, path) -> "MetricReport":
        with open(path, encoding="utf-8", newline="") as fh:
            rows = [dict(r) for r in csv.DictReader(fh)]
        if rows and not set(METRICS) <= set(rows[0]):
            raise DimensionError(f"{path}: missing metric columns")
        for r in rows:
            for m in METRICS:
                r[m] = float(r[m])
        return cls(rows)


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "inf" if v == math.inf else repr(v)
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _write_rows(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in rows:
            writer.writerow([format_value(r[k]) for k in header])
