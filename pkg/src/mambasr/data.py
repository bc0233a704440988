"""Synthetic phantoms, image-domain degradation and the MGRID file format."""
from __future__ import annotations

import csv
import enum
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, DimensionError, ParameterError
from .resample import linear_downsample

MAGIC = b"MGRID\0"
VERSION = 1
_HEADER = struct.Struct("<6sHII")


class GridFormatError(ValueError):
    """Base class for MGRID parse failures."""


class BadMagic(GridFormatError):
    pass


class UnsupportedVersion(GridFormatError):
    pass


class Truncated(GridFormatError):
    pass


class NonFinite(GridFormatError):
    pass


class MetadataError(GridFormatError):
    pass


class PhantomKind(enum.Enum):
    SHEPP_LOGAN_LIKE = "shepp_logan_like"
    BLOBS_AND_RIBBONS = "blobs_and_ribbons"


@dataclass
class ImageGrid:
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or 0 in self.values.shape:
            raise DimensionError(f"ImageGrid needs a non-empty 2D array, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ParameterError("ImageGrid values must be finite")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def id(self) -> str:
        return str(self.meta.get("id", ""))


@dataclass(frozen=True)
class DegradationSpec:
    factor_h: int = 4
    factor_w: int = 4
    interpolation: str = "linear"

    def __post_init__(self):
        for name in ("factor_h", "factor_w"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {v}")
        if self.interpolation != "linear":
            raise ConfigError(f"unsupported interpolation {self.interpolation!r}")


def normalize(values: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling to [0, 1]; constant images map to zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.zeros_like(values)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


# --------------------------------------------------------------------- phantoms

def _grid(h, w):
    # normalized coordinates in [-1, 1], pixel centres
    y = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    x = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    return np.meshgrid(y, x, indexing="ij")


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v


def _shepp_logan_like(gen, h, w, ribbon_width):
    yy, xx = _grid(h, w)
    img = np.zeros((h, w))
    head = _ellipse(yy, xx, 0.0, 0.0, 0.92, 0.72, 0.0)
    img += 0.8 * (head <= 1.0)
    img -= 0.4 * (_ellipse(yy, xx, -0.02, 0.0, 0.86, 0.66, 0.0) <= 1.0)
    # inner structures with jittered placement
    for _ in range(int(gen.integers(5, 9))):
        cy, cx = gen.uniform(-0.55, 0.55, size=2)
        ry, rx = gen.uniform(0.05, 0.25, size=2)
        img += gen.uniform(-0.2, 0.3) * (_ellipse(yy, xx, cy, cx, ry, rx, gen.uniform(0, np.pi)) <= 1.0)
    # thin rim just inside the skull
    px = ribbon_width / max(h, w) * 2.0
    rim = np.abs(np.sqrt(_ellipse(yy, xx, -0.02, 0.0, 0.86, 0.66, 0.0)) - 1.0) * 0.7 < px / 2
    img += 0.3 * rim
    return img


def _blobs_and_ribbons(gen, h, w, ribbon_width):
    yy, xx = _grid(h, w)
    # smooth background
    img = 0.2 + 0.1 * np.sin(np.pi * (gen.uniform(0.5, 1.5) * yy + gen.uniform(0.5, 1.5) * xx))
    for _ in range(int(gen.integers(3, 7))):
        cy, cx = gen.uniform(-0.7, 0.7, size=2)
        ry, rx = gen.uniform(0.08, 0.3, size=2)
        r2 = _ellipse(yy, xx, cy, cx, ry, rx, gen.uniform(0, np.pi))
        img += gen.uniform(0.2, 0.5) * np.exp(-2.0 * r2) * (r2 <= 1.5)
    # folded ribbons: level sets of a smooth wavy field, each ribbon_width pixels wide
    freq = gen.uniform(1.0, 2.5, size=4)
    phase = gen.uniform(0, 2 * np.pi, size=4)
    field_ = (yy + 0.25 * np.sin(freq[0] * np.pi * xx + phase[0])
              + 0.15 * np.sin(freq[1] * np.pi * yy + phase[1])) * np.cos(0.3 * freq[2]) \
        + (xx + 0.2 * np.sin(freq[3] * np.pi * yy + phase[2])) * np.sin(0.3 * freq[2])
    pixel = 2.0 / max(h, w)
    period = (5.0 * ribbon_width) * pixel
    offset = np.mod(field_ + phase[3], period)
    img += 0.35 * (offset < ribbon_width * pixel)
    return img


def make_phantom(kind, h: int, w: int, seed: int, ribbon_width: float = 2.0) -> ImageGrid:
    """Deterministic piecewise-smooth test image normalized to [0, 1]."""
    kind = PhantomKind(kind)
    if h < 16 or w < 16:
        raise DimensionError(f"phantom extent must be at least 16x16, got {h}x{w}")
    if not ribbon_width > 0:
        raise ParameterError(f"ribbon_width must be positive, got {ribbon_width}")
    gen = rngmod.derive(seed, "phantom", kind.value, h, w)
    if kind is PhantomKind.SHEPP_LOGAN_LIKE:
        img = _shepp_logan_like(gen, h, w, ribbon_width)
    else:
        img = _blobs_and_ribbons(gen, h, w, ribbon_width)
    return ImageGrid(normalize(img), {"id": f"{kind.value}-{seed}", "modality": "phantom", "seed": int(seed)})


# ------------------------------------------------------------------ degradation

def degrade(x: ImageGrid, spec: DegradationSpec) -> ImageGrid:
    """Linear-interpolation downsampling at the coarse pixel centres."""
    values = linear_downsample(x.values, spec.factor_h, spec.factor_w)
    meta = dict(x.meta, factor_h=spec.factor_h, factor_w=spec.factor_w)
    return ImageGrid(values, meta)


# -------------------------------------------------------------------- file I/O

def encode_grid(x: ImageGrid) -> bytes:
    with np.errstate(over="ignore"):
        values = np.asarray(x.values, dtype="<f4")
    if not np.all(np.isfinite(values)):
        raise NonFinite("grid values do not fit float32")
    out = [_HEADER.pack(MAGIC, VERSION, x.height, x.width), values.tobytes(order="C")]
    if x.meta:
        blob = json.dumps(x.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out += [struct.pack("<I", len(blob)), blob]
    return b"".join(out)


def decode_grid(data: bytes) -> ImageGrid:
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise BadMagic("bad magic: not an MGRID file")
    if len(data) < _HEADER.size:
        raise Truncated(f"truncated header: {len(data)} of {_HEADER.size} bytes")
    _, version, h, w = _HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported MGRID version {version}")
    if h == 0 or w == 0:
        raise Truncated(f"empty grid extent {h}x{w}")
    end = _HEADER.size + 4 * h * w
    if len(data) < end:
        raise Truncated(f"truncated payload: expected {4 * h * w} bytes, found {len(data) - _HEADER.size}")
    values = np.frombuffer(data, dtype="<f4", count=h * w, offset=_HEADER.size).reshape(h, w)
    if not np.all(np.isfinite(values)):
        raise NonFinite("payload holds non-finite values")
    meta = {}
    rest = data[end:]
    if rest:
        if len(rest) < 4:
            raise Truncated("truncated metadata length")
        (n,) = struct.unpack_from("<I", rest)
        if len(rest) - 4 != n:
            raise Truncated(f"metadata block declares {n} bytes, found {len(rest) - 4}")
        try:
            meta = json.loads(rest[4:].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MetadataError(f"metadata is not UTF-8 JSON: {exc}") from None
        if not isinstance(meta, dict):
            raise MetadataError("metadata must be a JSON object")
    return ImageGrid(values.astype(np.float64), meta)


def write_grid(path, x: ImageGrid) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_grid(x))


def read_grid(path) -> ImageGrid:
    with open(path, "rb") as fh:
        return decode_grid(fh.read())


# ---------------------------------------------------------------------- dataset

@dataclass
class Pair:
    lr: ImageGrid
    hr: ImageGrid
    seed: int
    split: str


def make_dataset(n_train: int, n_test: int, spec: DegradationSpec, seed: int, size: int = 64,
                 kind=PhantomKind.BLOBS_AND_RIBBONS) -> tuple[list[Pair], list[Pair]]:
    """Paired (LR, HR) train and test sets; phantom seeds never repeat across splits.

    HR values are quantized through float32 so they equal what the grid file
    stores.
    """
    if n_train < 1 or n_test < 1:
        raise ParameterError(f"need at least one train and one test pair, got {n_train}, {n_test}")
    if size % spec.factor_h or size % spec.factor_w:
        raise DimensionError(f"HR size {size} not divisible by factors {spec.factor_h}x{spec.factor_w}")
    gen = rngmod.derive(seed, "dataset")
    seeds = gen.choice(2**31, size=n_train + n_test, replace=False)
    out = []
    for i, s in enumerate(seeds):
        split = "train" if i < n_train else "test"
        hr = make_phantom(kind, size, size, int(s))
        hr = ImageGrid(hr.values.astype(np.float32).astype(np.float64), dict(hr.meta, split=split))
        out.append(Pair(degrade(hr, spec), hr, int(s), split))
    return out[:n_train], out[n_train:]


def save_dataset(root, train: list[Pair], test: list[Pair], spec: DegradationSpec) -> str:
    """Write every pair as two grid files plus ``manifest.csv``; returns the manifest path."""
    os.makedirs(root, exist_ok=True)
    rows = ["id,hr_path,lr_path,factor,seed"]
    for i, pair in enumerate(train + test):
        name = f"{pair.split}_{i:04d}"
        hr_path, lr_path = f"{name}_hr.mgrid", f"{name}_lr.mgrid"
        write_grid(os.path.join(root, hr_path), pair.hr)
        write_grid(os.path.join(root, lr_path), pair.lr)
        rows.append(f"{name},{hr_path},{lr_path},{spec.factor_h}x{spec.factor_w},{pair.seed}")
    manifest = os.path.join(root, "manifest.csv")
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")
    return manifest


def load_dataset(root) -> tuple[list[Pair], list[Pair]]:
    manifest = os.path.join(root, "manifest.csv")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no manifest.csv in {root}")
    train, test = [], []
    with open(manifest, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            split = row["id"].split("_", 1)[0]
            pair = Pair(read_grid(os.path.join(root, row["lr_path"])),
                        read_grid(os.path.join(root, row["hr_path"])), int(row["seed"]), split)
            (train if split == "train" else test).append(pair)
    return train, test
