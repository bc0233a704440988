"""MambaFormer super-resolution network.

The low-resolution input is bicubic-upsampled to the target grid; the network
predicts a residual on top of it::

    x_up = bicubic(x_lr, k)
    f0   = conv3x3(x_up)                      # 1 -> C channels
    f    = stages(f0)                         # 4 stages, residual per stage
    x_hr = x_up + conv3x3(f0 + f)             # C -> 1 channel, zero-initialized

Each block is ``z + MHSSM(LN(z))`` followed by ``z + ChannelMLP(LN(z))``.
Parameters live in a flat, ordered ``dict[str, Tensor]``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .errors import ConfigError, DimensionError
from .resample import bicubic_upsample
from .ssm import MhssmConfig, init_mhssm_params, mhssm_forward
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    dim: int = 30
    stage_repeats: tuple[int, ...] = (4, 6, 6, 7)
    heads: int = 6
    state_dim: int = 16
    mlp_expand: int = 2
    scale: int = 4
    gating: bool = True
    delta_hidden: int | None = None
    scan_method: str = "auto"
    seed: int = 0
    upsample_mode: str = field(default="pre", compare=True)

    def __post_init__(self):
        object.__setattr__(self, "stage_repeats", tuple(int(r) for r in self.stage_repeats))
        if len(self.stage_repeats) != 4 or any(r < 1 for r in self.stage_repeats):
            raise ConfigError(f"stage_repeats must be four positive counts, got {self.stage_repeats}")
        if self.scale < 1 or int(self.scale) != self.scale:
            raise ConfigError(f"scale must be an integer >= 1, got {self.scale}")
        if (self.mlp_expand * self.dim) % 2:
            raise ConfigError(f"mlp_expand * dim must be even, got {self.mlp_expand * self.dim}")
        if self.in_channels != 1:
            raise ConfigError("only single-channel images are supported")
        if self.upsample_mode != "pre":
            raise ConfigError(f"unsupported upsample mode {self.upsample_mode!r}")
        self.mhssm  # validates head/width divisibility

    @property
    def mhssm(self) -> MhssmConfig:
        return MhssmConfig(model_dim=self.dim, num_heads=self.heads, state_dim=self.state_dim,
                           gating=self.gating, delta_hidden=self.delta_hidden,
                           scan_method=self.scan_method)

    @property
    def num_blocks(self) -> int:
        return sum(self.stage_repeats)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_repeats"] = list(self.stage_repeats)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Width chosen so the parameter count lands near 0.9 M."""
        return cls(**{"dim": 78, "heads": 6, "state_dim": 16, **overrides})


SHALLOW_STD = 0.1
BRANCH_GAIN = 1.0


def block_prefix(stage: int, block: int) -> str:
    return f"stages.{stage}.blocks.{block}."


def init_params(cfg: ModelConfig, zero_final: bool = True) -> dict[str, Tensor]:
    """Fresh trainable parameters; the final projection starts at zero."""
    gen = rngmod.derive(cfg.seed, "init")
    c, e = cfg.dim, cfg.mlp_expand * cfg.dim
    # residual branches start small so the trunk stays near the shallow
    # features; keeps the first optimizer steps on the output projection tame
    branch = SHALLOW_STD * BRANCH_GAIN / np.sqrt(2 * cfg.num_blocks)
    raw: dict[str, np.ndarray] = {"shallow.weight": gen.normal(0.0, SHALLOW_STD, size=(c, 1, 3, 3))}
    for s, repeats in enumerate(cfg.stage_repeats):
        for b in range(repeats):
            p = block_prefix(s, b)
            raw[p + "ln1.weight"] = np.ones(c)
            raw[p + "ln1.bias"] = np.zeros(c)
            raw.update(init_mhssm_params(cfg.mhssm, gen, p + "mhssm."))
            raw[p + "mhssm.out_proj.weight"] *= branch
            raw[p + "ln2.weight"] = np.ones(c)
            raw[p + "ln2.bias"] = np.zeros(c)
            raw[p + "mlp.w_in"] = gen.normal(0.0, 1.0 / np.sqrt(c), size=(e, c))
            raw[p + "mlp.w_out"] = gen.normal(0.0, branch / np.sqrt(e // 2), size=(c, e // 2))
    final = gen.normal(0.0, 1.0 / np.sqrt(9 * c), size=(1, c, 3, 3))
    raw["final.weight"] = np.zeros_like(final) if zero_final else final
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


def channel_mlp(x: Tensor, w_in: Tensor, w_out: Tensor) -> Tensor:
    """1x1 expansion, split into halves, multiply, 1x1 projection back."""
    if w_in.shape[0] % 2:
        raise ConfigError(f"channel_mlp: expanded width {w_in.shape[0]} is odd")
    if w_out.shape[1] != w_in.shape[0] // 2:
        raise DimensionError(f"channel_mlp: w_out {w_out.shape} does not take {w_in.shape[0] // 2} channels")
    x1, x2 = T.split(T.conv2d_pointwise(x, w_in), 2, axis=1)
    return T.conv2d_pointwise(x1 * x2, w_out)


def block_forward(z: Tensor, cfg: ModelConfig, params: dict, prefix: str) -> Tensor:
    p = params
    z3 = z + mhssm_forward(T.layer_norm(z, p[prefix + "ln1.weight"], p[prefix + "ln1.bias"]),
                           cfg.mhssm, p, prefix + "mhssm.")
    return z3 + channel_mlp(T.layer_norm(z3, p[prefix + "ln2.weight"], p[prefix + "ln2.bias"]),
                            p[prefix + "mlp.w_in"], p[prefix + "mlp.w_out"])


def model_forward(x_lr, cfg: ModelConfig, params: dict) -> Tensor:
    """[B, 1, h, w] in [0, 1] -> [B, 1, k*h, k*w]."""
    x_lr = np.asarray(x_lr.data if isinstance(x_lr, Tensor) else x_lr, dtype=np.float64)
    if x_lr.ndim != 4 or x_lr.shape[1] != cfg.in_channels:
        raise DimensionError(f"model_forward: expected [B, 1, h, w], got {x_lr.shape}")
    x_up = Tensor(bicubic_upsample(x_lr, cfg.scale))
    f0 = T.conv2d_3x3(x_up, params["shallow.weight"])
    f = f0
    for s, repeats in enumerate(cfg.stage_repeats):
        stage_in = f
        for b in range(repeats):
            f = block_forward(f, cfg, params, block_prefix(s, b))
        f = f + stage_in
    return x_up + T.conv2d_3x3(f0 + f, params["final.weight"])


# ------------------------------------------------------------------ accounting

def _block_param_count(cfg: ModelConfig) -> int:
    c, m, s = cfg.dim, cfg.heads, cfg.state_dim
    dh, r = c // m, cfg.mhssm.hidden
    head = s + s * dh + dh * s + dh + (r * dh + r) + (r + 1)
    mhssm = (2 if cfg.gating else 1) * c * c + 9 * c + c + m * head + 2 * c + c * c
    half = cfg.mlp_expand * c // 2
    return 2 * c + mhssm + 2 * c + 2 * half * c + c * half


def count_params(cfg: ModelConfig) -> int:
    """Trainable scalars; independent of input size."""
    return 9 * cfg.dim + cfg.num_blocks * _block_param_count(cfg) + 9 * cfg.dim


def estimate_flops(cfg: ModelConfig, h: int, w: int) -> int:
    """2 x multiply-accumulates for one forward pass on an ``h x w`` input.

    Counted: convolutions and channel maps, the bicubic pre-upsampling, the
    scan (B u, the two-term state update, C h, D u), the step-size MLP and the
    elementwise gating products. Normalizations and activations are free.
    """
    k, c, m, s = cfg.scale, cfg.dim, cfg.heads, cfg.state_dim
    hh, ww = k * h, k * w
    n = hh * ww
    dh, r = c // m, cfg.mhssm.hidden
    half = cfg.mlp_expand * c // 2
    macs = 4 * h * ww + 4 * hh * ww if k > 1 else 0
    macs += 9 * c * n  # shallow conv
    per_head = n * (s * dh + 2 * s + dh * s + dh + r * dh + r)
    mhssm = n * ((2 if cfg.gating else 1) * c * c + 9 * c) + m * per_head + n * c * c
    if cfg.gating:
        mhssm += n * c
    mlp = n * (2 * half * c + half + c * half)
    macs += cfg.num_blocks * (mhssm + mlp)
    macs += 9 * c * n  # final projection
    return 2 * macs


# ------------------------------------------------------------ attention mixer

def attention_baseline_forward(z: np.ndarray, wq: np.ndarray | None = None, wk: np.ndarray | None = None,
                               wv: np.ndarray | None = None) -> np.ndarray:
    """Single-head softmax self-attention over the sequence axis of [B, C, L].

    Projections default to the identity. Used as the quadratic reference in
    the complexity benchmark.
    """
    z = np.asarray(z)
    if z.ndim != 3 or z.shape[2] < 1:
        raise DimensionError(f"attention_baseline_forward: expected [B, C, L >= 1], got {z.shape}")
    c = z.shape[1]
    eye = np.eye(c, dtype=z.dtype)
    wq, wk, wv = (eye if w is None else np.asarray(w, dtype=z.dtype) for w in (wq, wk, wv))
    q = np.einsum("oc,bcl->blo", wq, z)
    kk = np.einsum("oc,bcl->bol", wk, z)
    v = np.einsum("oc,bcl->blo", wv, z)
    scores = np.matmul(q, kk) / np.sqrt(c)
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    return np.ascontiguousarray(np.matmul(weights, v).transpose(0, 2, 1))
