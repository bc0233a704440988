"""Multi-head selective state-space layer.

Each head runs the diagonal linear recurrence

    h_t = Abar_t * h_{t-1} + Phi_t * (B u_t),    y_t = C h_t + D * u_t

with ``A = -exp(a)``, zero-order-hold coefficients ``Abar_t = exp(delta_t A)``
and ``Phi_t = (exp(delta_t A) - 1) / A``, and a step size ``delta_t``
predicted from ``u_t`` by a small MLP followed by softplus. ``B``, ``C`` and
``D`` are fixed per head; only the step size is input dependent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _compiled
from . import tensor as T
from .errors import ConfigError, DimensionError, ParameterError
from .scan import HYBRID_ORDERS, ScanOrder, build_scan, deserialize_groups, serialize_groups
from .tensor import Tensor

DELTA_MIN = 1e-4
SERIES_CUTOFF = 1e-6


def discretize(a, delta) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold coefficients (Abar, Phi) for ``A = -exp(a)``.

    ``a`` and ``delta`` broadcast against each other. Where ``|delta*A|`` is
    below 1e-6 the two-term series ``delta*(1 + delta*A/2)`` replaces the
    closed form.
    """
    a = np.asarray(a, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(~(delta > 0)):
        raise ParameterError("discretize: step sizes must be strictly positive")
    A = -np.exp(a)
    dA = delta * A
    abar = np.exp(dA)
    return abar, _phi(dA, np.broadcast_to(delta, dA.shape), A)


def _phi(dA: np.ndarray, delta: np.ndarray, A: np.ndarray, em: np.ndarray | None = None) -> np.ndarray:
    # expm1(dA) / A, switching to delta * (1 + dA/2) where |dA| < SERIES_CUTOFF;
    # ``em`` may carry a precomputed expm1(dA)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (np.expm1(dA) if em is None else em) / A
    if dA.size and np.abs(dA).min() < SERIES_CUTOFF:
        small = np.abs(dA) < SERIES_CUTOFF
        out = np.where(small, delta * (1.0 + 0.5 * dA), out)
    return out


def _coefficients(dA: np.ndarray, delta: np.ndarray, A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    em = np.expm1(dA)
    phi = _phi(dA, delta, A, em)
    em += 1.0
    return em, phi


def phi_series(a, delta) -> np.ndarray:
    A = -np.exp(np.asarray(a, dtype=np.float64))
    delta = np.asarray(delta, dtype=np.float64)
    return delta * (1.0 + 0.5 * delta * A)


def phi_exact(a, delta) -> np.ndarray:
    A = -np.exp(np.asarray(a, dtype=np.float64))
    return np.expm1(np.asarray(delta, dtype=np.float64) * A) / A


# ----------------------------------------------------------- linear recurrence

def _recurrence_sequential(coeff: np.ndarray, x: np.ndarray) -> np.ndarray:
    # time on axis 0
    out = np.empty_like(x)
    h = np.zeros(x.shape[1:], dtype=x.dtype)
    for t in range(x.shape[0]):
        h = coeff[t] * h + x[t]
        out[t] = h
    return out


def _tree_scan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Blelloch up-sweep / down-sweep over pairs (a, b) composed as
    # (a1, b1) then (a2, b2) = (a2 a1, a2 b1 + b2), along axis 0. Modifies a
    # and b in place; axis 0 must be a power of two. Returns inclusive
    # prefixes of b.
    n, lead = a.shape[0], a.shape[1:]
    s = 2
    while s <= n:
        h = s // 2
        av = a.reshape((n // s, s) + lead)
        bv = b.reshape((n // s, s) + lead)
        bv[:, s - 1] += av[:, s - 1] * bv[:, h - 1]
        av[:, s - 1] *= av[:, h - 1]
        s *= 2
    s = n // 2
    while s >= 2:
        h = s // 2
        av = a.reshape((n // s, s) + lead)
        bv = b.reshape((n // s, s) + lead)
        bv[1:, h - 1] += av[1:, h - 1] * bv[:-1, s - 1]
        s //= 2
    return b


def _recurrence_parallel(coeff: np.ndarray, x: np.ndarray, chunk: int = 32) -> np.ndarray:
    # Chunk-local prefixes (vectorized across chunks), a tree scan over the
    # chunk totals, then one pass applying each chunk's incoming carry.
    # Time on axis 0 so every sweep step works on contiguous rows.
    length, lead = x.shape[0], x.shape[1:]
    chunk = max(1, min(chunk, length))
    n_chunks = 1 << max(-(-length // chunk) - 1, 0).bit_length()
    padded = n_chunks * chunk
    a = np.ones((padded,) + lead, dtype=x.dtype)
    b = np.zeros((padded,) + lead, dtype=x.dtype)
    a[:length] = coeff
    b[:length] = x
    a = a.reshape((n_chunks, chunk) + lead)
    b = b.reshape((n_chunks, chunk) + lead)
    for k in range(1, chunk):
        b[:, k] += a[:, k] * b[:, k - 1]
        a[:, k] *= a[:, k - 1]
    carry = _tree_scan(a[:, -1].copy(), b[:, -1].copy())
    b[1:] += a[1:] * carry[:-1, None]
    return b.reshape((padded,) + lead)[:length]


SCAN_METHODS = ("sequential", "parallel", "compiled", "auto")


def resolve_method(method: str) -> str:
    """Map ``auto`` to ``compiled`` when numba is importable, else ``parallel``."""
    if method not in SCAN_METHODS:
        raise ParameterError(f"unknown scan method {method!r}; expected one of {SCAN_METHODS}")
    if method == "auto":
        return "compiled" if _compiled.AVAILABLE else "parallel"
    if method == "compiled" and not _compiled.AVAILABLE:
        raise ParameterError("scan method 'compiled' needs numba")
    return method


def _recurrence_time_major(coeff: np.ndarray, x: np.ndarray, method: str) -> np.ndarray:
    if method == "sequential":
        return _recurrence_sequential(coeff, x)
    if method == "parallel":
        return _recurrence_parallel(coeff, x)
    raise ParameterError(f"unknown scan method {method!r}")


def linear_recurrence(coeff: np.ndarray, x: np.ndarray, method: str = "parallel") -> np.ndarray:
    """h_t = coeff_t * h_{t-1} + x_t along the last axis, h_{-1} = 0."""
    coeff, x = np.asarray(coeff, dtype=np.float64), np.asarray(x, dtype=np.float64)
    if coeff.shape != x.shape:
        raise DimensionError(f"linear_recurrence: coefficients {coeff.shape} vs inputs {x.shape}")
    if x.ndim == 0:
        raise DimensionError("linear_recurrence: need at least one axis")
    method = resolve_method(method)
    if method == "compiled":
        return _compiled.recurrence_rows(coeff, x)
    out = _recurrence_time_major(np.moveaxis(coeff, -1, 0), np.moveaxis(x, -1, 0), method)
    return np.moveaxis(out, 0, -1)


# ------------------------------------------------------------- head parameters

@dataclass
class SsmHeadParams:
    """Selective-scan parameters for one head, or for ``m`` heads stacked on a
    leading axis (``a`` of shape [m, S] etc.)."""

    a: Tensor         # [S]
    B: Tensor         # [S, Cin]
    C: Tensor         # [Cin, S]
    D: Tensor         # [Cin]
    delta_w1: Tensor  # [R, Cin]
    delta_b1: Tensor  # [R]
    delta_w2: Tensor  # [S or 1, R]
    delta_b2: Tensor  # [S or 1]

    @property
    def stacked(self) -> bool:
        return self.a.ndim == 2

    @property
    def state_dim(self) -> int:
        return self.a.shape[-1]

    @property
    def channels(self) -> int:
        return self.D.shape[-1]

    @classmethod
    def from_dict(cls, params: dict, prefix: str) -> "SsmHeadParams":
        return cls(**{f: params[prefix + key] for f, key in _HEAD_KEYS.items()})

    @classmethod
    def from_arrays(cls, arrays: dict, requires_grad: bool = False) -> "SsmHeadParams":
        return cls(**{f: Tensor(arrays[key], requires_grad=requires_grad) for f, key in _HEAD_KEYS.items()})

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f) for f in _HEAD_KEYS]


_HEAD_KEYS = {"a": "a", "B": "B", "C": "C", "D": "D",
              "delta_w1": "delta.w1", "delta_b1": "delta.b1",
              "delta_w2": "delta.w2", "delta_b2": "delta.b2"}


def init_head_params(rng: np.random.Generator, channels: int, state_dim: int,
                     hidden: int, delta_per_state: bool = False) -> dict[str, np.ndarray]:
    sd = state_dim if delta_per_state else 1
    # initial step sizes log-uniform in [1e-3, 1e-1]
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=sd)) - DELTA_MIN
    return {
        "a": np.log(rng.uniform(0.5, 8.0, size=state_dim)),
        "B": rng.normal(0.0, 1.0 / np.sqrt(state_dim), size=(state_dim, channels)),
        "C": rng.normal(0.0, 1.0 / np.sqrt(state_dim), size=(channels, state_dim)),
        "D": np.ones(channels),
        "delta.w1": rng.normal(0.0, 1.0 / np.sqrt(channels), size=(hidden, channels)),
        "delta.b1": np.zeros(hidden),
        "delta.w2": rng.normal(0.0, 0.1 / np.sqrt(hidden), size=(sd, hidden)),
        "delta.b2": dt + np.log(-np.expm1(-dt)),  # softplus^-1(dt)
    }


def predict_delta(u: Tensor, p: SsmHeadParams, delta_min: float = DELTA_MIN) -> Tensor:
    """Positive per-step sizes from a SiLU MLP over channels followed by softplus.

    Single head: u [B, Cin, L] -> [B, S or 1, L]. Stacked: [B, m, Cin, L] -> [B, m, S or 1, L].
    """
    linear = T.grouped_linear if p.stacked else T.pointwise_conv
    hidden = T.silu(linear(u, p.delta_w1, p.delta_b1))
    return T.softplus(linear(hidden, p.delta_w2, p.delta_b2)) + delta_min


# ---------------------------------------------------------------- scan kernel

def _time_major(x: np.ndarray) -> np.ndarray:
    # [B, m, k, L] -> contiguous [L, B, m, k]
    return np.ascontiguousarray(x.transpose(3, 0, 1, 2))


def _batch_major(x: np.ndarray) -> np.ndarray:
    # [L, B, m, k] -> contiguous [B, m, k, L]
    return np.ascontiguousarray(x.transpose(1, 2, 3, 0))


def _scan_heads_compiled(u: Tensor, delta: Tensor, a: Tensor, Bm: Tensor, Cm: Tensor,
                         D: Tensor) -> Tensor:
    # Batch-major twin of _scan_heads with the serial loops in numba.
    ud = u.data
    A = -np.exp(a.data)[None, :, :, None]
    dA = delta.data * A
    dfull = np.broadcast_to(delta.data, dA.shape)
    abar, phi = _coefficients(dA, dfull, A)
    bu = np.matmul(Bm.data[None], ud)
    h = _compiled.recurrence_rows(abar, phi * bu)
    y = np.matmul(Cm.data[None], h) + D.data[None, :, :, None] * ud

    def backward(g):
        gh = np.matmul(Cm.data.transpose(0, 2, 1)[None], g)
        g_bu, g_delta, g_a = _compiled.scan_backward(abar, phi, bu, h, gh, A[..., 0], dfull)
        if delta.shape[2] == 1:
            g_delta = g_delta.sum(axis=2, keepdims=True)
        g_u = D.data[None, :, :, None] * g + np.matmul(Bm.data.transpose(0, 2, 1)[None], g_bu)
        g_B = np.matmul(g_bu, ud.transpose(0, 1, 3, 2)).sum(axis=0)
        g_C = np.matmul(g, h.transpose(0, 1, 3, 2)).sum(axis=0)
        g_D = (g * ud).sum(axis=(0, 3))
        return g_u, g_delta, g_a.sum(axis=0), g_B, g_C, g_D

    return T.record(y, (u, delta, a, Bm, Cm, D), backward)


def _scan_heads(u: Tensor, delta: Tensor, a: Tensor, Bm: Tensor, Cm: Tensor, D: Tensor,
                method: str) -> Tensor:
    method = resolve_method(method)
    if method == "compiled":
        return _scan_heads_compiled(u, delta, a, Bm, Cm, D)
    # u [B, m, c, L], delta [B, m, S|1, L], a [m, S], B [m, S, c], C [m, c, S], D [m, c].
    # State-sized arrays are kept time-major: [L, B, m, S].
    ud = u.data
    A = -np.exp(a.data)
    d_t = _time_major(delta.data)
    dA = d_t * A
    abar, phi = _coefficients(dA, np.broadcast_to(d_t, dA.shape), A)
    bu_t = _time_major(np.matmul(Bm.data[None], ud))
    h_t = _recurrence_time_major(abar, phi * bu_t, method)
    h = _batch_major(h_t)
    y = np.matmul(Cm.data[None], h) + D.data[None, :, :, None] * ud

    def backward(g):
        gh_t = _time_major(np.matmul(Cm.data.transpose(0, 2, 1)[None], g))
        # adjoint: G_t = gh_t + Abar_{t+1} G_{t+1}
        shifted = np.empty_like(abar)
        shifted[:-1] = abar[1:]
        shifted[-1] = 0.0
        G = _recurrence_time_major(shifted[::-1], gh_t[::-1], method)[::-1]
        h_prev = np.empty_like(h_t)
        h_prev[0] = 0.0
        h_prev[1:] = h_t[:-1]
        g_abar = G * h_prev
        g_phi = G * bu_t
        g_bu = _batch_major(G * phi)
        g_u = D.data[None, :, :, None] * g + np.matmul(Bm.data.transpose(0, 2, 1)[None], g_bu)
        g_delta = (g_abar * A + g_phi) * abar
        if delta.shape[2] == 1:
            g_delta = g_delta.sum(axis=3, keepdims=True)
        g_a = (g_abar * abar * dA + g_phi * (d_t * abar - phi)).sum(axis=(0, 1))
        g_B = np.matmul(g_bu, ud.transpose(0, 1, 3, 2)).sum(axis=0)
        g_C = np.matmul(g, h.transpose(0, 1, 3, 2)).sum(axis=0)
        g_D = (g * ud).sum(axis=(0, 3))
        return g_u, _batch_major(g_delta), g_a, g_B, g_C, g_D

    return T.record(y, (u, delta, a, Bm, Cm, D), backward)


def selective_scan(u, delta, p: SsmHeadParams, method: str = "parallel") -> Tensor:
    """Run the recurrence for given step sizes.

    Single head: ``u`` [B, Cin, L], ``delta`` [B, S or 1, L]. Stacked heads add
    a head axis after the batch axis. The gradient evaluates the adjoint
    recurrence backwards in time with the same strategy as the forward pass.
    """
    u, delta = T.as_tensor(u), T.as_tensor(delta)
    S, cin = p.B.shape[-2:]
    lead = 2 if p.stacked else 1
    m = p.a.shape[0] if p.stacked else 1
    if u.ndim != lead + 2 or u.shape[-2] != cin or (p.stacked and u.shape[1] != m):
        raise DimensionError(f"selective_scan: input {u.shape} for B of shape {p.B.shape}")
    expected = {"C": (cin, S), "D": (cin,), "a": (S,)}
    for name, shape in expected.items():
        if getattr(p, name).shape[lead - 1:] != shape:
            raise DimensionError(f"selective_scan: {name} has shape {getattr(p, name).shape}")
    if delta.ndim != u.ndim or delta.shape[-2] not in (1, S) or \
            delta.shape[:-2] != u.shape[:-2] or delta.shape[-1] != u.shape[-1]:
        raise DimensionError(f"selective_scan: step sizes {delta.shape} for input {u.shape}")
    if p.stacked:
        return _scan_heads(u, delta, p.a, p.B, p.C, p.D, method)
    b, _, length = u.shape
    y = _scan_heads(T.reshape(u, (b, 1, cin, length)), T.reshape(delta, (b, 1) + delta.shape[1:]),
                    T.reshape(p.a, (1, S)), T.reshape(p.B, (1, S, cin)),
                    T.reshape(p.C, (1, cin, S)), T.reshape(p.D, (1, cin)), method)
    return T.reshape(y, (b, cin, length))


def scan_sequential(u, p: SsmHeadParams, delta: Tensor | None = None) -> Tensor:
    """Left-to-right evaluation; ``delta`` defaults to ``predict_delta(u, p)``."""
    u = T.as_tensor(u)
    return selective_scan(u, predict_delta(u, p) if delta is None else delta, p, "sequential")


def scan_parallel(u, p: SsmHeadParams, delta: Tensor | None = None) -> Tensor:
    """Associative-scan evaluation; same contract as ``scan_sequential``."""
    u = T.as_tensor(u)
    return selective_scan(u, predict_delta(u, p) if delta is None else delta, p, "parallel")


# ----------------------------------------------------------- multi-head layer

@dataclass(frozen=True)
class MhssmConfig:
    model_dim: int
    num_heads: int
    state_dim: int = 16
    gating: bool = True
    delta_hidden: int | None = None
    delta_per_state: bool = False
    scan_method: str = "auto"
    orders: tuple | None = None  # (kind, direction) per head; default round-robin

    def __post_init__(self):
        if self.num_heads < 1 or self.model_dim < 1 or self.state_dim < 1:
            raise ConfigError("model_dim, num_heads and state_dim must be positive")
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by {self.num_heads} heads")
        if self.scan_method not in SCAN_METHODS:
            raise ConfigError(f"unknown scan method {self.scan_method!r}; expected one of {SCAN_METHODS}")
        if self.orders is not None and len(self.orders) != self.num_heads:
            raise ConfigError("orders must list one (kind, direction) per head")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def hidden(self) -> int:
        return self.delta_hidden if self.delta_hidden is not None else max(4, self.head_dim)

    def order(self, head: int, height: int, width: int) -> ScanOrder:
        kind, direction = (self.orders[head] if self.orders is not None
                           else HYBRID_ORDERS[head % len(HYBRID_ORDERS)])
        return build_scan(kind, direction, height, width)


def init_mhssm_params(cfg: MhssmConfig, rng: np.random.Generator, prefix: str = "") -> dict[str, np.ndarray]:
    c = cfg.model_dim
    out = {
        prefix + "in_proj.weight": rng.normal(0.0, 1.0 / np.sqrt(c), size=((2 if cfg.gating else 1) * c, c)),
        prefix + "dwconv.weight": rng.normal(0.0, 1.0 / 3.0, size=(c, 3, 3)),
        prefix + "dwconv.bias": np.zeros(c),
    }
    heads = [init_head_params(rng, cfg.head_dim, cfg.state_dim, cfg.hidden, cfg.delta_per_state)
             for _ in range(cfg.num_heads)]
    for key in _HEAD_KEYS.values():
        out[prefix + key] = np.stack([h[key] for h in heads])
    out[prefix + "norm.weight"] = np.ones(c)
    out[prefix + "norm.bias"] = np.zeros(c)
    out[prefix + "out_proj.weight"] = rng.normal(0.0, 1.0 / np.sqrt(c), size=(c, c))
    return out


def mhssm_forward(z, cfg: MhssmConfig, params: dict, prefix: str = "") -> Tensor:
    """[B, C, H, W] -> [B, C, H, W].

    Projection, depthwise 3x3 conv and SiLU; channel group ``i`` is serialized
    with head ``i``'s scan order and scanned, then mapped back to the grid.
    Heads are concatenated, layer-normalized, optionally SiLU-gated and
    projected.
    """
    z = T.as_tensor(z)
    if z.ndim != 4 or z.shape[1] != cfg.model_dim:
        raise DimensionError(f"mhssm_forward: input {z.shape} for model_dim {cfg.model_dim}")
    height, width = z.shape[2:]
    proj = T.conv2d_pointwise(z, params[prefix + "in_proj.weight"])
    if cfg.gating:
        x, gate = T.split(proj, 2, axis=1)
    else:
        x = proj
    x = T.silu(T.conv2d_depthwise3x3(x, params[prefix + "dwconv.weight"], params[prefix + "dwconv.bias"]))
    orders = [cfg.order(i, height, width) for i in range(cfg.num_heads)]
    heads = SsmHeadParams.from_dict(params, prefix)
    u = serialize_groups(x, orders)
    y = selective_scan(u, predict_delta(u, heads), heads, cfg.scan_method)
    y = T.layer_norm(deserialize_groups(y, orders), params[prefix + "norm.weight"], params[prefix + "norm.bias"])
    if cfg.gating:
        y = y * T.silu(gate)
    return T.conv2d_pointwise(y, params[prefix + "out_proj.weight"])
