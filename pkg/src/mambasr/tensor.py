"""Dense tensors with dynamic reverse-mode differentiation.

A ``Tensor`` wraps a numpy array. When any operand of an operation requires
gradients (and recording is enabled for the current thread), the result keeps
references to its parents and a closure mapping the output gradient to parent
gradients. ``Tensor.backward`` walks that graph in reverse topological order.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes or a scalar operand; convolutions take a per-channel bias.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, ParameterError, UsageError

_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on this thread inside the block."""
    previous = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("loss does not depend on any tensor that requires grad")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as an op result, attaching ``backward`` if any parent is tracked.

    ``backward(g)`` must return one gradient (or None) per parent, in order.
    """
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.size == 1 and t.data.ndim <= 1


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return record(a.data + b.data, (a, b),
                  lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return record(a.data - b.data, (a, b),
                  lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    return record(a.data * b.data, (a, b),
                  lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return record(y, (x,), lambda g: (g * y,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    # sign(0) = 0 is the subgradient convention
    return record(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows; absolute error stays at rounding level
    return 0.5 + 0.5 * np.tanh(0.5 * v)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record(x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


def softplus_array(v: np.ndarray) -> np.ndarray:
    """log(1 + e^v); returns v itself above 30 where the correction is below 1e-13."""
    v = np.asarray(v)
    if v.dtype.kind != "f":
        v = v.astype(np.float64)
    return np.where(v > 30.0, v, np.log1p(np.exp(np.minimum(v, 30.0))))


def softplus(x: Tensor) -> Tensor:
    return record(softplus_array(x.data), (x,), lambda g: (g * _sigmoid(x.data),))


# ------------------------------------------------------------------ reductions

def sum_all(x: Tensor) -> Tensor:
    return record(np.asarray(x.data.sum()), (x,),
                  lambda g: (np.full(x.shape, g.reshape(()), dtype=x.data.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return record(np.asarray(x.data.mean()), (x,),
                  lambda g: (np.full(x.shape, g.reshape(()) / n, dtype=x.data.dtype),))


# --------------------------------------------------------------- shape changes

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def split(x: Tensor, sections, axis: int = 1) -> list[Tensor]:
    """Split along ``axis`` into ``sections`` equal parts or at explicit sizes."""
    extent = x.shape[axis]
    if isinstance(sections, int):
        if extent % sections:
            raise DimensionError(f"split: extent {extent} not divisible by {sections}")
        sizes = [extent // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != extent:
            raise DimensionError(f"split: sizes {sizes} do not sum to extent {extent}")
    bounds = np.cumsum([0] + sizes)
    pieces = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        index = [slice(None)] * x.ndim
        index[axis] = slice(int(lo), int(hi))
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        pieces.append(record(x.data[index], (x,), backward))
    return pieces


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def permute_last(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x[..., index]`` where ``index`` is a permutation of the last axis."""
    index = np.asarray(index)
    if index.shape != (x.shape[-1],):
        raise DimensionError(f"permute_last: index of length {index.size} for axis of {x.shape[-1]}")

    def backward(g):
        out = np.empty_like(g)
        out[..., index] = g
        return (out,)

    return record(x.data[..., index], (x,), backward)


def _gather_rows(x: np.ndarray, index: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    for g in range(index.shape[0]):
        np.take(x[:, g], index[g], axis=-1, out=out[:, g])
    return out


def gather_last(x: Tensor, index: np.ndarray) -> Tensor:
    """Per-row permutation of the last axis.

    ``index`` has shape [G, L] and acts on ``x`` of shape [B, G, C, L]: row
    ``g`` of every batch item is reordered by ``index[g]``, which must be a
    permutation.
    """
    index = np.asarray(index, dtype=np.intp)
    if x.ndim != 4 or index.shape != (x.shape[1], x.shape[3]):
        raise DimensionError(f"gather_last: index {index.shape} for input {x.shape}")
    inverse = np.empty_like(index)
    np.put_along_axis(inverse, index, np.broadcast_to(np.arange(index.shape[1]), index.shape), axis=1)
    if not np.array_equal(np.take_along_axis(inverse, index, axis=1),
                          np.broadcast_to(np.arange(index.shape[1]), index.shape)):
        raise DimensionError("gather_last: index rows must be permutations")
    return record(_gather_rows(x.data, index), (x,), lambda g: (_gather_rows(g, inverse),))


# -------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def pointwise_conv(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-position channel map for ``x`` of shape [B, C, *spatial]."""
    if w.ndim != 2 or x.ndim < 2 or w.shape[1] != x.shape[1]:
        raise DimensionError(f"pointwise_conv: weight {w.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise DimensionError(f"pointwise_conv: bias {bias.shape} for {w.shape[0]} outputs")
    bsz, spatial = x.shape[0], x.shape[2:]
    xr = x.data.reshape(bsz, x.shape[1], -1)
    y = np.matmul(w.data, xr)
    if bias is not None:
        y += bias.data[None, :, None]

    def backward(g):
        gr = g.reshape(bsz, w.shape[0], -1)
        gx = np.matmul(w.data.T, gr).reshape(x.shape)
        gw = np.matmul(gr, xr.transpose(0, 2, 1)).sum(axis=0)
        gb = gr.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return record(y.reshape((bsz, w.shape[0]) + spatial), parents, backward)


def grouped_linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Independent channel maps per group: [B, G, Cin, L] x [G, Cout, Cin] -> [B, G, Cout, L]."""
    if x.ndim != 4 or w.ndim != 3 or w.shape[0] != x.shape[1] or w.shape[2] != x.shape[2]:
        raise DimensionError(f"grouped_linear: weight {w.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != w.shape[:2]:
        raise DimensionError(f"grouped_linear: bias {bias.shape} for weight {w.shape}")
    y = np.matmul(w.data[None], x.data)
    if bias is not None:
        y += bias.data[None, :, :, None]

    def backward(g):
        gx = np.matmul(w.data.transpose(0, 2, 1)[None], g)
        gw = np.matmul(g, x.data.transpose(0, 1, 3, 2)).sum(axis=0)
        gb = g.sum(axis=(0, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return record(y, parents, backward)


def conv2d_pointwise(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution of a [B, C, H, W] map."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d_pointwise: expected [B, C, H, W], got {x.shape}")
    return pointwise_conv(x, w, bias)


def conv2d_depthwise3x3(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 3x3 convolution, zero padding 1, stride 1."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d_depthwise3x3: expected [B, C, H, W], got {x.shape}")
    _, c, h, wd = x.shape
    if w.shape != (c, 3, 3):
        raise DimensionError(f"conv2d_depthwise3x3: kernel {w.shape}, expected {(c, 3, 3)}")
    if bias is not None and bias.shape != (c,):
        raise DimensionError(f"conv2d_depthwise3x3: bias {bias.shape} for {c} channels")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    y = np.zeros_like(x.data)
    for i in range(3):
        for j in range(3):
            y += w.data[None, :, i, j, None, None] * xp[:, :, i:i + h, j:j + wd]
    if bias is not None:
        y += bias.data[None, :, None, None]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i:i + h, j:j + wd] += w.data[None, :, i, j, None, None] * g
                gw[:, i, j] = np.einsum("bchw,bchw->c", g, xp[:, :, i:i + h, j:j + wd])
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gxp[:, :, 1:-1, 1:-1], gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return record(y, parents, backward)


def conv2d_3x3(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Full 3x3 convolution [B, C, H, W] -> [B, C', H', W'] with zero padding 1."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d_3x3: expected [B, C, H, W], got {x.shape}")
    bsz, c, h, wd = x.shape
    if w.ndim != 4 or w.shape[1:] != (c, 3, 3):
        raise DimensionError(f"conv2d_3x3: kernel {w.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise DimensionError(f"conv2d_3x3: bias {bias.shape} for {w.shape[0]} outputs")
    if stride < 1:
        raise ParameterError(f"conv2d_3x3: stride must be >= 1, got {stride}")
    s = stride
    ho, wo = (h - 1) // s + 1, (wd - 1) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))

    def window(i, j):
        return xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]

    y = np.zeros((bsz, w.shape[0], ho, wo), dtype=x.data.dtype)
    for i in range(3):
        for j in range(3):
            y += np.moveaxis(np.tensordot(w.data[:, :, i, j], window(i, j), axes=(1, 1)), 0, 1)
    if bias is not None:
        y += bias.data[None, :, None, None]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += np.moveaxis(
                    np.tensordot(w.data[:, :, i, j], g, axes=(0, 1)), 0, 1)
                gw[:, :, i, j] = np.tensordot(g, window(i, j), axes=((0, 2, 3), (0, 2, 3)))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gxp[:, :, 1:h + 1, 1:wd + 1], gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return record(y, parents, backward)


# --------------------------------------------------------------- normalization

def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-6, axis: int = 1) -> Tensor:
    """Normalize over ``axis`` (channels for [B, C, ...] maps), then scale and shift.

    ``weight`` and ``bias`` have the extent of ``axis``; omit them for the bare
    standardized output.
    """
    if not eps > 0:
        raise ParameterError(f"layer_norm: eps must be positive, got {eps}")
    axis = axis % x.ndim
    n = x.shape[axis]
    for p in (weight, bias):
        if p is not None and p.shape != (n,):
            raise DimensionError(f"layer_norm: parameter {p.shape} for normalized extent {n}")
    expand = tuple(slice(None) if d == axis else None for d in range(x.ndim))
    others = tuple(d for d in range(x.ndim) if d != axis)
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=axis, keepdims=True) + eps)
    xhat = centered * rstd
    y = xhat
    if weight is not None:
        y = y * weight.data[expand]
    if bias is not None:
        y = y + bias.data[expand]

    def backward(g):
        gxhat = g * weight.data[expand] if weight is not None else g
        gx = rstd * (gxhat - gxhat.mean(axis=axis, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True))
        gw = (g * xhat).sum(axis=others) if weight is not None else None
        gb = g.sum(axis=others) if bias is not None else None
        return gx, gw, gb

    parents = [x]
    if weight is not None or bias is not None:
        parents += [weight if weight is not None else Tensor(np.ones(n)),
                    bias if bias is not None else Tensor(np.zeros(n))]
    return record(np.ascontiguousarray(y), parents, lambda g: backward(g)[:len(parents)])


def normalize_channels(x: Tensor, eps: float = 1e-10, axis: int = 1) -> Tensor:
    """Scale each position's channel vector to unit length: x / sqrt(|x|^2 + eps)."""
    r = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    y = x.data / r

    def backward(g):
        return (g / r - x.data * (g * x.data).sum(axis=axis, keepdims=True) / r ** 3,)

    return record(y, (x,), backward)
