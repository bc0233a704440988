"""Serialization of 2D token grids into 1D sequences and back.

Three traversal kinds are supported, each in a forward and a reverse
direction:

* horizontal: row-major raster
* vertical: column-major raster
* diagonal: anti-diagonals ``row + col = d`` in increasing ``d``, each walked
  with increasing row (no zigzag alternation)

A ``ScanOrder`` stores ``perm`` with ``perm[t]`` = flat grid index visited at
step ``t``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Tensor, as_tensor, gather_last, permute_last, reshape


class ScanKind(enum.Enum):
    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"
    DIAGONAL = "diagonal"


class Direction(enum.Enum):
    FORWARD = "forward"
    REVERSE = "reverse"


@dataclass(frozen=True)
class ScanOrder:
    kind: ScanKind
    direction: Direction
    height: int
    width: int
    perm: np.ndarray = field(repr=False, compare=False)
    inverse: np.ndarray = field(repr=False, compare=False)

    @property
    def length(self) -> int:
        return self.height * self.width

    def positions(self) -> np.ndarray:
        """(row, col) of every sequence step, shape [L, 2]."""
        return np.stack(np.divmod(self.perm, self.width), axis=1)


# head i uses HYBRID_ORDERS[i % 6]
HYBRID_ORDERS: tuple[tuple[ScanKind, Direction], ...] = (
    (ScanKind.HORIZONTAL, Direction.FORWARD),
    (ScanKind.VERTICAL, Direction.FORWARD),
    (ScanKind.DIAGONAL, Direction.FORWARD),
    (ScanKind.HORIZONTAL, Direction.REVERSE),
    (ScanKind.VERTICAL, Direction.REVERSE),
    (ScanKind.DIAGONAL, Direction.REVERSE),
)


def _forward_perm(kind: ScanKind, height: int, width: int) -> np.ndarray:
    flat = np.arange(height * width)
    rows, cols = np.divmod(flat, width)
    if kind is ScanKind.HORIZONTAL:
        return flat
    if kind is ScanKind.VERTICAL:
        return np.lexsort((rows, cols))
    if kind is ScanKind.DIAGONAL:
        return np.lexsort((rows, rows + cols))
    raise ParameterError(f"unknown scan kind {kind!r}")


@lru_cache(maxsize=256)
def build_scan(kind: ScanKind, direction: Direction, height: int, width: int) -> ScanOrder:
    kind, direction = ScanKind(kind), Direction(direction)
    if height < 1 or width < 1:
        raise ParameterError(f"scan grid must be at least 1x1, got {height}x{width}")
    perm = _forward_perm(kind, height, width)
    if direction is Direction.REVERSE:
        perm = perm[::-1]
    perm = np.ascontiguousarray(perm, dtype=np.intp)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.size, dtype=np.intp)
    perm.setflags(write=False)
    inverse.setflags(write=False)
    return ScanOrder(kind, direction, int(height), int(width), perm, inverse)


def hybrid_order(head: int, height: int, width: int) -> ScanOrder:
    kind, direction = HYBRID_ORDERS[head % len(HYBRID_ORDERS)]
    return build_scan(kind, direction, height, width)


def serialize(x, order: ScanOrder) -> Tensor:
    """[B, C, H, W] -> [B, C, H*W] in scan order."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2:] != (order.height, order.width):
        raise DimensionError(f"serialize: input {x.shape} does not match a "
                             f"{order.height}x{order.width} scan")
    b, c = x.shape[:2]
    return permute_last(reshape(x, (b, c, order.length)), order.perm)


def deserialize(s, order: ScanOrder) -> Tensor:
    """[B, C, L] -> [B, C, H, W]; exact inverse of ``serialize``."""
    s = as_tensor(s)
    if s.ndim != 3 or s.shape[2] != order.length:
        raise DimensionError(f"deserialize: sequence {s.shape} does not match a "
                             f"{order.height}x{order.width} scan")
    b, c = s.shape[:2]
    return reshape(permute_last(s, order.inverse), (b, c, order.height, order.width))


def adjacency_violation_count(order: ScanOrder) -> int:
    """Consecutive sequence steps whose grid cells are not 8-neighbours."""
    pos = order.positions()
    step = np.abs(np.diff(pos, axis=0))
    return int(np.count_nonzero(step.max(axis=1) > 1)) if len(pos) > 1 else 0


def serialize_groups(x, orders) -> Tensor:
    """Split channels into ``len(orders)`` groups, each serialized by its own order.

    [B, C, H, W] -> [B, G, C/G, H*W].
    """
    x = as_tensor(x)
    g = len(orders)
    if x.ndim != 4 or x.shape[1] % g:
        raise DimensionError(f"serialize_groups: input {x.shape} for {g} groups")
    b, c, h, w = x.shape
    if any((o.height, o.width) != (h, w) for o in orders):
        raise DimensionError(f"serialize_groups: orders do not match a {h}x{w} grid")
    index = np.stack([o.perm for o in orders])
    return gather_last(reshape(x, (b, g, c // g, h * w)), index)


def deserialize_groups(s, orders) -> Tensor:
    """Inverse of ``serialize_groups``: [B, G, C/G, L] -> [B, C, H, W]."""
    s = as_tensor(s)
    g = len(orders)
    if s.ndim != 4 or s.shape[1] != g or any(o.length != s.shape[3] for o in orders):
        raise DimensionError(f"deserialize_groups: sequence {s.shape} for {g} orders")
    index = np.stack([o.inverse for o in orders])
    b, _, c, _ = s.shape
    return reshape(gather_last(s, index), (b, g * c, orders[0].height, orders[0].width))
