import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mambasr.errors import DimensionError, ParameterError
from mambasr.scan import (HYBRID_ORDERS, Direction, ScanKind, adjacency_violation_count, build_scan,
                          deserialize, deserialize_groups, hybrid_order, serialize, serialize_groups)
from mambasr.tensor import Tensor

ALL_ORDERS = [(k, d) for k in ScanKind for d in Direction]
H, V, D = ScanKind.HORIZONTAL, ScanKind.VERTICAL, ScanKind.DIAGONAL
F, R = Direction.FORWARD, Direction.REVERSE


def index_grid(h, w):
    return np.arange(h * w, dtype=float).reshape(1, 1, h, w)


def test_perm_examples():
    assert build_scan(H, F, 2, 2).perm.tolist() == [0, 1, 2, 3]
    assert build_scan(V, F, 2, 2).perm.tolist() == [0, 2, 1, 3]
    assert build_scan(D, F, 3, 3).perm.tolist() == [0, 1, 3, 2, 4, 6, 5, 7, 8]


def test_zero_extent_rejected():
    with pytest.raises(ParameterError):
        build_scan(H, F, 0, 3)
    with pytest.raises(ParameterError):
        build_scan(D, R, 2, 0)


@pytest.mark.parametrize("kind,direction", ALL_ORDERS)
def test_constant_image_constant_sequence(kind, direction):
    s = serialize(np.full((1, 2, 3, 4), 7.0), build_scan(kind, direction, 3, 4)).data
    assert np.all(s == 7.0)


def test_serialize_index_grid():
    assert serialize(index_grid(3, 4), build_scan(H, F, 3, 4)).data[0, 0].tolist() == list(range(12))
    assert serialize(index_grid(3, 3), build_scan(D, F, 3, 3)).data[0, 0].tolist() == [0, 1, 3, 2, 4, 6, 5, 7, 8]


def test_serialize_definition(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    for kind, direction in ALL_ORDERS:
        o = build_scan(kind, direction, 4, 5)
        s = serialize(x, o).data
        for t, p in enumerate(o.perm):
            np.testing.assert_array_equal(s[:, :, t], x[:, :, p // 5, p % 5])


@pytest.mark.parametrize("kind,direction", ALL_ORDERS)
def test_round_trip(rng, kind, direction):
    x = rng.normal(size=(1, 1, 4, 5))
    o = build_scan(kind, direction, 4, 5)
    assert np.array_equal(deserialize(serialize(x, o), o).data, x)


def test_deserialize_vertical_example():
    out = deserialize(np.array([[[0.0, 1.0, 2.0, 3.0]]]), build_scan(V, F, 2, 2)).data
    assert out[0, 0].tolist() == [[0.0, 2.0], [1.0, 3.0]]


def test_shape_errors():
    o = build_scan(H, F, 2, 3)
    with pytest.raises(DimensionError):
        serialize(np.zeros((1, 1, 3, 2)), o)
    with pytest.raises(DimensionError):
        deserialize(np.zeros((1, 1, 5)), o)


def test_violation_examples():
    # raster wraps: one per row boundary, and a wrap is a jump when W >= 3
    assert adjacency_violation_count(build_scan(H, F, 5, 7)) == 4
    assert adjacency_violation_count(build_scan(H, F, 1, 9)) == 0
    # 3x3 anti-diagonals: only the 1->2 and 3->4 diagonal boundaries jump by two columns
    assert adjacency_violation_count(build_scan(D, F, 3, 3)) == 2


def test_violations_reverse_equal_forward():
    for kind in ScanKind:
        assert (adjacency_violation_count(build_scan(kind, F, 6, 5))
                == adjacency_violation_count(build_scan(kind, R, 6, 5)))


def test_hybrid_round_robin():
    assert [(o.kind, o.direction) for o in (hybrid_order(i, 3, 3) for i in range(12))] == list(HYBRID_ORDERS) * 2
    assert HYBRID_ORDERS[:3] == ((H, F), (V, F), (D, F))
    assert HYBRID_ORDERS[3:] == ((H, R), (V, R), (D, R))


def test_grouped_round_trip_and_gradient(rng):
    orders = [hybrid_order(i, 3, 4) for i in range(6)]
    x = rng.normal(size=(2, 12, 3, 4))
    s = serialize_groups(x, orders)
    for g, o in enumerate(orders):
        np.testing.assert_array_equal(s.data[:, g], serialize(x[:, 2 * g:2 * g + 2], o).data)
    assert np.array_equal(deserialize_groups(s, orders).data, x)
    t = Tensor(x, requires_grad=True)
    w = rng.normal(size=s.shape)
    (serialize_groups(t, orders) * Tensor(w)).sum().backward()
    np.testing.assert_array_equal(t.grad, deserialize_groups(w, orders).data)


@given(st.integers(1, 16), st.integers(1, 16))
def test_invariants_property(h, w):
    for kind in ScanKind:
        fwd = build_scan(kind, F, h, w).perm
        assert np.array_equal(np.sort(fwd), np.arange(h * w))
        assert np.array_equal(build_scan(kind, R, h, w).perm, fwd[::-1])
    pos = build_scan(D, F, h, w).positions()
    diag = pos.sum(axis=1)
    assert np.all(np.diff(diag) >= 0)
    same = np.diff(diag) == 0
    steps = np.diff(pos, axis=0)[same]
    assert np.all(steps == [1, -1])


@given(st.floats(-10, 10), st.floats(-10, 10), st.sampled_from(ALL_ORDERS))
def test_serialize_linear(a, b, order):
    gen = np.random.default_rng(0)
    x, y = gen.normal(size=(2, 1, 2, 3, 4))
    o = build_scan(*order, 3, 4)
    lhs = serialize(a * x + b * y, o).data
    rhs = a * serialize(x, o).data + b * serialize(y, o).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_scan_orders_immutable():
    o = build_scan(D, F, 4, 4)
    with pytest.raises(ValueError):
        o.perm[0] = 3
    assert build_scan(D, F, 4, 4) is o
