import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mambasr import ssm
from mambasr import tensor as T
from mambasr.errors import ConfigError, DimensionError, ParameterError
from mambasr.ssm import (DELTA_MIN, MhssmConfig, SsmHeadParams, discretize, init_head_params,
                         init_mhssm_params, linear_recurrence, mhssm_forward, phi_exact, phi_series,
                         predict_delta, scan_parallel, scan_sequential, selective_scan)
from mambasr.tensor import Tensor

from gradcheck import check

METHODS = ["sequential", "parallel"] + (["compiled"] if ssm._compiled.AVAILABLE else [])


def head(rng, cin=3, S=4, hidden=5, per_state=False, requires_grad=False):
    arrays = init_head_params(rng, cin, S, hidden, per_state)
    # wider spread than the init so the gradient checks see non-trivial Delta
    arrays["delta.w2"] = rng.normal(0.0, 0.5, size=arrays["delta.w2"].shape)
    return SsmHeadParams.from_arrays(arrays, requires_grad)


def scalar_head(D=0.0):
    arrays = {"a": np.zeros(1), "B": np.ones((1, 1)), "C": np.ones((1, 1)), "D": np.array([D]),
              "delta.w1": np.zeros((1, 1)), "delta.b1": np.zeros(1),
              "delta.w2": np.zeros((1, 1)), "delta.b2": np.zeros(1)}
    return SsmHeadParams.from_arrays(arrays)


# ------------------------------------------------------------- discretize

def test_discretize_ln2_example():
    abar, phi = discretize(0.0, math.log(2.0))
    assert abs(abar - 0.5) <= 1e-15
    assert abs(phi - 0.5) <= 1e-15


@pytest.mark.parametrize("a", [-3.0, 0.0, 2.5])
def test_discretize_tiny_delta_uses_series(a):
    delta = 1e-9
    _, phi = discretize(a, delta)
    A = -math.exp(a)
    assert abs(phi - delta * (1 + delta * A / 2)) <= 1e-15


def test_series_matches_exact_at_1e_6():
    a = np.linspace(-3, 0, 13)
    np.testing.assert_allclose(phi_series(a, 1e-6), phi_exact(a, 1e-6), rtol=0, atol=1e-12)


def test_discretize_large_a_asymptote():
    abar, phi = discretize(40.0, 1.0)
    assert abar == 0.0
    assert phi == pytest.approx(math.exp(-40.0), rel=1e-12)


def test_discretize_rejects_nonpositive_delta():
    with pytest.raises(ParameterError):
        discretize(np.zeros(2), np.array([0.1, 0.0]))
    with pytest.raises(ParameterError):
        discretize(0.0, -1.0)


@given(st.floats(-20, 20), st.floats(1e-12, 50))
def test_discretize_ranges(a, delta):
    abar, phi = discretize(a, delta)
    assert 0.0 <= abar <= 1.0
    assert 0.0 < phi <= delta * (1 + 1e-12)


# ----------------------------------------------------------- predict_delta

def test_predict_delta_zero_weights():
    d = predict_delta(Tensor(np.random.default_rng(0).normal(size=(2, 1, 7))), scalar_head()).data
    np.testing.assert_allclose(d, math.log(2.0) + DELTA_MIN, rtol=0, atol=1e-15)


def test_predict_delta_positive(rng):
    p = head(rng, per_state=True)
    p.delta_w2.data *= 50
    d = predict_delta(Tensor(rng.normal(0, 10, size=(1000, 3, 1))), p).data
    assert d.shape == (1000, 4, 1)
    assert np.all(d >= DELTA_MIN)


def test_predict_delta_gradient(rng):
    p = head(rng, requires_grad=True, per_state=True)
    u = Tensor(rng.uniform(-1, 1, size=(2, 3, 5)))
    w = rng.uniform(-1, 1, size=(2, 4, 5))
    leaves = [p.delta_w1, p.delta_b1, p.delta_w2, p.delta_b2]
    assert check(lambda: T.sum_all(predict_delta(u, p) * Tensor(w)), leaves, 1e-4) <= 1


# ------------------------------------------------------------------- scans

@pytest.mark.parametrize("fn", [scan_sequential, scan_parallel])
def test_scalar_recurrence_example(fn):
    y = fn(Tensor(np.ones((1, 1, 2))), scalar_head(), delta=Tensor(np.full((1, 1, 2), math.log(2.0)))).data
    np.testing.assert_allclose(y[0, 0], [0.5, 0.75], rtol=0, atol=1e-15)


@pytest.mark.parametrize("fn", [scan_sequential, scan_parallel])
def test_zero_input_zero_output(rng, fn):
    assert not fn(Tensor(np.zeros((2, 3, 9))), head(rng)).data.any()


@pytest.mark.parametrize("fn", [scan_sequential, scan_parallel])
def test_skip_only(rng, fn):
    p = head(rng)
    p.C.data[:] = 0.0
    p.D.data[:] = 1.0
    u = rng.normal(size=(2, 3, 11))
    np.testing.assert_array_equal(fn(Tensor(u), p).data, u)


def test_parallel_matches_sequential_example(rng):
    p = head(rng, cin=4, S=8)
    u = Tensor(rng.normal(size=(2, 4, 64)))
    np.testing.assert_allclose(scan_parallel(u, p).data, scan_sequential(u, p).data, rtol=0, atol=1e-10)


@pytest.mark.parametrize("length", [1, 2, 3, 31, 32, 33, 97, 257])
@pytest.mark.parametrize("method", METHODS)
def test_methods_agree(rng, length, method):
    p = head(rng, per_state=length % 2 == 1)
    u = Tensor(rng.normal(size=(2, 3, length)))
    delta = predict_delta(u, p)
    ref = selective_scan(u, delta, p, "sequential").data
    np.testing.assert_allclose(selective_scan(u, delta, p, method).data, ref, rtol=0, atol=1e-10)


def impulse_response_output(u, p, delta):
    """Materialize k_t = C diag(Abar^t Phi) B and convolve."""
    abar, phi = discretize(p.a.data, delta)
    L = u.shape[-1]
    k = np.stack([p.C.data @ np.diag(abar ** t * phi) @ p.B.data for t in range(L)])
    y = np.zeros_like(u)
    for t in range(L):
        for j in range(t + 1):
            y[:, :, t] += u[:, :, j] @ k[t - j].T
    return y + p.D.data[None, :, None] * u


@pytest.mark.parametrize("method", METHODS)
def test_fixed_delta_matches_convolution(rng, method):
    p = head(rng, cin=3, S=5)
    u = rng.normal(size=(2, 3, 16))
    delta = 0.3
    y = selective_scan(Tensor(u), Tensor(np.full((2, 1, 16), delta)), p, method).data
    np.testing.assert_allclose(y, impulse_response_output(u, p, delta), rtol=0, atol=1e-8)


@given(st.floats(-5, 5), st.integers(0, 2 ** 31))
def test_linear_in_u_for_fixed_delta(scale, seed):
    gen = np.random.default_rng(seed)
    p = head(gen)
    u = gen.normal(size=(1, 3, 12))
    delta = Tensor(gen.uniform(0.01, 1.0, size=(1, 1, 12)))
    y1 = scan_parallel(Tensor(scale * u), p, delta).data
    y2 = scale * scan_parallel(Tensor(u), p, delta).data
    np.testing.assert_allclose(y1, y2, rtol=1e-12, atol=1e-12)


def test_stability_long_sequence(rng):
    p = head(rng, S=6)
    p.a.data[:] = [-12.0, -6.0, 0.0, 3.0, 9.0, 20.0]  # A from nearly 0 to very stiff
    p.delta_w2.data *= 100
    u = rng.uniform(-1, 1, size=(1, 3, 10_000))
    d = predict_delta(Tensor(u), p).data
    abar, phi = discretize(p.a.data[:, None], d[0])
    bu = p.B.data @ u[0]
    x = phi * bu
    h = linear_recurrence(abar, x, "parallel")
    bound = np.abs(x).max(axis=1) / (1 - abar.max(axis=1))
    assert np.isfinite(h).all()
    assert np.all(np.abs(h).max(axis=1) <= bound * (1 + 1e-9))
    assert np.isfinite(scan_sequential(Tensor(u), p).data).all()


@pytest.mark.parametrize("method", METHODS)
def test_linear_recurrence_axis_and_shape(rng, method):
    c = rng.uniform(0, 1, size=(3, 2, 40))
    x = rng.normal(size=(3, 2, 40))
    h = np.zeros((3, 2))
    ref = np.empty_like(x)
    for t in range(40):
        h = c[..., t] * h + x[..., t]
        ref[..., t] = h
    np.testing.assert_allclose(linear_recurrence(c, x, method), ref, rtol=0, atol=1e-12)
    with pytest.raises(DimensionError):
        linear_recurrence(c, x[..., :3], method)


def test_unknown_method_rejected(rng):
    with pytest.raises(ParameterError):
        linear_recurrence(np.ones(3), np.ones(3), "magic")
    with pytest.raises(ConfigError):
        MhssmConfig(4, 2, scan_method="magic")


def test_scan_shape_errors(rng):
    p = head(rng)
    with pytest.raises(DimensionError):
        scan_parallel(Tensor(np.ones((1, 2, 5))), p)
    with pytest.raises(DimensionError):
        selective_scan(Tensor(np.ones((1, 3, 5))), Tensor(np.ones((1, 2, 5))), p)


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize("per_state", [False, True])
def test_scan_gradient(rng, method, per_state):
    p = head(rng, per_state=per_state, requires_grad=True)
    u = Tensor(rng.uniform(-1, 1, size=(2, 3, 7)), requires_grad=True)
    w = rng.uniform(-1, 1, size=(2, 3, 7))

    def fn():
        return T.sum_all(selective_scan(u, predict_delta(u, p), p, method) * Tensor(w))

    assert check(fn, [u] + p.tensors(), 1e-4) <= 1


def test_stacked_heads_match_single(rng):
    arrays = [init_head_params(rng, 2, 3, 4) for _ in range(3)]
    stacked = SsmHeadParams.from_arrays({k: np.stack([a[k] for a in arrays]) for k in arrays[0]})
    u = rng.normal(size=(2, 3, 2, 10))
    y = selective_scan(Tensor(u), predict_delta(Tensor(u), stacked), stacked).data
    for i, a in enumerate(arrays):
        np.testing.assert_allclose(y[:, i], scan_parallel(Tensor(u[:, i]), SsmHeadParams.from_arrays(a)).data,
                                   rtol=0, atol=1e-12)


# -------------------------------------------------------------- multi-head

def test_mhssm_config_validation():
    with pytest.raises(ConfigError):
        MhssmConfig(model_dim=32, num_heads=6)
    with pytest.raises(ConfigError):
        MhssmConfig(model_dim=4, num_heads=0)
    assert MhssmConfig(model_dim=30, num_heads=6).head_dim == 5


def _mh_params(cfg, rng, requires_grad=False):
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in init_mhssm_params(cfg, rng).items()}


@pytest.mark.parametrize("hw", [7, 8, 13])
def test_mhssm_shape(rng, hw):
    cfg = MhssmConfig(model_dim=6, num_heads=6, state_dim=3)
    z = rng.normal(size=(2, 6, hw, hw + 1))
    assert mhssm_forward(z, cfg, _mh_params(cfg, rng)).shape == z.shape


def test_mhssm_skip_only_wiring(rng):
    cfg = MhssmConfig(model_dim=4, num_heads=2, state_dim=3, gating=False)
    params = _mh_params(cfg, rng)
    params["C"].data[:] = 0.0
    params["D"].data[:] = 1.0
    params["out_proj.weight"].data = np.eye(4)
    z = Tensor(rng.normal(size=(1, 4, 5, 5)))
    local = T.silu(T.conv2d_depthwise3x3(T.conv2d_pointwise(z, params["in_proj.weight"]),
                                         params["dwconv.weight"], params["dwconv.bias"]))
    expected = T.layer_norm(local, params["norm.weight"], params["norm.bias"]).data
    np.testing.assert_allclose(mhssm_forward(z, cfg, params).data, expected, rtol=0, atol=1e-14)


def test_mhssm_rejects_wrong_channels(rng):
    cfg = MhssmConfig(model_dim=4, num_heads=2, state_dim=3)
    with pytest.raises(DimensionError):
        mhssm_forward(np.zeros((1, 6, 4, 4)), cfg, _mh_params(cfg, rng))


@pytest.mark.parametrize("gating", [True, False])
def test_mhssm_gradient(rng, gating):
    cfg = MhssmConfig(model_dim=4, num_heads=4, state_dim=3, gating=gating)
    params = _mh_params(cfg, rng, requires_grad=True)
    for k in ("delta.w2", "dwconv.bias", "norm.bias"):
        params[k].data = rng.normal(0.0, 0.5, size=params[k].shape)
    z = Tensor(rng.uniform(-1, 1, size=(1, 4, 6, 6)), requires_grad=True)
    w = rng.uniform(-1, 1, size=z.shape)
    worst = check(lambda: T.sum_all(mhssm_forward(z, cfg, params) * Tensor(w)), [z] + list(params.values()), 1e-3)
    assert worst <= 1
