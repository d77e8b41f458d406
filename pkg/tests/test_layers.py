import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gaussnet.basis import estimate_lipschitz
from gaussnet.layers import (
    LayerSpec,
    NetworkSpec,
    antialias_bound,
    build_network,
    certify_antialias,
    certify_bound,
    classify,
    count_parameters,
    describe,
    forward_network,
    gauss_windowed_average,
    init_layer,
    layer_backward,
    layer_forward,
    weight_sup,
)
from gaussnet.tensor import global_average, translate, zero_pad

from gradcheck import check_network_gradients


def gauss_layer(kind, n, m, rng, sigma=0.9, d=1, **kw):
    return init_layer(kind, n, m, rng, dtype=np.float64, sigma=sigma, d=d, **kw)


def net_of(layers, classes=3, pooling="global-average", rng=None):
    rng = rng or np.random.default_rng(0)
    m = layers[-1].out_channels
    return NetworkSpec(tuple(layers), rng.standard_normal((classes, m)), rng.standard_normal(classes), pooling=pooling)


def interior(rng, n, c, size, margin):
    x = np.zeros((n, c, size, size))
    x[:, :, margin:size - margin, margin:size - margin] = rng.uniform(0, 1, (n, c, size - 2 * margin, size - 2 * margin))
    return x


# ----------------------------------------------------------------------------- validation


def test_layer_validation(rng):
    w = rng.standard_normal((4, 12))
    with pytest.raises(ValueError):
        LayerSpec("gauss", 2, 4, w[:, :6])
    with pytest.raises(ValueError):
        LayerSpec("gauss", 2, 4, w, d=2)
    with pytest.raises(ValueError):
        LayerSpec("conv", 2, 4, w)
    with pytest.raises(ValueError):
        LayerSpec("gauss", 2, 4, w, sigma=0.0)
    with pytest.raises(ValueError):
        LayerSpec("gauss-residual", 2, 4, w)
    with pytest.raises(ValueError):
        LayerSpec("pixel-sub", 2, 4, rng.standard_normal((4, 2, 2, 2)), d=2)
    with pytest.raises(ValueError):
        LayerSpec("gauss-sub", 2, 4, w, d=2, subsample_mode="max")
    with pytest.raises(ValueError):
        LayerSpec("gauss", 2, 4, w, skip=np.eye(4, 2))
    assert LayerSpec("gauss-residual", 2, 4, w, skip=np.eye(4, 2)).skip.shape == (4, 2)


def test_network_validation(rng):
    a = gauss_layer("gauss", 1, 3, rng)
    b = gauss_layer("gauss", 4, 2, rng)
    with pytest.raises(ValueError):
        NetworkSpec((a, b), np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        NetworkSpec((a,), np.zeros((2, 4)), np.zeros(2))
    with pytest.raises(ValueError):
        NetworkSpec((a,), np.zeros((2, 3)), np.zeros(2), pooling="max")
    with pytest.raises(ValueError):
        forward_network(NetworkSpec((a,), np.zeros((2, 3)), np.zeros(2)), np.zeros((1, 2, 8, 8)))


# ----------------------------------------------------------------------------- parameter economy


def test_parameter_counts_example():
    g = build_network({"in_channels": 6, "classes": 2, "layers": [{"kind": "gauss", "out_channels": 8}]})
    p = build_network({"in_channels": 6, "classes": 2, "layers": [{"kind": "pixel", "out_channels": 8}]})
    assert count_parameters(g, include_affine=False, include_head=False) == 288
    assert count_parameters(p, include_affine=False, include_head=False) == 432


@given(st.lists(st.integers(1, 12), min_size=2, max_size=5))
def test_parameter_ratio_is_six_ninths(channels):
    def desc(kind):
        return {"in_channels": channels[0], "classes": 2,
                "layers": [{"kind": kind, "out_channels": c} for c in channels[1:]]}
    g = count_parameters(build_network(desc("gauss")), include_affine=False, include_head=False)
    p = count_parameters(build_network(desc("pixel")), include_affine=False, include_head=False)
    assert g * 9 == p * 6


def test_init_scale_and_head():
    net = build_network({"in_channels": 3, "classes": 5, "layers": [{"kind": "gauss-sub", "out_channels": 7, "d": 2}]}, seed=3)
    w = net.layers[0].weights
    a = 1 / math.sqrt(6 * 3)
    assert np.abs(w).max() <= a
    assert np.abs(w).max() > 0.5 * a
    assert not net.head_weight.any() and not net.head_bias.any()


def test_describe_roundtrip():
    desc = {"in_channels": 2, "classes": 3, "pooling": "gauss-windowed-average", "window_sigma": 4.0,
            "layers": [{"kind": "gauss-sub", "out_channels": 4, "sigma": 1.1, "d": 2, "subsample_mode": "average"},
                       {"kind": "gauss-residual", "out_channels": 6, "has_skip": True},
                       {"kind": "pixel-antialias-sub", "out_channels": 5, "sigma": 0.7, "d": 2, "kernel_size": 5}]}
    net = build_network(desc, seed=1)
    again = build_network(describe(net), seed=1)
    assert describe(again) == describe(net)
    for a, b in zip(net.parameters().values(), again.parameters().values()):
        np.testing.assert_array_equal(a, b)


# ----------------------------------------------------------------------------- invariance and covariance


@given(st.integers(0, 10_000), st.integers(2, 3), st.sampled_from([(1, 0), (0, -1), (1, 1), (-2, 1), (2, 2)]))
def test_unstrided_gaussnet_is_exactly_invariant(seed, depth, shift):
    rng = np.random.default_rng(seed)
    layers, c = [], 1
    for _ in range(depth):
        layers.append(gauss_layer("gauss", c, 3, rng, sigma=float(rng.uniform(0.5, 2.0))))
        c = 3
    net = net_of(layers, rng=rng)
    x = interior(rng, 3, 1, 16, 3)
    base = forward_network(net, x)[0]
    moved = forward_network(net, translate(x, shift))[0]
    assert np.abs(moved - base).max() <= 1e-5 * max(1.0, np.abs(base).max())


@given(st.integers(0, 10_000), st.sampled_from(["gauss", "pixel"]), st.sampled_from([(1, 0), (-1, 1), (2, -2)]))
def test_unstrided_layers_are_covariant(seed, kind, shift):
    rng = np.random.default_rng(seed)
    layer = gauss_layer(kind, 2, 3, rng)
    x = interior(rng, 2, 2, 14, 3)
    lhs = layer_forward(layer, translate(x, shift))
    rhs = translate(layer_forward(layer, x), shift)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@given(st.integers(0, 10_000), st.integers(-2, 2), st.integers(-2, 2), st.sampled_from(["point", "average"]))
def test_strided_gauss_layer_is_g_covariant(seed, kx, ky, mode):
    rng = np.random.default_rng(seed)
    d = 2
    layer = gauss_layer("gauss-sub", 1, 2, rng, d=d, subsample_mode=mode)
    x = interior(rng, 1, 1, 20, 5)
    lhs = layer_forward(layer, translate(x, (kx * d, ky * d)))
    rhs = translate(layer_forward(layer, x), (kx, ky))
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


# ----------------------------------------------------------------------------- pooling


def test_wide_window_approaches_global_average(rng):
    m = rng.uniform(0, 1, (2, 3, 8, 8))
    np.testing.assert_allclose(gauss_windowed_average(m, 100.0), global_average(m), atol=1e-3)
    with pytest.raises(ValueError):
        gauss_windowed_average(m, 0.0)


# ----------------------------------------------------------------------------- certificates


def test_single_layer_certificate_formula(rng):
    layer = gauss_layer("gauss-sub", 2, 3, rng, d=2)
    x = interior(rng, 1, 2, 12, 2)
    cert = certify_bound(net_of([layer]), x)
    n_pix = math.prod(layer.output_size((12, 12)))
    c_g = estimate_lipschitz(layer.basis()).c_g
    w = np.abs(layer.weights).sum(axis=1).max()
    assert cert.bound == pytest.approx(c_g * n_pix * np.abs(x).max() * w)
    assert cert.per_layer[0].n_pixels == n_pix


def test_weight_sup_folds_affine_scale(rng):
    layer = gauss_layer("gauss", 2, 3, rng)
    scaled = LayerSpec(layer.kind, 2, 3, layer.weights, affine_scale=np.array([1.0, -2.0, 0.5]))
    rows = np.abs(layer.weights).sum(axis=1) * np.array([1.0, 2.0, 0.5])
    assert weight_sup(scaled) == pytest.approx(rows.max())


def test_certificates_refuse_unsmoothed_layers(rng):
    x = np.zeros((1, 1, 8, 8))
    with pytest.raises(ValueError):
        certify_bound(net_of([gauss_layer("pixel-sub", 1, 2, rng, d=2)]), x)
    with pytest.raises(ValueError):
        certify_bound(net_of([gauss_layer("gauss-residual", 1, 1, rng)]), x)
    with pytest.raises(ValueError):
        antialias_bound(-1.0, 1.0, 4, 0.1)
    with pytest.raises(ValueError):
        certify_antialias(gauss_layer("pixel-sub", 1, 2, rng, d=2), x)
    assert antialias_bound(2.0, 0.5, 16, 0.25) == pytest.approx(4.0)


# ----------------------------------------------------------------------------- gradients


KIND_PAIRS = [("gauss-sub", "gauss"), ("gauss-residual", "gauss-sub"), ("pixel-sub", "pixel"),
              ("pixel-antialias-sub", "pixel")]


@pytest.mark.parametrize("kinds", KIND_PAIRS)
@pytest.mark.parametrize("pooling", ["global-average", "gauss-windowed-average"])
def test_network_gradients_match_central_differences(kinds, pooling):
    rng = np.random.default_rng(5)
    first, second = kinds
    l1 = gauss_layer(first, 2, 2 if first == "gauss-residual" else 3, rng, d=1 if first == "gauss-residual" else 2,
                     subsample_mode="average" if first == "gauss-sub" else "point")
    l1 = LayerSpec(**{**l1.__dict__, "affine_shift": rng.uniform(-0.2, 0.2, l1.out_channels)})
    l2 = gauss_layer(second, l1.out_channels, 2, rng, d=1 if second in ("gauss", "pixel", "gauss-residual") else 2)
    l2 = LayerSpec(**{**l2.__dict__, "affine_shift": rng.uniform(-0.2, 0.2, 2)})
    net = net_of([l1, l2], pooling=pooling, rng=rng)
    x = rng.uniform(0, 1, (3, 2, 9, 9))
    worst, checked, skipped = check_network_gradients(net, x, np.array([0, 1, 2]), rng)
    assert checked >= 20 and skipped <= checked // 4
    assert worst <= 1e-3


def test_layer_backward_adjoint_for_input(rng):
    layer = gauss_layer("gauss-sub", 2, 3, rng, d=2)
    x = rng.uniform(0, 1, (2, 2, 10, 10))
    y, cache = layer_forward(layer, x, keep=True)
    g = rng.standard_normal(y.shape)
    dx, grads = layer_backward(layer, cache, g)
    assert dx.shape == x.shape
    assert set(grads) == {"weights", "affine_scale", "affine_shift"}
    v = rng.standard_normal(x.shape) * 1e-7
    # ReLU is piecewise linear, so a tiny step stays on one piece almost surely
    lin = np.sum((layer_forward(layer, x + v) - y) * g)
    assert lin == pytest.approx(np.sum(dx * v), rel=1e-4)


def test_classify_ties_pick_lowest_index(rng):
    layer = gauss_layer("gauss", 1, 2, rng)
    net = NetworkSpec((layer,), np.zeros((3, 2)), np.zeros(3))
    np.testing.assert_array_equal(classify(net, rng.uniform(0, 1, (4, 1, 6, 6))), 0)
    assert classify(net, np.zeros((0, 1, 6, 6))).shape == (0,)
