import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gaussnet.basis import (
    PLANE_NAMES,
    build_basis,
    default_support,
    dump_basis,
    estimate_lipschitz,
    sampled_planes,
    sigma_schedule,
    synthesize_kernel,
)

sigmas = st.floats(0.3, 3.0)
modes = st.sampled_from(["analytic", "sobel"])


def lipschitz_oracle(planes):
    best = 0.0
    j_count, s, _ = planes.shape
    for j in range(j_count):
        for y in range(-1, s + 1):
            for x in range(-1, s + 1):
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    def at(yy, xx):
                        return planes[j, yy, xx] if 0 <= yy < s and 0 <= xx < s else 0.0
                    best = max(best, abs(at(y, x) - at(y + dy, x + dx)))
    return best


def test_unnormalised_centre_value():
    assert sampled_planes(1.0, 9)[0, 4, 4] == pytest.approx(1 / (2 * math.pi), rel=1e-12)
    assert 1 / (2 * math.pi) == pytest.approx(0.159155, abs=1e-6)


@given(sigmas, modes)
def test_plane_sums_and_centre(sigma, mode):
    b = build_basis(sigma, mode=mode)
    p = b.planes
    assert p.shape == (6, b.support, b.support)
    assert p[0].sum() == pytest.approx(1.0, abs=1e-6)
    for j in (1, 2, 4):
        assert abs(p[j].sum()) < 1e-6
    c = b.radius
    assert p[1][c, c] == 0.0


@given(sigmas, modes)
def test_plane_symmetries(sigma, mode):
    p = build_basis(sigma, mode=mode).planes
    fx = lambda a: a[:, ::-1]  # noqa: E731
    fy = lambda a: a[::-1, :]  # noqa: E731
    np.testing.assert_allclose(fx(p[1]), -p[1], atol=1e-15)
    np.testing.assert_allclose(fy(p[2]), -p[2], atol=1e-15)
    for j in (0, 3, 5):
        np.testing.assert_allclose(fx(p[j]), p[j], atol=1e-15)
        np.testing.assert_allclose(fy(p[j]), p[j], atol=1e-15)
    np.testing.assert_allclose(fx(fy(p[4])), p[4], atol=1e-15)
    np.testing.assert_allclose(fx(p[4]), -p[4], atol=1e-15)


def test_analytic_and_sobel_first_derivative_agree():
    a = build_basis(2.0, 13, "analytic").planes[1]
    s = build_basis(2.0, 13, "sobel").planes[1]
    assert np.abs(a - s).max() / np.abs(a).max() < 0.15


def test_derivative_planes_scaled_by_same_normaliser():
    sigma, support = 1.2, 9
    raw = sampled_planes(sigma, support)
    b = build_basis(sigma, support)
    k = raw[0].sum()
    # the 2-D plane is an outer product of 1-D factors each normalised by sqrt(k)
    np.testing.assert_allclose(b.planes, raw / k, rtol=1e-12)


def test_invalid_arguments():
    for bad in (dict(sigma=0.0), dict(sigma=-1.0), dict(sigma=1.0, support=4), dict(sigma=1.0, support=1)):
        with pytest.raises(ValueError):
            build_basis(**bad)
    with pytest.raises(ValueError):
        build_basis(1.0, mode="spline")
    assert default_support(0.763) == 7


def test_synthesize_examples():
    b = build_basis(1.0)
    np.testing.assert_array_equal(synthesize_kernel(b, [1, 0, 0, 0, 0, 0]), b.planes[0])
    np.testing.assert_array_equal(synthesize_kernel(b, np.zeros(6)), np.zeros_like(b.planes[0]))
    with pytest.raises(ValueError):
        synthesize_kernel(b, [np.nan, 0, 0, 0, 0, 0])


@given(sigmas, st.lists(st.floats(-2, 2), min_size=6, max_size=6))
def test_synthesize_matches_loop(sigma, w):
    b = build_basis(sigma)
    k = synthesize_kernel(b, w)
    oracle = np.zeros_like(k)
    for y in range(b.support):
        for x in range(b.support):
            oracle[y, x] = sum(w[j] * b.planes[j, y, x] for j in range(6))
    np.testing.assert_allclose(k, oracle, atol=1e-12)


@given(sigmas, st.lists(st.floats(-2, 2), min_size=12, max_size=12), st.floats(-3, 3), st.floats(-3, 3))
def test_synthesize_is_linear(sigma, ws, a, c):
    b = build_basis(sigma)
    w1, w2 = np.array(ws[:6]), np.array(ws[6:])
    lhs = synthesize_kernel(b, a * w1 + c * w2)
    rhs = a * synthesize_kernel(b, w1) + c * synthesize_kernel(b, w2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_lipschitz_matches_exhaustive_scan():
    b = build_basis(1.0, 9)
    est = estimate_lipschitz(b)
    assert est.c_g == pytest.approx(lipschitz_oracle(b.planes), rel=1e-12)
    assert est.basis_sup == max(est.per_plane_sup)
    np.testing.assert_allclose(est.per_plane_sup, np.abs(b.planes).max(axis=(1, 2)))
    assert estimate_lipschitz(np.zeros((6, 5, 5))).c_g == 0.0


@given(st.floats(1.0, 3.0), modes)
def test_wider_basis_is_smoother(sigma, mode):
    assert estimate_lipschitz(build_basis(2 * sigma, mode=mode)).c_g <= estimate_lipschitz(build_basis(sigma, mode=mode)).c_g


@given(sigmas, modes, st.lists(st.floats(-1, 1), min_size=6, max_size=6))
def test_kernel_shift_difference_bounded(sigma, mode, w):
    b = build_basis(sigma, mode=mode)
    w = np.array(w)
    k = np.pad(synthesize_kernel(b, w), 1)
    worst = max(np.abs(np.diff(k, axis=0)).max(), np.abs(np.diff(k, axis=1)).max())
    assert worst <= 6 * np.abs(w).max() * estimate_lipschitz(b).c_g + 1e-15


def test_sigma_schedule():
    assert sigma_schedule(0.763, 1, 2) == 0.763
    assert sigma_schedule(0.763, 3, 2) == pytest.approx(3.052)
    assert all(sigma_schedule(0.5, ell, 1) == 0.5 for ell in range(1, 6))
    with pytest.raises(ValueError):
        sigma_schedule(1.0, 0, 2)


def test_dump_basis_roundtrip(tmp_path):
    b = build_basis(0.763, mode="sobel")
    paths = dump_basis(b, tmp_path)
    assert [p.name for p in paths] == [f"plane_{n}.csv" for n in PLANE_NAMES]
    for p, plane in zip(paths, b.planes):
        np.testing.assert_array_equal(np.loadtxt(p, delimiter=","), plane)
