import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lpdesc.geometry import (Correspondence, GridSpec, Keypoint, cartesian_grid, logpolar_grid,
                             make_grid, orientation_residual, parse_keypoints, format_keypoints,
                             scale_ratio, wrap_angle)

coords = st.floats(0, 500)
sigmas = st.floats(0.5, 8)
angles = st.floats(-10, 10)


def test_support_radius():
    assert Keypoint(100, 100, 2, 0).support_radius(12) == 12


def test_keypoint_validation():
    with pytest.raises(ValueError):
        Keypoint(0, 0, 0)
    assert Keypoint(0, 0, 1, -math.pi / 2).theta == pytest.approx(1.5 * math.pi)


def test_logpolar_origin_sample():
    g = logpolar_grid(Keypoint(100, 100, 2, 0), GridSpec(32, 12, "logpolar"))
    assert (g.src_x[0, 0], g.src_y[0, 0]) == (101.0, 100.0)


def test_logpolar_midpoint_column():
    # r = 16, column 16 of 32 sits at the geometric midpoint of [1, 16]
    g = logpolar_grid(Keypoint(0, 0, 2, 0), GridSpec(32, 16, "logpolar"))
    assert g.src_x[0, 16] == pytest.approx(4.0, abs=1e-12)


def test_logpolar_rejects_tiny_support():
    with pytest.raises(ValueError):
        logpolar_grid(Keypoint(0, 0, 0.1, 0), GridSpec(32, 12, "logpolar"))


def test_cartesian_center_and_corners():
    kp = Keypoint(50, 60, 2, 0)
    g = cartesian_grid(kp, GridSpec(33, 12, "cartesian"))
    assert (g.src_x[16, 16], g.src_y[16, 16]) == (50.0, 60.0)
    assert (g.src_x[-1, -1] - 50, g.src_y[-1, -1] - 60) == (12.0, 12.0)


def test_cartesian_quarter_turn():
    g = cartesian_grid(Keypoint(50, 60, 2, math.pi / 2), GridSpec(33, 12, "cartesian"))
    # target (u, v) = (1, 0): last column, middle row
    assert g.src_x[16, -1] - 50 == pytest.approx(0, abs=1e-12)
    assert g.src_y[16, -1] - 60 == pytest.approx(12, abs=1e-12)


@pytest.mark.parametrize("L", [5, 9, 33])
def test_cartesian_integer_offsets_odd_side(L):
    kp = Keypoint(40, 40, (L - 1) / 12, 0)
    g = cartesian_grid(kp, GridSpec(L, 12, "cartesian"))
    assert np.array_equal(g.src_x, np.round(g.src_x))
    assert np.array_equal(g.src_y, np.round(g.src_y))


@settings(max_examples=100, deadline=None)
@given(coords, coords, sigmas, angles, st.integers(-64, 64))
def test_row_shift_property(x, y, sigma, theta, k):
    spec = GridSpec(32, 96, "logpolar")
    g0 = logpolar_grid(Keypoint(x, y, sigma, theta), spec)
    g1 = logpolar_grid(Keypoint(x, y, sigma, theta + 2 * math.pi * k / 32), spec)
    assert np.array_equal(np.roll(g0.src_x, -k, 0), g1.src_x)
    assert np.array_equal(np.roll(g0.src_y, -k, 0), g1.src_y)


@settings(max_examples=100, deadline=None)
@given(coords, coords, st.integers(300, 2000), angles)
def test_radial_stretch_property(x, y, k, theta):
    # r = k / 256 has an exact square, so ln(r^2) = 2 ln(r) holds bit for bit
    r = k / 256
    lam = 2.0
    g1 = logpolar_grid(Keypoint(x, y, r, theta), GridSpec(32, lam, "logpolar"))
    g2 = logpolar_grid(Keypoint(x, y, r * r, theta), GridSpec(32, lam, "logpolar"))
    for col in range(16):
        assert np.array_equal(g2.src_x[:, col], g1.src_x[:, 2 * col])
        assert np.array_equal(g2.src_y[:, col], g1.src_y[:, 2 * col])


@settings(max_examples=50, deadline=None)
@given(sigmas, st.floats(10, 96))
def test_geometric_spacing(sigma, lam):
    kp = Keypoint(0, 0, sigma, 0)
    if kp.support_radius(lam) <= 1.01:
        return
    rho = logpolar_grid(kp, GridSpec(32, lam, "logpolar")).src_x[0]
    steps = np.diff(rho)
    assert np.all(np.diff(steps) > 0)


def test_make_grid_dispatch():
    kp = Keypoint(10, 10, 2, 0)
    assert make_grid(kp, GridSpec(8, 12, "cartesian")).kind == "cartesian"
    assert make_grid(kp, GridSpec(8, 12, "logpolar")).kind == "logpolar"
    with pytest.raises(ValueError):
        GridSpec(8, 12, "polar")


def test_scale_ratio():
    assert scale_ratio(2.0, 2.0) == 1.0
    assert scale_ratio(1.0, 4.0) == 4.0
    assert scale_ratio(3.0, 2.0) == scale_ratio(2.0, 3.0) == 1.5
    with pytest.raises(ValueError):
        scale_ratio(0.0, 1.0)


def test_orientation_residual():
    assert orientation_residual(0, math.pi / 4, math.pi / 4) == pytest.approx(0, abs=1e-12)
    assert orientation_residual(0, 2 * math.pi - 0.01, 0) == pytest.approx(0.5729578, rel=1e-6)
    assert orientation_residual(0.5, 0, 0) == pytest.approx(28.6478898, rel=1e-6)
    assert orientation_residual(0.5, 0, 0) > 25


@given(angles, angles, angles)
def test_orientation_residual_range(a, b, r):
    assert 0 <= orientation_residual(a, b, r) <= 180


@given(st.floats(-1e3, 1e3))
def test_wrap_angle_range(t):
    assert 0 <= wrap_angle(t) < 2 * math.pi


def test_correspondence_validation():
    with pytest.raises(ValueError):
        Correspondence(0, 0, 0.9, 0)
    with pytest.raises(ValueError):
        Correspondence(0, 0, 1.0, 181)


def test_keypoint_text_roundtrip():
    kps = [Keypoint(1.5, 2.25, 3.0, 0.1), Keypoint(0, 0, 1e-3, 6.0)]
    assert parse_keypoints("# header\n" + format_keypoints(kps)) == kps
    with pytest.raises(ValueError):
        parse_keypoints("1 2 3\n")
