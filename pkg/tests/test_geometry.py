"""Geometry core: forward mapping oracle values, inversion, transport."""

import math

import numpy as np
import pytest

from fisheyepose import geometry as geo
from fisheyepose.geometry import (
    BoundingBox,
    DomainError,
    ImageGeometry,
    NormalizedPoint,
    OutsideMappedRegionError,
    PolarLocation,
    fisheye_forward,
    fisheye_inverse,
    from_polar,
    to_polar,
    transport_box,
)

# Frozen against a 40-digit evaluation of the two-stage mapping:
# exp(-1/2) and the x'' = y'' value at (0.5, 0.5).
EXP_NEG_HALF = 0.6065306597126334
FWD_HALF_HALF = 0.37581327166041034


def test_forward_origin_fixed():
    q = fisheye_forward(NormalizedPoint(0.0, 0.0))
    assert q.x == 0.0 and q.y == 0.0


def test_forward_axis_endpoint():
    q = fisheye_forward(NormalizedPoint(1.0, 0.0))
    assert abs(q.x - EXP_NEG_HALF) < 1e-12
    assert q.y == 0.0


def test_forward_diagonal_point():
    q = fisheye_forward(NormalizedPoint(0.5, 0.5))
    assert abs(q.x - FWD_HALF_HALF) < 1e-12
    assert abs(q.y - FWD_HALF_HALF) < 1e-12


def test_forward_domain_check():
    with pytest.raises(DomainError):
        fisheye_forward(NormalizedPoint(1.0000001, 0.0))
    with pytest.raises(DomainError):
        fisheye_forward(NormalizedPoint(0.2, -1.1))


def test_forward_radius_never_grows():
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, 20000)
    y = rng.uniform(-1, 1, 20000)
    xd, yd = geo.forward_arrays(x, y)
    r_in = np.hypot(x, y)
    r_out = np.hypot(xd, yd)
    nonzero = r_in > 0
    assert np.all(r_out[nonzero] < r_in[nonzero])
    assert np.all(r_out <= geo.MAX_MAPPED_RADIUS + 1e-12)


def test_forward_square_symmetries():
    """The map commutes with the 8 symmetries of the square."""
    rng = np.random.default_rng(11)
    pts = rng.uniform(-0.999, 0.999, size=(200, 2))
    fx, fy = geo.forward_arrays(pts[:, 0], pts[:, 1])
    for sx in (1.0, -1.0):
        for sy in (1.0, -1.0):
            for swap in (False, True):
                px, py = sx * pts[:, 0], sy * pts[:, 1]
                if swap:
                    px, py = py, px
                gx, gy = geo.forward_arrays(px, py)
                ex, ey = sx * fx, sy * fy
                if swap:
                    ex, ey = ey, ex
                np.testing.assert_allclose(gx, ex, rtol=0, atol=1e-15)
                np.testing.assert_allclose(gy, ey, rtol=0, atol=1e-15)


def test_forward_monotone_along_axis():
    x = np.linspace(0.0, 1.0, 4001)
    xd, _ = geo.forward_arrays(x, np.zeros_like(x))
    assert np.all(np.diff(xd) > 0)


def test_inverse_origin():
    p = fisheye_inverse(NormalizedPoint(0.0, 0.0))
    assert p.x == 0.0 and p.y == 0.0


def test_inverse_of_axis_endpoint():
    # The rim is where the Jacobian degenerates, so the residual tolerance
    # only pins the preimage to roughly sqrt(tol); assert both contracts.
    q = fisheye_forward(NormalizedPoint(1.0, 0.0))
    p = fisheye_inverse(q, tol=1e-9)
    back = fisheye_forward(p)
    assert abs(back.x - q.x) <= 1e-9 and abs(back.y - q.y) <= 1e-9
    assert abs(p.x - 1.0) < 2e-4
    assert abs(p.y) < 2e-4


def test_inverse_round_trip_bulk():
    rng = np.random.default_rng(2024)
    rho = np.sqrt(rng.uniform(0.0, 1.0, 10000)) * 0.999
    ang = rng.uniform(-math.pi, math.pi, 10000)
    x = rho * np.cos(ang)
    y = rho * np.sin(ang)
    xd, yd = geo.forward_arrays(x, y)
    xi, yi, ok = geo.inverse_arrays(xd, yd, tol=1e-12)
    assert np.all(ok)
    err = np.maximum(np.abs(xi - x), np.abs(yi - y))
    assert float(err.max()) < 1e-6


def test_inverse_rejects_unreachable_point():
    with pytest.raises(OutsideMappedRegionError):
        fisheye_inverse(NormalizedPoint(0.7, 0.0))
    with pytest.raises(OutsideMappedRegionError):
        fisheye_inverse(NormalizedPoint(0.5, 0.5))


def test_polar_conversions():
    assert to_polar(NormalizedPoint(0.0, 0.0)) == PolarLocation(0.0, 0.0)
    loc = to_polar(NormalizedPoint(0.0, 0.5))
    assert abs(loc.theta_deg - 90.0) < 1e-12
    assert abs(loc.rho - 0.5) < 1e-12
    p = from_polar(PolarLocation(90.0, 0.5))
    assert abs(p.x) < 1e-12 and abs(p.y - 0.5) < 1e-12


def test_polar_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        rho = rng.uniform(0.0, 0.999)
        theta = rng.uniform(-180.0, 180.0)
        p = from_polar(PolarLocation(theta, rho))
        loc = to_polar(p)
        assert abs(loc.rho - rho) < 1e-12
        if rho > 1e-9:
            d = (loc.theta_deg - theta + 180.0) % 360.0 - 180.0
            assert abs(d) < 1e-9


def test_polar_domain_checks():
    with pytest.raises(DomainError):
        from_polar(PolarLocation(0.0, 1.0))
    with pytest.raises(DomainError):
        to_polar(NormalizedPoint(0.9, 0.9))


def test_transport_degenerate_box_stays_at_center():
    eps = 1e-9
    box = BoundingBox(NormalizedPoint(0.3, -0.2), eps, eps)
    out = transport_box(box)
    q = fisheye_forward(NormalizedPoint(0.3, -0.2))
    assert abs(out.center.x - q.x) < 1e-7
    assert abs(out.center.y - q.y) < 1e-7
    assert out.half_width < 1e-8 and out.half_height < 1e-8


def test_transport_centered_box_shrinks():
    rng = np.random.default_rng(5)
    for _ in range(300):
        hw = rng.uniform(0.01, 0.99)
        hh = rng.uniform(0.01, 0.99)
        out = transport_box(BoundingBox(NormalizedPoint(0.0, 0.0), hw, hh))
        assert out.half_width < hw
        assert out.half_height < hh
        assert abs(out.center.x) < 1e-12 and abs(out.center.y) < 1e-12


def test_transport_hull_matches_dense_sampling():
    rng = np.random.default_rng(9)
    for _ in range(50):
        cx = rng.uniform(-0.5, 0.5)
        cy = rng.uniform(-0.5, 0.5)
        hw = rng.uniform(0.02, 0.4)
        hh = rng.uniform(0.02, 0.4)
        box = BoundingBox(NormalizedPoint(cx, cy), hw, hh)
        out = transport_box(box)
        t = np.linspace(-1, 1, 2000)
        ones = np.ones_like(t)
        bx = np.concatenate([t, t, -ones, ones]) * hw + cx
        by = np.concatenate([-ones, ones, t, t]) * hh + cy
        mx, my = geo.forward_arrays(bx, by)
        assert abs(out.center.x - 0.5 * (mx.min() + mx.max())) < 1e-5
        assert abs(out.half_width - 0.5 * (mx.max() - mx.min())) < 1e-5
        assert abs(out.center.y - 0.5 * (my.min() + my.max())) < 1e-5
        assert abs(out.half_height - 0.5 * (my.max() - my.min())) < 1e-5


def test_transport_rejects_bad_boxes():
    with pytest.raises(DomainError):
        transport_box(BoundingBox(NormalizedPoint(0.9, 0.0), 0.2, 0.1))
    with pytest.raises(DomainError):
        transport_box(BoundingBox(NormalizedPoint(0.0, 0.0), 0.0, 0.1))


def test_image_geometry_round_trip():
    g = ImageGeometry(224, 224)
    col, row = g.to_pixel(NormalizedPoint(0.0, 0.0))
    assert col == 111.5 and row == 111.5
    col, row = g.to_pixel(NormalizedPoint(-1.0, 1.0))
    assert col == 0.0 and row == 0.0
    rng = np.random.default_rng(13)
    for _ in range(200):
        p = NormalizedPoint(rng.uniform(-1, 1), rng.uniform(-1, 1))
        q = g.to_normalized(*g.to_pixel(p))
        assert abs(q.x - p.x) < 1e-12 and abs(q.y - p.y) < 1e-12
