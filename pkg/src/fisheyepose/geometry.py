"""Radial fisheye mapping, its numerical inverse, and coordinate transport.

All geometry is expressed in normalized image coordinates: the square
[-1, 1] x [-1, 1] with x to the right, y up, and the origin at the image
center.  The forward mapping squeezes the square onto the disk of radius
exp(-1/2) around the origin; everything outside that disk has no preimage.

The mapping is applied in two stages.  First a square-to-disk step

    x' = x * sqrt(1 - y^2 / 2)
    y' = y * sqrt(1 - x^2 / 2)

then a Gaussian radial contraction driven by the intermediate radius
r^2 = x'^2 + y'^2:

    x'' = x' * exp(-r^2 / 2)
    y'' = y' * exp(-r^2 / 2)

Both stages are smooth on the open square, strictly radius-decreasing away
from the origin, and equivariant under the symmetries of the square, which
is what the tests lean on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Radius of the image of the unit square.  On the boundary |x| = 1 the
# square-to-disk stage gives x'^2 + y'^2 = 1 identically, so the whole
# boundary lands on the circle of radius exp(-1/2).
MAX_MAPPED_RADIUS = math.exp(-0.5)

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 50


class DomainError(ValueError):
    """Input point lies outside the domain of the requested mapping."""


class OutsideMappedRegionError(RuntimeError):
    """Target point has no preimage, or the inverse iteration failed to converge."""


@dataclass(frozen=True)
class NormalizedPoint:
    """A point in normalized image coordinates, [-1, 1] on each axis."""

    x: float
    y: float

    def __iter__(self):
        yield self.x
        yield self.y


@dataclass(frozen=True)
class PolarLocation:
    """Polar position on the image plane: theta in degrees CCW from +x, rho in [0, 1)."""

    theta_deg: float
    rho: float


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized coordinates, stored as center plus half extents."""

    center: NormalizedPoint
    half_width: float
    half_height: float

    def corners(self):
        cx, cy = self.center.x, self.center.y
        hw, hh = self.half_width, self.half_height
        return [
            NormalizedPoint(cx - hw, cy - hh),
            NormalizedPoint(cx + hw, cy - hh),
            NormalizedPoint(cx + hw, cy + hh),
            NormalizedPoint(cx - hw, cy + hh),
        ]

    def contains(self, p: NormalizedPoint) -> bool:
        return (
            abs(p.x - self.center.x) <= self.half_width
            and abs(p.y - self.center.y) <= self.half_height
        )


def _check_square_domain(x, y):
    if np.any(np.abs(x) > 1.0) or np.any(np.abs(y) > 1.0):
        raise DomainError("point outside [-1, 1]^2 normalized square")


def forward_arrays(x, y):
    """Vectorized fisheye forward map.  No domain checks; arrays broadcast."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xp = x * np.sqrt(1.0 - 0.5 * y * y)
    yp = y * np.sqrt(1.0 - 0.5 * x * x)
    s = np.exp(-0.5 * (xp * xp + yp * yp))
    return xp * s, yp * s


def fisheye_forward(p: NormalizedPoint) -> NormalizedPoint:
    """Map a point of the unit square through the fisheye distortion.

    Raises DomainError if p lies outside [-1, 1]^2.
    """
    _check_square_domain(p.x, p.y)
    xd, yd = forward_arrays(p.x, p.y)
    return NormalizedPoint(float(xd), float(yd))


def _jacobian(x, y):
    """Jacobian of the forward map, as the four entries J00, J01, J10, J11.

    Stage one: d(x')/dx = a, d(x')/dy = -x y / (2 a) with a = sqrt(1 - y^2/2),
    and symmetrically for y' with b = sqrt(1 - x^2/2).  Stage two scales by
    s = exp(-r^2/2) with d(x'')/dx' = s (1 - x'^2), d(x'')/dy' = -x' y' s.
    """
    a = np.sqrt(1.0 - 0.5 * y * y)
    b = np.sqrt(1.0 - 0.5 * x * x)
    xp = x * a
    yp = y * b
    # a, b > 0 on the open square; guard the closed-boundary corners where
    # a or b can reach sqrt(1/2) but never 0, so no clamping is needed.
    dxp_dx = a
    dxp_dy = -x * y / (2.0 * a)
    dyp_dx = -x * y / (2.0 * b)
    dyp_dy = b
    s = np.exp(-0.5 * (xp * xp + yp * yp))
    oxx = s * (1.0 - xp * xp)
    oxy = -s * xp * yp
    oyy = s * (1.0 - yp * yp)
    j00 = oxx * dxp_dx + oxy * dyp_dx
    j01 = oxx * dxp_dy + oxy * dyp_dy
    j10 = oxy * dxp_dx + oyy * dyp_dx
    j11 = oxy * dxp_dy + oyy * dyp_dy
    return j00, j01, j10, j11


def inverse_arrays(xd, yd, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER):
    """Vectorized damped Newton inversion of the forward map.

    Returns (x, y, converged) where converged marks points whose residual
    infinity-norm dropped to tol or below.  Non-converged entries hold the
    best iterate found; callers decide whether that is an error.
    """
    xd = np.asarray(xd, dtype=np.float64)
    yd = np.asarray(yd, dtype=np.float64)
    shape = np.broadcast(xd, yd).shape
    xd = np.broadcast_to(xd, shape).ravel().copy()
    yd = np.broadcast_to(yd, shape).ravel().copy()

    # The map is a mild contraction, so the target itself is a good seed.
    x = np.clip(xd / MAX_MAPPED_RADIUS, -1.0, 1.0)
    y = np.clip(yd / MAX_MAPPED_RADIUS, -1.0, 1.0)

    fx, fy = forward_arrays(x, y)
    rx = fx - xd
    ry = fy - yd
    res = np.maximum(np.abs(rx), np.abs(ry))
    idx = np.flatnonzero(res > tol)

    for _ in range(max_iter):
        if idx.size == 0:
            break
        ax, ay = x[idx], y[idx]
        j00, j01, j10, j11 = _jacobian(ax, ay)
        det = j00 * j11 - j01 * j10
        # Near the rim the Jacobian degenerates; a floored determinant turns
        # the step into a (large) regularized one that damping then shrinks.
        det = np.where(np.abs(det) < 1e-300, 1e-300, det)
        arx, ary = rx[idx], ry[idx]
        sx = (j11 * arx - j01 * ary) / det
        sy = (-j10 * arx + j00 * ary) / det

        # Backtracking line search: accept the longest step in {1, 1/2, ...}
        # that strictly shrinks the residual, clipped to the square.
        scale = np.ones_like(sx)
        nx, ny = ax.copy(), ay.copy()
        nres = np.maximum(np.abs(arx), np.abs(ary))
        improved = np.zeros(ax.shape, dtype=bool)
        for _ in range(30):
            cx = np.clip(ax - scale * sx, -1.0, 1.0)
            cy = np.clip(ay - scale * sy, -1.0, 1.0)
            cfx, cfy = forward_arrays(cx, cy)
            crx = cfx - xd[idx]
            cry = cfy - yd[idx]
            cres = np.maximum(np.abs(crx), np.abs(cry))
            take = (cres < nres) & ~improved
            nx[take] = cx[take]
            ny[take] = cy[take]
            nres[take] = cres[take]
            improved |= take
            if np.all(improved):
                break
            scale *= 0.5
        x[idx] = nx
        y[idx] = ny
        nfx, nfy = forward_arrays(nx, ny)
        rx[idx] = nfx - xd[idx]
        ry[idx] = nfy - yd[idx]
        res[idx] = np.maximum(np.abs(rx[idx]), np.abs(ry[idx]))
        # Drop points that converged and abandon points that stalled; a
        # stalled point is at the numerical floor for its conditioning.
        idx = idx[improved & (res[idx] > tol)]

    converged = res <= tol
    return x.reshape(shape), y.reshape(shape), converged.reshape(shape)


def fisheye_inverse(
    q: NormalizedPoint, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> NormalizedPoint:
    """Invert the fisheye mapping at a single point.

    Raises OutsideMappedRegionError when q lies outside the mapped disk or
    the iteration cannot push the residual below tol.
    """
    x, y, ok = inverse_arrays(q.x, q.y, tol=tol, max_iter=max_iter)
    if not bool(ok):
        raise OutsideMappedRegionError(
            f"no preimage within tolerance {tol:g} for point ({q.x:g}, {q.y:g}); "
            f"mapped region is the disk of radius {MAX_MAPPED_RADIUS:.6f}"
        )
    return NormalizedPoint(float(x), float(y))


def to_polar(p: NormalizedPoint) -> PolarLocation:
    """Cartesian to polar; the origin maps to theta = 0 by convention."""
    rho = math.hypot(p.x, p.y)
    if rho >= 1.0:
        raise DomainError(f"radius {rho:g} is outside the open unit disk")
    if rho == 0.0:
        return PolarLocation(0.0, 0.0)
    return PolarLocation(math.degrees(math.atan2(p.y, p.x)), rho)


def from_polar(loc: PolarLocation) -> NormalizedPoint:
    """Polar to Cartesian.  rho must sit in [0, 1); theta wraps freely."""
    if not 0.0 <= loc.rho < 1.0:
        raise DomainError(f"rho {loc.rho:g} outside [0, 1)")
    t = math.radians(loc.theta_deg)
    return NormalizedPoint(loc.rho * math.cos(t), loc.rho * math.sin(t))


def transport_box(box: BoundingBox, samples_per_side: int = 128) -> BoundingBox:
    """Axis-aligned hull of a box pushed through the forward mapping.

    The image of a box is curvilinear, so the hull is estimated from a dense
    sampling of the box boundary.  samples_per_side controls the density;
    the default keeps the hull tight to well below a pixel at typical canvas
    sizes.
    """
    cx, cy = box.center.x, box.center.y
    hw, hh = box.half_width, box.half_height
    if hw <= 0.0 or hh <= 0.0:
        raise DomainError("bounding box must have positive extents")
    t = np.linspace(-1.0, 1.0, samples_per_side)
    ones = np.ones_like(t)
    bx = np.concatenate([t, t, -ones, ones]) * hw + cx
    by = np.concatenate([-ones, ones, t, t]) * hh + cy
    _check_square_domain(bx, by)
    mx, my = forward_arrays(bx, by)
    x0, x1 = float(mx.min()), float(mx.max())
    y0, y1 = float(my.min()), float(my.max())
    return BoundingBox(
        NormalizedPoint(0.5 * (x0 + x1), 0.5 * (y0 + y1)),
        0.5 * (x1 - x0),
        0.5 * (y1 - y0),
    )


@dataclass(frozen=True)
class ImageGeometry:
    """Pixel grid <-> normalized coordinate conversion for a raster.

    Pixel centers are addressed by (col, row) with row 0 at the top; the
    corner pixel centers land exactly on the corners of [-1, 1]^2.
    """

    width_px: int
    height_px: int

    @property
    def half_width(self) -> float:
        return (self.width_px - 1) / 2.0

    @property
    def half_height(self) -> float:
        return (self.height_px - 1) / 2.0

    def to_pixel(self, p: NormalizedPoint):
        return (
            self.half_width + p.x * self.half_width,
            self.half_height - p.y * self.half_height,
        )

    def to_normalized(self, col: float, row: float) -> NormalizedPoint:
        return NormalizedPoint(
            (col - self.half_width) / self.half_width,
            (self.half_height - row) / self.half_height,
        )
