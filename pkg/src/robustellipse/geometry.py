"""Algebraic and geometric ellipse representations and conversions.

An ellipse is handled in two equivalent forms:

* the implicit conic vector ``v = [A, B, C, D, E, F]`` with
  ``A x^2 + B xy + C y^2 + D x + E y + F = 0`` and ``B^2 - 4AC < 0``;
* the geometric parameter vector ``q = [g, h, a, b, theta]`` (center,
  half-long axis, half-short axis, counter-clockwise rotation).

Conversions are canonicalized: ``a >= b > 0``, ``theta`` in ``(-pi/2, pi/2]``,
and conic vectors are reported rescaled so that ``A + C = 2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConicError, InvalidInputError

# Canonical trace of the reported quadratic part (A + C).
CONIC_TRACE = 2.0

# Below this relative axis gap the eigenvector direction is numerically
# meaningless, so the angle is reported as 0.
_CIRCLE_TIE = 1e-9


def canonical_angle(theta: float) -> float:
    """Wrap an axis angle into the canonical branch ``(-pi/2, pi/2]``."""
    return np.pi / 2.0 - (np.pi / 2.0 - float(theta)) % np.pi


def angle_difference(t1: float, t2: float) -> float:
    """Signed axis-angle difference wrapped into ``(-pi/2, pi/2]``.

    Ellipse axes are unoriented lines, so differences live modulo pi.
    """
    return canonical_angle(float(t1) - float(t2))


@dataclass(frozen=True)
class EllipseGeometry:
    """Geometric ellipse parameters.

    Canonical form: ``a >= b > 0`` and ``theta`` in ``(-pi/2, pi/2]``;
    circles carry ``theta = 0``.
    """

    g: float
    h: float
    a: float
    b: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.g, self.h, self.a, self.b, self.theta], dtype=float)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.g, self.h], dtype=float)


def design_row(point) -> np.ndarray:
    """Quadratic design row ``[x^2, xy, y^2, x, y, 1]`` of a single point."""
    x, y = float(point[0]), float(point[1])
    if not (np.isfinite(x) and np.isfinite(y)):
        raise InvalidInputError(f"non-finite point {point!r}")
    return np.array([x * x, x * y, y * y, x, y, 1.0])


def design_rows(points: np.ndarray) -> np.ndarray:
    """Vectorized :func:`design_row` for an ``(N, 2)`` point array."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InvalidInputError(f"expected an (N, 2) point array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("non-finite coordinates in point array")
    x, y = pts[:, 0], pts[:, 1]
    return np.column_stack([x * x, x * y, y * y, x, y, np.ones_like(x)])


@dataclass(frozen=True)
class PointSet:
    """Observed 2-D points together with their derived design rows."""

    points: np.ndarray  # (N, 2)
    rows: np.ndarray    # (N, 6)

    @classmethod
    def from_points(cls, points) -> "PointSet":
        pts = np.asarray(points, dtype=float)
        return cls(points=pts, rows=design_rows(pts))

    def __len__(self) -> int:
        return self.points.shape[0]


def residuals(v: np.ndarray, ps: PointSet) -> np.ndarray:
    """Algebraic residuals ``delta_i = v . u_i`` of a conic on a point set."""
    return ps.rows @ np.asarray(v, dtype=float)


def normalize_conic(v: np.ndarray) -> np.ndarray:
    """Rescale a conic vector to the canonical ``A + C = 2`` representative.

    The sign is fixed so the quadratic part is positive definite, which every
    valid ellipse admits.
    """
    v = np.asarray(v, dtype=float)
    trace = v[0] + v[2]
    if trace == 0.0:
        raise DegenerateConicError("conic has zero quadratic trace")
    return v * (CONIC_TRACE / trace)


def conic_to_geometry(v: np.ndarray) -> EllipseGeometry:
    """Convert an implicit conic vector to canonical geometric parameters.

    The center solves the gradient system ``2A g + B h + D = 0``,
    ``B g + 2C h + E = 0``; axes and angle come from the eigen-decomposition
    of ``[[A, B/2], [B/2, C]]`` with the constant term re-centered.

    Raises :class:`DegenerateConicError` for hyperbolas/parabolas
    (``B^2 - 4AC >= 0``) and imaginary or point ellipses.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (6,) or not np.all(np.isfinite(v)):
        raise InvalidInputError("conic vector must be 6 finite values")
    A, B, C, D, E, F = v
    disc = B * B - 4.0 * A * C
    if disc >= 0.0:
        raise DegenerateConicError(f"B^2 - 4AC = {disc:g} >= 0: not an ellipse")
    if A + C < 0.0:  # orient the quadratic part positive definite
        A, B, C, D, E, F = -v

    M = np.array([[A, B / 2.0], [B / 2.0, C]])
    center = np.linalg.solve(2.0 * M, -np.array([D, E]))
    g, h = center
    # Constant term re-centered: k = -(F + (D g + E h) / 2).
    k = -(F + 0.5 * (D * g + E * h))
    if k <= 0.0:
        raise DegenerateConicError("imaginary or point ellipse (non-positive re-centered constant)")

    evals, evecs = np.linalg.eigh(M)  # ascending; both > 0 since det > 0, trace > 0
    if evals[0] <= 0.0:
        raise DegenerateConicError("quadratic part is not positive definite")
    a = float(np.sqrt(k / evals[0]))  # smaller eigenvalue -> long axis
    b = float(np.sqrt(k / evals[1]))
    theta = canonical_angle(np.arctan2(evecs[1, 0], evecs[0, 0]))
    if (a - b) < _CIRCLE_TIE * a:
        theta = 0.0
    return EllipseGeometry(g=float(g), h=float(h), a=a, b=b, theta=theta)


def geometry_to_conic(q: EllipseGeometry) -> np.ndarray:
    """Expand geometric parameters to the canonical implicit conic vector.

    The result satisfies ``A + C = 2`` and round-trips through
    :func:`conic_to_geometry` to the input parameters.
    """
    a, b = float(q.a), float(q.b)
    if not (a >= b > 0.0):
        raise InvalidInputError(f"require a >= b > 0, got a={a}, b={b}")
    c, s = np.cos(q.theta), np.sin(q.theta)
    R = np.array([[c, s], [-s, c]])  # world frame -> ellipse frame
    M = R.T @ np.diag([1.0 / (a * a), 1.0 / (b * b)]) @ R
    center = np.array([q.g, q.h], dtype=float)
    DE = -2.0 * (M @ center)
    F = float(center @ M @ center) - 1.0
    v = np.array([M[0, 0], 2.0 * M[0, 1], M[1, 1], DE[0], DE[1], F])
    return normalize_conic(v)


def sample_ellipse(q: EllipseGeometry, n: int) -> PointSet:
    """Sample ``n`` noiseless points at equally spaced parameter angles.

    The first point sits at parameter angle 0 (the long-axis vertex).
    """
    if n < 1:
        raise InvalidInputError("need n >= 1 sample points")
    t = 2.0 * np.pi * np.arange(n) / n
    return PointSet.from_points(ellipse_points(q, t))


def ellipse_points(q: EllipseGeometry, t: np.ndarray) -> np.ndarray:
    """Points of an ellipse at given parameter angles, shape ``(len(t), 2)``."""
    t = np.asarray(t, dtype=float)
    c, s = np.cos(q.theta), np.sin(q.theta)
    ex = q.a * np.cos(t)
    ey = q.b * np.sin(t)
    return np.column_stack([q.g + c * ex - s * ey, q.h + s * ex + c * ey])
