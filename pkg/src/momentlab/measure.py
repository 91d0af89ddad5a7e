"""Convex bodies and log-concave probability measures.

A measure is carried by a bounded convex body K containing the origin and
has density exp(-rho) with rho convex and smooth.  Construction always
normalizes the total mass to one and translates the body so that the
barycenter sits at the origin; downstream solvers assume and assert both.
The body supplies the support function h_K, the outer radius R(K), the
Minkowski gauge, and quadrature rules used for every K-integral.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quadrature

__all__ = [
    "ZeroDirection",
    "DegenerateSupport",
    "ConvexBody",
    "LogConcaveMeasure",
    "MomentVector",
    "CallableRho",
    "support_function",
    "normalize_and_center",
    "sample",
    "moments",
]


class ZeroDirection(ValueError):
    """Support-function gradient requested at the zero vector."""


class DegenerateSupport(ValueError):
    """Body has empty interior or does not contain the origin."""


def _as_point(x, d):
    x = np.asarray(x, dtype=float)
    if x.shape != (d,):
        raise ValueError(f"expected a vector of length {d}, got shape {x.shape}")
    return x


class ConvexBody:
    """Bounded convex body in R^d, d in {1, 2}.

    Kinds:
      * ``box`` - axis-aligned box given by per-axis bounds (lo_i, hi_i);
      * ``ball`` - disc with center and radius (1D degenerates to a box);
      * ``polygon`` - convex vertices in counterclockwise order (2D only).

    The origin must lie in the interior.
    """

    def __init__(self, kind, *, lo=None, hi=None, center=None, radius=None, vertices=None):
        self.kind = kind
        if kind == "box":
            self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
            self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
            if self.lo.shape != self.hi.shape or self.lo.ndim != 1:
                raise DegenerateSupport("box bounds must be matching vectors")
            self.dimension = len(self.lo)
            if np.any(self.lo >= self.hi):
                raise DegenerateSupport("box has empty interior")
            if np.any(self.lo >= 0) or np.any(self.hi <= 0):
                raise DegenerateSupport("box must contain the origin in its interior")
        elif kind == "ball":
            self.center = np.atleast_1d(np.asarray(center, dtype=float))
            self.radius = float(radius)
            self.dimension = len(self.center)
            if self.radius <= 0:
                raise DegenerateSupport("ball needs positive radius")
            if np.linalg.norm(self.center) >= self.radius:
                raise DegenerateSupport("ball must contain the origin in its interior")
        elif kind == "polygon":
            self.vertices = np.asarray(vertices, dtype=float)
            if self.vertices.ndim != 2 or self.vertices.shape[1] != 2 or len(self.vertices) < 3:
                raise DegenerateSupport("polygon needs at least three 2D vertices")
            self.dimension = 2
            self._check_polygon()
        else:
            raise ValueError(f"unknown body kind {kind!r}")
        if self.dimension not in (1, 2):
            raise DegenerateSupport("only dimensions 1 and 2 are supported")

    # -- geometry ----------------------------------------------------------

    def _check_polygon(self):
        v = self.vertices
        n = len(v)
        cross = []
        for i in range(n):
            a = v[(i + 1) % n] - v[i]
            b = v[(i + 2) % n] - v[(i + 1) % n]
            cross.append(a[0] * b[1] - a[1] * b[0])
        cross = np.asarray(cross)
        if np.any(cross <= 0):
            raise DegenerateSupport("polygon vertices must be in convex counterclockwise position")
        normals, offsets = self._polygon_faces()
        if np.any(offsets <= 0):
            raise DegenerateSupport("polygon must contain the origin in its interior")

    def _polygon_faces(self):
        v = self.vertices
        n = len(v)
        normals = np.empty((n, 2))
        offsets = np.empty(n)
        for i in range(n):
            edge = v[(i + 1) % n] - v[i]
            normal = np.array([edge[1], -edge[0]])
            normal /= np.linalg.norm(normal)
            normals[i] = normal
            offsets[i] = normal @ v[i]
        return normals, offsets

    def outer_radius(self):
        """R(K) = sup_{x in K} |x|, exact from the parameters."""
        if self.kind == "box":
            corners = self._corners()
            return float(np.max(np.linalg.norm(corners, axis=1)))
        if self.kind == "ball":
            return float(np.linalg.norm(self.center) + self.radius)
        return float(np.max(np.linalg.norm(self.vertices, axis=1)))

    def _corners(self):
        if self.dimension == 1:
            return np.array([[self.lo[0]], [self.hi[0]]])
        return np.array(
            [
                [self.lo[0], self.lo[1]],
                [self.hi[0], self.lo[1]],
                [self.hi[0], self.hi[1]],
                [self.lo[0], self.hi[1]],
            ]
        )

    def bounding_box(self):
        if self.kind == "box":
            return self.lo.copy(), self.hi.copy()
        if self.kind == "ball":
            return self.center - self.radius, self.center + self.radius
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def gauge(self, points):
        """Minkowski functional ||x||_K (0 at the origin, 1 on the boundary)."""
        points = np.asarray(points, dtype=float)
        squeeze = points.ndim == 1
        pts = np.atleast_2d(points)
        if self.kind == "box":
            ratios = np.where(pts > 0, pts / self.hi, np.where(pts < 0, pts / self.lo, 0.0))
            out = ratios.max(axis=1)
        elif self.kind == "ball":
            c, r = self.center, self.radius
            norm2 = np.einsum("ij,ij->i", pts, pts)
            dot = pts @ c
            disc = np.sqrt(np.maximum(dot**2 - norm2 * (c @ c - r**2), 0.0))
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (dot + disc) / norm2
                out = np.where(norm2 > 0, 1.0 / np.where(t > 0, t, np.inf), 0.0)
        else:
            normals, offsets = self._polygon_faces()
            out = np.max((pts @ normals.T) / offsets[None, :], axis=1)
            out = np.maximum(out, 0.0)
        return out[0] if squeeze else out

    def contains(self, points, tol=0.0):
        return self.gauge(points) <= 1.0 + tol

    def project(self, points, scale=1.0):
        """Radially project points onto scale*K (identity inside)."""
        points = np.asarray(points, dtype=float)
        squeeze = points.ndim == 1
        pts = np.atleast_2d(points).copy()
        g = self.gauge(pts)
        mask = g > scale
        if np.any(mask):
            pts[mask] *= (scale / g[mask])[:, None]
        return pts[0] if squeeze else pts

    def translate(self, shift):
        shift = np.asarray(shift, dtype=float)
        if self.kind == "box":
            return ConvexBody("box", lo=self.lo - shift, hi=self.hi - shift)
        if self.kind == "ball":
            return ConvexBody("ball", center=self.center - shift, radius=self.radius)
        return ConvexBody("polygon", vertices=self.vertices - shift[None, :])

    def quadrature(self, cells=quadrature.DEFAULT_CELLS, order=quadrature.DEFAULT_ORDER):
        """Points and weights integrating smooth functions over K."""
        if self.kind == "box":
            if self.dimension == 1:
                return quadrature.interval_rule(self.lo[0], self.hi[0], cells, order)
            return quadrature.box_rule(self.lo, self.hi, cells, order)
        if self.kind == "ball":
            if self.dimension == 1:
                return quadrature.interval_rule(
                    self.center[0] - self.radius, self.center[0] + self.radius, cells, order
                )
            return quadrature.polar_rule(self.center, self.radius, cells, order)
        return quadrature.polygon_rule(self.vertices, cells, order)

    def __repr__(self):
        if self.kind == "box":
            return f"ConvexBody(box, lo={self.lo}, hi={self.hi})"
        if self.kind == "ball":
            return f"ConvexBody(ball, center={self.center}, radius={self.radius})"
        return f"ConvexBody(polygon, {len(self.vertices)} vertices)"


def support_function(body, x):
    """Support value h_K(x) = sup_{y in K} x.y and a maximizing point.

    The gradient branch requires x != 0; ties (box faces, polygon edge
    normals) resolve to the lexicographically smallest maximizing vertex.
    """
    x = _as_point(x, body.dimension)
    if body.kind == "ball":
        norm = np.linalg.norm(x)
        value = float(x @ body.center + body.radius * norm)
        if norm == 0.0:
            raise ZeroDirection("support gradient undefined at the zero direction")
        return value, body.center + body.radius * x / norm
    if body.kind == "box":
        corners = body._corners()
    else:
        corners = body.vertices
    values = corners @ x
    best = np.max(values)
    if np.all(x == 0.0):
        raise ZeroDirection("support gradient undefined at the zero direction")
    candidates = corners[values >= best - 1e-14 * (1.0 + abs(best))]
    order = np.lexsort(tuple(candidates[:, k] for k in range(body.dimension - 1, -1, -1)))
    return float(best), candidates[order[0]]


def support_gradient_grid(body, points):
    """Vectorized maximizer of y -> x.y over K for an array of directions."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if body.kind == "ball":
        norms = np.linalg.norm(points, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return body.center[None, :] + body.radius * points / norms
    corners = body._corners() if body.kind == "box" else body.vertices
    values = points @ corners.T
    idx = np.argmax(values, axis=1)
    return corners[idx]


class CallableRho:
    """Adapter bundling value/gradient/Hessian callables for rho."""

    def __init__(self, value, gradient, hessian):
        self._value = value
        self._gradient = gradient
        self._hessian = hessian

    def value(self, points):
        return np.asarray(self._value(np.asarray(points, dtype=float)), dtype=float)

    def gradient(self, points):
        return np.asarray(self._gradient(np.asarray(points, dtype=float)), dtype=float)

    def hessian(self, points):
        return np.asarray(self._hessian(np.asarray(points, dtype=float)), dtype=float)


class _ShiftedRho:
    """rho(x + shift) + constant, preserving derivative evaluators."""

    def __init__(self, base, shift, constant):
        self.base = base
        self.shift = np.asarray(shift, dtype=float)
        self.constant = float(constant)

    def value(self, points):
        return self.base.value(np.asarray(points, dtype=float) + self.shift) + self.constant

    def gradient(self, points):
        return self.base.gradient(np.asarray(points, dtype=float) + self.shift)

    def hessian(self, points):
        return self.base.hessian(np.asarray(points, dtype=float) + self.shift)


@dataclass
class MomentVector:
    """Mean, covariance and directional second moments of a measure."""

    mean: np.ndarray
    covariance: np.ndarray

    def directional_second_moment(self, theta):
        theta = np.asarray(theta, dtype=float)
        return float(theta @ self.covariance @ theta + (self.mean @ theta) ** 2)


@dataclass
class LogConcaveMeasure:
    """Probability measure exp(-rho) dx on a convex body, centered.

    ``shift`` and ``constant`` record the translation and additive
    normalization applied at construction (for the run manifest).
    Instances are immutable after construction and safe to share.
    """

    body: ConvexBody
    rho: object
    eps0: float
    shift: np.ndarray
    constant: float
    quad_points: np.ndarray = field(repr=False)
    quad_weights: np.ndarray = field(repr=False)

    @property
    def dimension(self):
        return self.body.dimension

    def density(self, points):
        return np.exp(-self.rho.value(points))

    def mass(self):
        return float(np.sum(self.quad_weights * self.density(self.quad_points)))

    def barycenter(self):
        dens = self.quad_weights * self.density(self.quad_points)
        return dens @ self.quad_points

    def check_uniform_convexity(self, tol=1e-9):
        """Spot-check Hessian(rho) >= eps0 * Id on the quadrature nodes."""
        if self.eps0 == 0.0:
            return True
        hess = self.rho.hessian(self.quad_points)
        if self.dimension == 1:
            min_eig = hess.reshape(len(self.quad_points), -1)[:, 0]
        else:
            a, b, c = hess[:, 0, 0], hess[:, 0, 1], hess[:, 1, 1]
            min_eig = 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b**2)
        return bool(np.all(min_eig >= self.eps0 - tol))

    def check_fradelizi(self, tol=1e-9):
        """rho(0) <= d + min rho, a consequence of the zero barycenter."""
        origin = np.zeros((1, self.dimension))
        rho0 = float(self.rho.value(origin)[0])
        rho_min = float(np.min(self.rho.value(self.quad_points)))
        return rho0 <= self.dimension + rho_min + tol


def normalize_and_center(rho_raw, body, eps0=0.0, cells=quadrature.DEFAULT_CELLS,
                         order=quadrature.DEFAULT_ORDER, max_rounds=8):
    """Build a centered probability measure from a raw convex exponent.

    Translates the body so the barycenter of exp(-rho) dx lands at the
    origin and folds the normalizing constant into rho.  The translation
    and constant are recorded on the returned measure.
    """
    if body.dimension not in (1, 2):
        raise DegenerateSupport("only dimensions 1 and 2 are supported")
    total_shift = np.zeros(body.dimension)
    current_body = body
    for _ in range(max_rounds):
        points, weights = current_body.quadrature(cells, order)
        dens = np.exp(-(rho_raw.value(points + total_shift)))
        mass = float(np.sum(weights * dens))
        if not np.isfinite(mass) or mass <= 0:
            raise DegenerateSupport("density is not integrable on the body")
        bary = (weights * dens) @ points / mass
        scale = max(1.0, current_body.outer_radius())
        if np.linalg.norm(bary) < 1e-13 * scale:
            break
        total_shift = total_shift + bary
        current_body = current_body.translate(bary)
    constant = np.log(mass)
    rho = _ShiftedRho(rho_raw, total_shift, constant)
    measure = LogConcaveMeasure(
        body=current_body,
        rho=rho,
        eps0=float(eps0),
        shift=total_shift,
        constant=constant,
        quad_points=points,
        quad_weights=weights,
    )
    if eps0 > 0 and not measure.check_uniform_convexity():
        raise ValueError("declared eps0 exceeds the uniform convexity of rho on the grid")
    return measure


def sample(measure, n, seed):
    """Draw n i.i.d. points from the measure, deterministic given seed.

    1D uses the inverse of a finely tabulated CDF; 2D uses rejection from
    the uniform envelope on the bounding box.  Each call owns a private
    counter-based generator.
    """
    if n < 1:
        raise ValueError("need n >= 1 samples")
    rng = np.random.Generator(np.random.Philox(key=seed))
    d = measure.dimension
    lo, hi = measure.body.bounding_box()
    if d == 1:
        xs = np.linspace(lo[0], hi[0], 8193)
        dens = measure.density(xs[:, None])
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(xs))])
        cdf /= cdf[-1]
        u = rng.random(n)
        return np.interp(u, cdf, xs)[:, None]
    rho_q = measure.rho.value(measure.quad_points)
    margin = 0.01 * (np.max(rho_q) - np.min(rho_q)) + 1e-6
    log_envelope = -(np.min(rho_q) - margin)
    out = np.empty((n, 2))
    filled = 0
    span = hi - lo
    for _ in range(10000):
        block = max(2 * (n - filled), 1024)
        proposals = lo[None, :] + rng.random((block, 2)) * span[None, :]
        u = rng.random(block)
        inside = measure.body.contains(proposals)
        log_dens = np.full(block, -np.inf)
        if np.any(inside):
            log_dens[inside] = -measure.rho.value(proposals[inside])
            if np.any(log_dens[inside] > log_envelope + 1e-12):
                raise RuntimeError("rejection envelope violated; increase the safety margin")
        accept = np.log(np.maximum(u, 1e-300)) <= log_dens - log_envelope
        take = min(int(np.sum(accept)), n - filled)
        out[filled : filled + take] = proposals[accept][:take]
        filled += take
        if filled == n:
            return out
    raise RuntimeError("rejection sampling failed to fill the request")


def moments(measure):
    """Quadrature moments of the measure."""
    dens = measure.quad_weights * measure.density(measure.quad_points)
    mass = float(np.sum(dens))
    mean = dens @ measure.quad_points / mass
    centered = measure.quad_points - mean[None, :]
    cov = (centered * dens[:, None]).T @ centered / mass
    cov = 0.5 * (cov + cov.T)
    return MomentVector(mean=mean, covariance=cov)
