"""Quadrature rules over convex bodies and over grid node data.

Integrals of analytic densities over a body use composite Gauss-Legendre
rules: per-cell order 4 on a tensor mesh for intervals and boxes, the same
tensor rule in polar coordinates for balls, and per-cell polygon clipping
followed by triangle rules for polygons.  Integrals of functions known
only through grid node values use composite Simpson weights, which is the
highest-order rule available on uniform node data.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "gauss_legendre",
    "interval_rule",
    "box_rule",
    "polar_rule",
    "polygon_rule",
    "simpson_weights",
    "clip_polygon_halfplane",
    "polygon_area",
]

DEFAULT_CELLS = 48
DEFAULT_ORDER = 4


def gauss_legendre(order):
    """Gauss-Legendre nodes and weights on [-1, 1]."""
    return np.polynomial.legendre.leggauss(order)


def _composite_1d(lo, hi, cells, order):
    nodes, weights = gauss_legendre(order)
    edges = np.linspace(lo, hi, cells + 1)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1:] - edges[:-1])
    points = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
    wts = (half[:, None] * weights[None, :]).ravel()
    return points, wts


def interval_rule(lo, hi, cells=DEFAULT_CELLS, order=DEFAULT_ORDER):
    """Composite rule on an interval; points shaped (N, 1)."""
    points, weights = _composite_1d(lo, hi, cells, order)
    return points[:, None], weights


def box_rule(lo, hi, cells=DEFAULT_CELLS, order=DEFAULT_ORDER):
    """Tensor composite rule on the box [lo_0,hi_0] x [lo_1,hi_1]."""
    px, wx = _composite_1d(lo[0], hi[0], cells, order)
    py, wy = _composite_1d(lo[1], hi[1], cells, order)
    xx, yy = np.meshgrid(px, py, indexing="ij")
    points = np.column_stack([xx.ravel(), yy.ravel()])
    weights = (wx[:, None] * wy[None, :]).ravel()
    return points, weights


def polar_rule(center, radius, cells=DEFAULT_CELLS, order=DEFAULT_ORDER):
    """Tensor composite rule on a disc, exact Jacobian r dr dtheta."""
    pr, wr = _composite_1d(0.0, radius, cells, order)
    pt, wt = _composite_1d(0.0, 2.0 * np.pi, cells, order)
    rr, tt = np.meshgrid(pr, pt, indexing="ij")
    points = np.column_stack(
        [center[0] + rr.ravel() * np.cos(tt.ravel()), center[1] + rr.ravel() * np.sin(tt.ravel())]
    )
    weights = (wr[:, None] * wt[None, :]).ravel() * np.repeat(pr, len(pt))
    return points, weights


def clip_polygon_halfplane(vertices, normal, offset):
    """Sutherland-Hodgman clip of a polygon against {x : x.normal <= offset}.

    ``vertices`` is an (n, 2) array in counterclockwise order; the result
    may be empty.
    """
    if len(vertices) == 0:
        return vertices
    out = []
    values = vertices @ normal - offset
    n = len(vertices)
    for i in range(n):
        j = (i + 1) % n
        vi, vj = vertices[i], vertices[j]
        fi, fj = values[i], values[j]
        if fi <= 0:
            out.append(vi)
        if (fi < 0 < fj) or (fj < 0 < fi):
            t = fi / (fi - fj)
            out.append(vi + t * (vj - vi))
    if not out:
        return np.empty((0, 2))
    return np.asarray(out)


def polygon_area(vertices):
    if len(vertices) < 3:
        return 0.0
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


_TRI_POINTS = None
_TRI_WEIGHTS = None


def _triangle_rule():
    """Order-4 tensor rule collapsed onto the reference triangle (Duffy)."""
    global _TRI_POINTS, _TRI_WEIGHTS
    if _TRI_POINTS is None:
        nodes, weights = gauss_legendre(DEFAULT_ORDER)
        u = 0.5 * (nodes + 1.0)
        wu = 0.5 * weights
        uu, vv = np.meshgrid(u, u, indexing="ij")
        ww = np.outer(wu, wu)
        # map square -> triangle {s,t>=0, s+t<=1}: s=u, t=v(1-u); Jacobian 1-u
        s = uu.ravel()
        t = (vv * (1.0 - uu)).ravel()
        _TRI_POINTS = np.column_stack([s, t])
        _TRI_WEIGHTS = (ww * (1.0 - uu)).ravel()
    return _TRI_POINTS, _TRI_WEIGHTS


def triangle_quadrature(a, b, c):
    """Quadrature points and weights on the triangle (a, b, c)."""
    ref, wts = _triangle_rule()
    points = a[None, :] + ref[:, 0:1] * (b - a)[None, :] + ref[:, 1:2] * (c - a)[None, :]
    area2 = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    return points, wts * area2


def polygon_rule(vertices, cells=DEFAULT_CELLS, order=DEFAULT_ORDER):
    """Composite rule on a convex polygon: cell grid clipped cell by cell."""
    vertices = np.asarray(vertices, dtype=float)
    lo = vertices.min(axis=0)
    hi = vertices.max(axis=0)
    # precompute edge halfplanes (outward normals)
    normals = []
    offsets = []
    n = len(vertices)
    for i in range(n):
        edge = vertices[(i + 1) % n] - vertices[i]
        normal = np.array([edge[1], -edge[0]])
        normal /= np.linalg.norm(normal)
        normals.append(normal)
        offsets.append(normal @ vertices[i])
    xs = np.linspace(lo[0], hi[0], cells + 1)
    ys = np.linspace(lo[1], hi[1], cells + 1)
    all_points = []
    all_weights = []
    for i in range(cells):
        for j in range(cells):
            cell = np.array(
                [
                    [xs[i], ys[j]],
                    [xs[i + 1], ys[j]],
                    [xs[i + 1], ys[j + 1]],
                    [xs[i], ys[j + 1]],
                ]
            )
            poly = cell
            for normal, offset in zip(normals, offsets):
                poly = clip_polygon_halfplane(poly, normal, offset)
                if len(poly) == 0:
                    break
            if len(poly) < 3:
                continue
            centroid = poly.mean(axis=0)
            for k in range(len(poly)):
                pts, wts = triangle_quadrature(centroid, poly[k], poly[(k + 1) % len(poly)])
                all_points.append(pts)
                all_weights.append(wts)
    return np.concatenate(all_points), np.concatenate(all_weights)


def simpson_weights(m, h):
    """Composite Simpson weights for m (odd) uniformly spaced nodes."""
    if m < 3 or m % 2 == 0:
        raise ValueError("Simpson weights need an odd node count >= 3")
    w = np.ones(m)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (h / 3.0)
