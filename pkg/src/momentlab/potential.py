"""Grid solver for the centered convex potential of a log-concave measure.

The potential psi solves the transport equation

    exp(-rho(grad psi(x))) det Hess(psi)(x) = exp(-psi(x)),

equivalently F(psi) = log det Hess(psi) + psi - rho(grad psi) = 0, on a
truncated box [-S, S]^d with the asymptotic Neumann condition
grad psi = grad h_K on the box boundary (the gradient of the potential
approaches the support-function gradient far from the bulk).  The solver
is a damped Newton iteration on the finite-difference residual; the gauge
(mass one, zero barycenter of exp(-psi) dx) is restored after every
accepted step.  The box half-width starts at 8 R(K) and is refit from the
solved growth rate until the truncated tail mass is below 1e-8.

Also here: the Legendre dual phi = psi* on a grid over K (dimension-wise
convex-hull conjugation followed by a Newton polish of the gradient
inverse), and the second-difference scan used by the maximum-principle
checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import CubicSpline, RectBivariateSpline
from scipy.sparse.linalg import splu

from .measure import support_gradient_grid
from .quadrature import simpson_weights

__all__ = [
    "ConvexityLoss",
    "NoConvergence",
    "SingularLinearization",
    "GradientOutsideK",
    "Grid",
    "KGrid",
    "PotentialField",
    "LegendreField",
    "solve_potential",
    "residual",
    "transport_residual",
    "newton_step",
    "legendre_transform",
    "discrete_conjugate",
    "second_difference_scan",
    "write_field",
    "read_field",
]


class ConvexityLoss(RuntimeError):
    """Damping could not restore positive-definite discrete Hessians."""


class NoConvergence(RuntimeError):
    def __init__(self, message, final_residual=None):
        super().__init__(message)
        self.final_residual = final_residual


class SingularLinearization(RuntimeError):
    """The linearized Newton system is numerically singular."""


class GradientOutsideK(RuntimeError):
    """A node gradient left the closure of K beyond the projection tolerance."""


# ---------------------------------------------------------------------------
# Grids


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on [-S, S]^d with the origin as a node."""

    dimension: int
    S: float
    m: int

    def __post_init__(self):
        if self.m < 33 or self.m % 2 == 0:
            raise ValueError("grid needs an odd node count m >= 33")
        if self.S <= 0:
            raise ValueError("grid half-width must be positive")

    @property
    def h(self):
        return 2.0 * self.S / (self.m - 1)

    def axis(self):
        return np.linspace(-self.S, self.S, self.m)

    def points(self):
        ax = self.axis()
        if self.dimension == 1:
            return ax[:, None]
        xx, yy = np.meshgrid(ax, ax, indexing="ij")
        return np.stack([xx, yy], axis=-1)

    def simpson(self):
        w = simpson_weights(self.m, self.h)
        if self.dimension == 1:
            return w
        return w[:, None] * w[None, :]


@dataclass(frozen=True)
class KGrid:
    """Tensor grid over the bounding box of K with an inside mask."""

    body: object
    m: int
    axes: tuple = dataclass_field(init=False)
    mask: np.ndarray = dataclass_field(init=False)

    def __post_init__(self):
        if self.m < 33 or self.m % 2 == 0:
            raise ValueError("K-grid needs an odd node count m >= 33")
        lo, hi = self.body.bounding_box()
        axes = tuple(np.linspace(lo[k], hi[k], self.m) for k in range(self.body.dimension))
        object.__setattr__(self, "axes", axes)
        pts = self.points()
        gauges = self.body.gauge(pts.reshape(-1, self.dimension))
        mask = (gauges <= 1.0 + 1e-12).reshape(pts.shape[:-1])
        object.__setattr__(self, "mask", mask)

    @property
    def dimension(self):
        return self.body.dimension

    @property
    def spacings(self):
        return tuple(ax[1] - ax[0] for ax in self.axes)

    def points(self):
        if self.dimension == 1:
            return self.axes[0][:, None]
        xx, yy = np.meshgrid(self.axes[0], self.axes[1], indexing="ij")
        return np.stack([xx, yy], axis=-1)


# ---------------------------------------------------------------------------
# Finite differences (shared stencils: the residual and the cached node
# derivatives must discretize identically)


def fd_gradient(values, h):
    """Node gradients, centered interior / one-sided second-order edges."""
    if values.ndim == 1:
        return np.gradient(values, h, edge_order=2)[..., None]
    gx = np.gradient(values, h, axis=0, edge_order=2)
    gy = np.gradient(values, h, axis=1, edge_order=2)
    return np.stack([gx, gy], axis=-1)


def _second_diff(values, h, axis):
    v = np.moveaxis(values, axis, 0)
    out = np.empty_like(v)
    out[1:-1] = (v[:-2] - 2.0 * v[1:-1] + v[2:]) / h**2
    out[0] = (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / h**2
    out[-1] = (2.0 * v[-1] - 5.0 * v[-2] + 4.0 * v[-3] - v[-4]) / h**2
    return np.moveaxis(out, 0, axis)


def fd_hessian(values, h):
    """Node Hessians with the solver stencils (4-point mixed term)."""
    if values.ndim == 1:
        return _second_diff(values, h, 0)[..., None, None]
    hxx = _second_diff(values, h, 0)
    hyy = _second_diff(values, h, 1)
    hxy = np.gradient(np.gradient(values, h, axis=0, edge_order=2), h, axis=1, edge_order=2)
    hess = np.empty(values.shape + (2, 2))
    hess[..., 0, 0] = hxx
    hess[..., 0, 1] = hxy
    hess[..., 1, 0] = hxy
    hess[..., 1, 1] = hyy
    return hess


def min_eig_2x2(hess):
    a, b, c = hess[..., 0, 0], hess[..., 0, 1], hess[..., 1, 1]
    return 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b**2)


def tensor_min_eig(hess):
    if hess.shape[-1] == 1:
        return hess[..., 0, 0]
    return min_eig_2x2(hess)


def invert_tensor(hess):
    """Pointwise inverse of 1x1 / 2x2 symmetric tensors."""
    if hess.shape[-1] == 1:
        return 1.0 / hess
    a, b, c = hess[..., 0, 0], hess[..., 0, 1], hess[..., 1, 1]
    det = a * c - b * b
    inv = np.empty_like(hess)
    inv[..., 0, 0] = c / det
    inv[..., 0, 1] = -b / det
    inv[..., 1, 0] = -b / det
    inv[..., 1, 1] = a / det
    return inv


def _linear_interp(axes, arr, pts):
    """Multilinear interpolation of node data with trailing component axes."""
    d = len(axes)
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    comp_shape = arr.shape[d:]
    flat = arr.reshape(arr.shape[:d] + (-1,))
    idx = []
    frac = []
    for k in range(d):
        ax = axes[k]
        x = np.clip(pts[:, k], ax[0], ax[-1])
        i = np.clip(np.searchsorted(ax, x, side="right") - 1, 0, len(ax) - 2)
        idx.append(i)
        frac.append((x - ax[i]) / (ax[i + 1] - ax[i]))
    if d == 1:
        i, t = idx[0], frac[0]
        out = (1 - t)[:, None] * flat[i] + t[:, None] * flat[i + 1]
    else:
        i, j = idx
        tx, ty = frac
        out = (
            (1 - tx)[:, None] * ((1 - ty)[:, None] * flat[i, j] + ty[:, None] * flat[i, j + 1])
            + tx[:, None] * ((1 - ty)[:, None] * flat[i + 1, j] + ty[:, None] * flat[i + 1, j + 1])
        )
    return out.reshape(pts.shape[:1] + comp_shape)


# ---------------------------------------------------------------------------
# PotentialField


class PotentialField:
    """Grid representation of the convex potential psi.

    Node values come with cached finite-difference gradients and Hessians
    (solver stencils) and a cubic interpolant for off-node evaluation.
    """

    def __init__(self, grid, values, centered=False, validate=True):
        self.grid = grid
        self.values = np.asarray(values, dtype=float)
        expected = (grid.m,) if grid.dimension == 1 else (grid.m, grid.m)
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} does not match grid {expected}")
        self.centered = centered
        self.node_gradients = fd_gradient(self.values, grid.h)
        self.node_hessians = fd_hessian(self.values, grid.h)
        self._spline = self._build_spline()
        if validate and not self.is_convex():
            raise ConvexityLoss("field has non-positive-definite interior Hessians")

    def _build_spline(self):
        ax = self.grid.axis()
        if self.grid.dimension == 1:
            return CubicSpline(ax, self.values)
        return RectBivariateSpline(ax, ax, self.values, kx=3, ky=3, s=0)

    # -- evaluation --------------------------------------------------------

    def value(self, points):
        """Cubic-interpolated psi at arbitrary points, shape (n,)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.grid.dimension == 1:
            return np.asarray(self._spline(pts[:, 0]))
        return self._spline.ev(pts[:, 0], pts[:, 1])

    def value_derivative(self, points, orders):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.grid.dimension == 1:
            return np.asarray(self._spline(pts[:, 0], nu=orders[0]))
        return self._spline.ev(pts[:, 0], pts[:, 1], dx=orders[0], dy=orders[1])

    def gradient(self, points):
        """Linear interpolation of node gradients, shape (n, d)."""
        axes = (self.grid.axis(),) * self.grid.dimension
        return _linear_interp(axes, self.node_gradients, points)

    def hessian(self, points):
        """Linear interpolation of node Hessians, shape (n, d, d)."""
        axes = (self.grid.axis(),) * self.grid.dimension
        return _linear_interp(axes, self.node_hessians, points)

    def spline_gradient(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.grid.dimension == 1:
            return np.asarray(self._spline(pts[:, 0], nu=1))[:, None]
        gx = self._spline.ev(pts[:, 0], pts[:, 1], dx=1)
        gy = self._spline.ev(pts[:, 0], pts[:, 1], dy=1)
        return np.stack([gx, gy], axis=-1)

    def spline_hessian(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.grid.dimension == 1:
            return np.asarray(self._spline(pts[:, 0], nu=2))[:, None, None]
        hxx = self._spline.ev(pts[:, 0], pts[:, 1], dx=2)
        hxy = self._spline.ev(pts[:, 0], pts[:, 1], dx=1, dy=1)
        hyy = self._spline.ev(pts[:, 0], pts[:, 1], dy=2)
        out = np.empty((len(pts), 2, 2))
        out[:, 0, 0] = hxx
        out[:, 0, 1] = hxy
        out[:, 1, 0] = hxy
        out[:, 1, 1] = hyy
        return out

    # -- integrals and gauge -----------------------------------------------

    def mass(self):
        return float(np.sum(self.grid.simpson() * np.exp(-self.values)))

    def barycenter(self):
        w = self.grid.simpson() * np.exp(-self.values)
        pts = self.grid.points()
        return (w[..., None] * pts).reshape(-1, self.grid.dimension).sum(axis=0) / np.sum(w)

    def weighted_integral(self, node_values):
        """Integral of a node field against exp(-psi) dx (Simpson)."""
        return float(np.sum(self.grid.simpson() * np.exp(-self.values) * node_values))

    def is_convex(self):
        """Discrete convexity where it is numerically decidable.

        Positive-definite interior Hessians are required wherever the
        density exceeds the tail-mass cutoff; deeper in the tail the
        curvature underflows the representable range (second differences
        of O(max psi) values), so only sign violations beyond that noise
        floor count.
        """
        interior = self.interior_hessians()
        lam = tensor_min_eig(interior)
        rel = self.values - float(np.min(self.values))
        inner = rel[1:-1] if self.grid.dimension == 1 else rel[1:-1, 1:-1]
        gate = inner <= -np.log(1e-8)
        floor = (
            8.0 * self.grid.dimension * np.finfo(float).eps
            * max(1.0, float(np.max(np.abs(self.values)))) / self.grid.h**2
        )
        strict_ok = np.all(lam[gate] > 0.0) if np.any(gate) else True
        loose_ok = np.all(lam[~gate] > -floor) if np.any(~gate) else True
        return bool(strict_ok and loose_ok)

    def interior_hessians(self):
        if self.grid.dimension == 1:
            return self.node_hessians[1:-1]
        return self.node_hessians[1:-1, 1:-1]

    def interior_min_hessian_eig(self):
        return float(np.min(tensor_min_eig(self.interior_hessians())))

    def growth_fit(self):
        """Fit psi ~ a |x| + b along each outward axis ray (outer quarter).

        Returns (a_min, b_at_a_min, per-ray list).  a_min > 0 certifies the
        linear growth lower bound on the boundary nodes.
        """
        ax = self.grid.axis()
        m = self.grid.m
        quarter = max(4, m // 4)
        rays = []
        if self.grid.dimension == 1:
            profiles = [(np.abs(ax[-quarter:]), self.values[-quarter:]),
                        (np.abs(ax[:quarter]), self.values[:quarter])]
        else:
            mid = m // 2
            profiles = [
                (np.abs(ax[-quarter:]), self.values[-quarter:, mid]),
                (np.abs(ax[:quarter]), self.values[:quarter, mid]),
                (np.abs(ax[-quarter:]), self.values[mid, -quarter:]),
                (np.abs(ax[:quarter]), self.values[mid, :quarter]),
            ]
        for r, v in profiles:
            a, b = np.polyfit(r, v, 1)
            rays.append((float(a), float(-b)))
        a_min = min(a for a, _ in rays)
        b_max = max(b for _, b in rays)
        return a_min, b_max, rays

    def reliable_radius(self, factor=1e3):
        """Largest |x| with curvature safely above the round-off floor.

        Beyond this radius the node Hessians are round-off-dominated and
        should be rebuilt analytically rather than interpolated.
        """
        grid = self.grid
        floor = (
            8.0 * grid.dimension * np.finfo(float).eps
            * max(1.0, float(np.max(np.abs(self.values)))) / grid.h**2
        )
        lam = tensor_min_eig(self.node_hessians)
        ax = grid.axis()
        mid = grid.m // 2
        radius = grid.S
        if grid.dimension == 1:
            profiles = [(ax[mid:], lam[mid:]), (-ax[: mid + 1][::-1], lam[: mid + 1][::-1])]
        else:
            profiles = [
                (ax[mid:], lam[mid:, mid]),
                (-ax[: mid + 1][::-1], lam[: mid + 1, mid][::-1]),
                (ax[mid:], lam[mid, mid:]),
                (-ax[: mid + 1][::-1], lam[mid, : mid + 1][::-1]),
            ]
        for r, values in profiles:
            bad = values < factor * floor
            if np.any(bad):
                radius = min(radius, float(r[np.argmax(bad)]))
        return radius

    def tail_mass_estimate(self):
        """Boundary-flux estimate of the mass of exp(-psi) outside the box."""
        h = self.grid.h
        if self.grid.dimension == 1:
            slopes = [
                (self.values[1] - self.values[0]) / h,
                (self.values[-1] - self.values[-2]) / h,
            ]
            total = 0.0
            for edge, slope in zip((self.values[0], self.values[-1]), slopes):
                a = max(abs(slope), 1e-6)
                total += np.exp(-edge) / a
            return float(total)
        total = 0.0
        for vals, inner in (
            (self.values[-1, :], self.values[-2, :]),
            (self.values[0, :], self.values[1, :]),
            (self.values[:, -1], self.values[:, -2]),
            (self.values[:, 0], self.values[:, 1]),
        ):
            slopes = np.maximum(np.abs(vals - inner) / h, 1e-6)
            total += float(np.sum(h * np.exp(-vals) / slopes))
        return total

    def centered_copy(self, tight=False):
        """Gauge-normalized copy: mass one and barycenter at the origin.

        During Newton iteration translations smaller than a grid-cell
        fraction are skipped (re-interpolation injects noise every step);
        ``tight`` enforces the construction-level centering tolerance.
        """
        shift_tol = 2e-7 if tight else 0.02 * self.grid.h
        mass = self.mass()
        bary = self.barycenter()
        if abs(np.log(mass)) < 1e-13 and np.max(np.abs(bary)) < shift_tol:
            if self.centered:
                return self
            return PotentialField(self.grid, self.values, centered=True, validate=False)
        values = self.values + np.log(mass)
        for _ in range(4):
            interim = PotentialField(self.grid, values, centered=False, validate=False)
            b = interim.barycenter()
            if np.max(np.abs(b)) <= shift_tol:
                break
            values = _translate_values(self.grid, interim, b)
            values = values + np.log(
                float(np.sum(self.grid.simpson() * np.exp(-values)))
            )
        return PotentialField(self.grid, values, centered=True, validate=False)

    def sample(self, n, seed):
        """Draw from exp(-psi) dx (inverse CDF in 1D, rejection in 2D)."""
        rng = np.random.Generator(np.random.Philox(key=seed))
        ax = self.grid.axis()
        if self.grid.dimension == 1:
            dens = np.exp(-self.values)
            cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(ax))])
            cdf /= cdf[-1]
            return np.interp(rng.random(n), cdf, ax)[:, None]
        log_env = -float(np.min(self.values)) + 1e-9
        out = np.empty((n, 2))
        filled = 0
        S = self.grid.S
        for _ in range(100000):
            block = max(4 * (n - filled), 4096)
            proposals = rng.uniform(-S, S, size=(block, 2))
            u = rng.random(block)
            log_dens = -self.value(proposals)
            accept = np.log(np.maximum(u, 1e-300)) <= log_dens - log_env
            take = min(int(np.sum(accept)), n - filled)
            out[filled : filled + take] = proposals[accept][:take]
            filled += take
            if filled == n:
                return out
        raise RuntimeError("rejection sampling from exp(-psi) failed to fill the request")


def _extend_values(field, pts, effective_S=None):
    """Evaluate psi at points, extending convexly beyond the field's box.

    Outside the box the tangent extension carries an exponentially decaying
    curvature kappa(t) = kappa_edge * exp(-a t) along the outward ray,
    matching the decay the transport equation itself imposes (the log-det
    term balances -psi when the curvature decays at the growth rate).  This
    keeps warm-start residuals at the edge-residual level and the iterate
    strictly convex.
    """
    S_old = field.grid.S if effective_S is None else effective_S
    clipped = np.clip(pts, -S_old, S_old)
    vals = field.value(clipped)
    outside = pts - clipped
    t = np.linalg.norm(outside, axis=1)
    mask = t > 0
    if np.any(mask):
        grads = field.gradient(clipped[mask])
        hess = field.hessian(clipped[mask])
        n = outside[mask] / t[mask][:, None]
        slope = np.einsum("ij,ij->i", grads, n)
        a = np.maximum(slope, 0.2)
        curv = np.maximum(np.einsum("ij,ijk,ik->i", n, hess, n), 1e-8)
        at = a * t[mask]
        ramp = (t[mask] - (1.0 - np.exp(-at)) / a) / a
        vals[mask] = (
            vals[mask]
            + np.einsum("ij,ij->i", grads, outside[mask])
            + curv * ramp
        )
    return vals


def _translate_values(grid, field, shift):
    """psi(x + shift) re-sampled on the grid."""
    pts = grid.points().reshape(-1, grid.dimension) + np.asarray(shift)[None, :]
    vals = _extend_values(field, pts)
    shape = (grid.m,) if grid.dimension == 1 else (grid.m, grid.m)
    return vals.reshape(shape)


# ---------------------------------------------------------------------------
# Residual and Newton step


def _boundary_targets(grid, body):
    """Normal derivative data grad h_K . n on the box faces."""
    ax = grid.axis()
    if grid.dimension == 1:
        g_left = support_gradient_grid(body, np.array([[-grid.S]]))[0, 0]
        g_right = support_gradient_grid(body, np.array([[grid.S]]))[0, 0]
        return g_left, g_right
    targets = {}
    for face, sign, axis in (("xlo", -1, 0), ("xhi", 1, 0), ("ylo", -1, 1), ("yhi", 1, 1)):
        pts = np.zeros((grid.m, 2))
        pts[:, axis] = sign * grid.S
        pts[:, 1 - axis] = ax
        grads = support_gradient_grid(body, pts)
        targets[face] = grads[:, axis]
    return targets


def _bc_residual(grid, values, body):
    h = grid.h
    if grid.dimension == 1:
        g_left, g_right = _boundary_targets(grid, body)
        left = (values[1] - values[0]) / h - g_left
        right = (values[-1] - values[-2]) / h - g_right
        return np.array([left, right])
    t = _boundary_targets(grid, body)
    res = []
    res.append((values[1, :] - values[0, :]) / h - (-t["xlo"]))
    res.append((values[-1, :] - values[-2, :]) / h - t["xhi"])
    res.append((values[:, 1] - values[:, 0]) / h - (-t["ylo"]))
    res.append((values[:, -1] - values[:, -2]) / h - t["yhi"])
    return np.concatenate(res)


def transport_residual(field, rho_value, body=None, projection_tol=1e-9):
    """Interior residual F = log det Hess(psi) + psi - rho(grad psi).

    With a body, node gradients are radially projected onto closure(K)
    before evaluating rho;  an excursion beyond ``projection_tol`` raises
    :class:`GradientOutsideK`.  Returns (interior residual array, sup norm).
    """
    grid = field.grid
    hess = field.interior_hessians()
    if grid.dimension == 1:
        grads = field.node_gradients[1:-1]
        psi = field.values[1:-1]
    else:
        grads = field.node_gradients[1:-1, 1:-1]
        psi = field.values[1:-1, 1:-1]
    min_eig = tensor_min_eig(hess)
    if np.any(min_eig <= 0.0):
        raise ConvexityLoss("non-positive-definite Hessian inside the residual")
    if grid.dimension == 1:
        logdet = np.log(hess[..., 0, 0])
    else:
        det = hess[..., 0, 0] * hess[..., 1, 1] - hess[..., 0, 1] ** 2
        logdet = np.log(det)
    flat_grads = grads.reshape(-1, grid.dimension)
    if body is not None:
        gauges = body.gauge(flat_grads)
        excess = np.max(gauges) - 1.0
        if excess * max(1.0, body.outer_radius()) > projection_tol:
            raise GradientOutsideK(
                f"node gradient leaves closure(K) by gauge excess {excess:.3e}"
            )
        flat_grads = body.project(flat_grads)
    rho_vals = np.asarray(rho_value(flat_grads)).reshape(psi.shape)
    F = logdet + psi - rho_vals
    return F, float(np.max(np.abs(F)))


def residual(measure, field):
    """Public residual against a measure (projected rho evaluation)."""
    return transport_residual(field, measure.rho.value, body=measure.body)


def _projected_rho_terms(field, measure):
    """rho and grad rho at projected node gradients, full grid shape.

    The returned drift is grad rho times the projection indicator: where
    the node gradient sits outside closure(K) the projection saturates and
    the composite rho(proj(grad psi)) has zero derivative in the projected
    normal direction (masking the whole drift there is the semismooth
    choice; the saturated set vanishes as the iterate converges).
    """
    grid = field.grid
    flat = field.node_gradients.reshape(-1, grid.dimension)
    gauges = measure.body.gauge(flat)
    projected = measure.body.project(flat)
    rho_vals = measure.rho.value(projected)
    rho_grads = measure.rho.gradient(projected)
    rho_grads = rho_grads * (gauges <= 1.0)[:, None]
    lead = field.values.shape
    return rho_vals.reshape(lead), rho_grads.reshape(lead + (grid.dimension,))


def _tensor_eigvals(hess):
    """Eigenvalues of 1x1 / symmetric 2x2 node tensors, ascending."""
    if hess.shape[-1] == 1:
        lam = hess[..., 0, 0]
        return lam, lam
    a, b, c = hess[..., 0, 0], hess[..., 0, 1], hess[..., 1, 1]
    mean = 0.5 * (a + c)
    rad = np.sqrt(0.25 * (a - c) ** 2 + b**2)
    return mean - rad, mean + rad


def _interior_residual_raw(field, measure):
    """Raw interior residual with clamped log-det in the underflow zone.

    Positive-definiteness is required wherever the density exceeds the
    tail-mass cutoff; deeper in the tail the curvature may underflow the
    representable range, so its eigenvalues are floored for the log.
    """
    grid = field.grid
    hess = field.interior_hessians()
    lam_lo, lam_hi = _tensor_eigvals(hess)
    gate = _gate_mask(field)
    if np.any((lam_lo <= 0.0) & gate):
        return None, np.inf
    floor = _curvature_floor(field)
    logdet = np.log(np.maximum(lam_lo, floor))
    if grid.dimension == 1:
        psi = field.values[1:-1]
    else:
        logdet = logdet + np.log(np.maximum(lam_hi, floor))
        psi = field.values[1:-1, 1:-1]
    rho_vals, _ = _projected_rho_terms(field, measure)
    rho_int = rho_vals[1:-1] if grid.dimension == 1 else rho_vals[1:-1, 1:-1]
    F = logdet + psi - rho_int
    return F, float(np.max(np.abs(F)))


# nodes whose density falls below the truncated tail-mass target carry
# less weight than the solver's own truncation error; they remain unknowns
# but do not gate convergence (their log-det residual is also the first to
# drown in round-off)
TAIL_MASS_TARGET = 1e-8


def _gate_mask(field):
    rel = field.values - float(np.min(field.values))
    inner = rel[1:-1] if field.grid.dimension == 1 else rel[1:-1, 1:-1]
    return inner <= -np.log(TAIL_MASS_TARGET)


def _curvature_floor(field):
    """Smallest curvature representable by second differences of psi.

    Second differences of values of size max|psi| carry an absolute error
    of a few ulps of max|psi| divided by h^2; curvature below this level
    (the deep exponential tail) is machine noise with arbitrary sign.
    """
    grid = field.grid
    scale = max(1.0, float(np.max(np.abs(field.values))))
    return 8.0 * grid.dimension * np.finfo(float).eps * scale / grid.h**2


def _roundoff_floor(field):
    """Per-node round-off floor of the log-det residual (relative form)."""
    lam = tensor_min_eig(field.interior_hessians())
    floor = _curvature_floor(field)
    return floor / np.maximum(np.abs(lam), floor)


def _residual_norm(field, measure):
    """Interior residual, raw sup norm, and the gated convergence norm.

    The gated norm applies the round-off floor and ignores nodes below the
    tail-mass density cutoff; the raw norm covers every interior node.
    """
    F, sup = _interior_residual_raw(field, measure)
    if F is None:
        return None, np.inf, np.inf
    bc = _bc_residual(field.grid, field.values, measure.body)
    bc_sup = float(np.max(np.abs(bc)))
    gated = np.maximum(np.abs(F) - _roundoff_floor(field), 0.0)
    gated = np.where(_gate_mask(field), gated, 0.0)
    return F, max(sup, bc_sup), max(float(np.max(gated)), bc_sup)


def _residual_merit(field, measure):
    """Least-squares merit for the line search (Newton directions descend).

    Deep-tail nodes whose curvature sits at the round-off floor produce
    pure noise in the log-det residual; the merit uses the floored
    residual so that noise cannot block genuine progress.
    """
    F, sup = _interior_residual_raw(field, measure)
    if F is None:
        return np.inf, np.inf
    bc = _bc_residual(field.grid, field.values, measure.body)
    floored = np.maximum(np.abs(F) - _roundoff_floor(field), 0.0)
    floored = np.where(_gate_mask(field), floored, 0.0)
    merit = float(np.mean(floored**2)) + float(np.mean(bc**2))
    return merit, max(sup, float(np.max(np.abs(bc))))


def _assemble_jacobian_1d(field, measure, F):
    grid = field.grid
    m, h = grid.m, grid.h
    hess = field.node_hessians[1:-1, 0, 0]
    _, rho_grads = _projected_rho_terms(field, measure)
    drift = rho_grads[1:-1, 0].copy()
    rows, cols, data = [], [], []
    rhs = np.zeros(m)
    i = np.arange(1, m - 1)
    floor = _curvature_floor(field)
    frozen = hess < floor
    s = 1.0 / (np.maximum(hess, floor) * h**2)
    # curvature below the representable floor: freeze the node (u = 0)
    s[frozen] = 0.0
    drift[frozen] = 0.0
    rows.extend([i, i, i, i, i])
    cols.extend([i - 1, i, i + 1, i + 1, i - 1])
    data.extend([s, -2.0 * s + 1.0, s, -drift / (2 * h), drift / (2 * h)])
    rhs[1:-1] = np.where(frozen, 0.0, -F)
    bc = _bc_residual(grid, field.values, measure.body)
    rows.extend([np.array([0, 0]), np.array([m - 1, m - 1])])
    cols.extend([np.array([0, 1]), np.array([m - 2, m - 1])])
    data.extend([np.array([-1.0 / h, 1.0 / h]), np.array([-1.0 / h, 1.0 / h])])
    rhs[0] = -bc[0]
    rhs[-1] = -bc[1]
    matrix = sp.csc_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)
    )
    return matrix, rhs


def _assemble_jacobian_2d(field, measure, F):
    grid = field.grid
    m, h = grid.m, grid.h
    hess = field.interior_hessians().copy()
    floor = _curvature_floor(field)
    lam_lo, _ = _tensor_eigvals(hess)
    frozen = (lam_lo < floor).ravel()
    # regularize sub-floor tensors so the inverse stays finite; their rows
    # are frozen to the identity below anyway
    bad = frozen.reshape(lam_lo.shape)
    hess[bad] = np.eye(2)
    inv = invert_tensor(hess)
    a = inv[..., 0, 0].ravel()
    b = inv[..., 0, 1].ravel()
    c = inv[..., 1, 1].ravel()
    _, rho_grads = _projected_rho_terms(field, measure)
    d1 = rho_grads[1:-1, 1:-1, 0].ravel().copy()
    d2 = rho_grads[1:-1, 1:-1, 1].ravel().copy()
    a[frozen] = 0.0
    b[frozen] = 0.0
    c[frozen] = 0.0
    d1[frozen] = 0.0
    d2[frozen] = 0.0
    ii, jj = np.meshgrid(np.arange(1, m - 1), np.arange(1, m - 1), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    center = ii * m + jj
    h2 = h**2
    entries = [
        (center, a / h2 - d1 / (2 * h), -1, 0),
        (center, a / h2 + d1 / (2 * h), 1, 0),
        (center, c / h2 - d2 / (2 * h), 0, -1),
        (center, c / h2 + d2 / (2 * h), 0, 1),
        (center, -2.0 * a / h2 - 2.0 * c / h2 + 1.0, 0, 0),
        (center, b / (2 * h2), 1, 1),
        (center, b / (2 * h2), -1, -1),
        (center, -b / (2 * h2), 1, -1),
        (center, -b / (2 * h2), -1, 1),
    ]
    rows, cols, data = [], [], []
    for row, val, di, dj in entries:
        rows.append(row)
        cols.append((ii + di) * m + (jj + dj))
        data.append(val)
    rhs = np.zeros(m * m)
    rhs[center] = np.where(frozen, 0.0, -F.ravel())

    # boundary rows: one-sided normal derivative equations; corners get the
    # mean of the two adjoining face conditions
    t = _boundary_targets(grid, measure.body)
    values = field.values
    bc_count = np.zeros(m * m)
    bc_rhs = np.zeros(m * m)
    bc_entries = {}

    def add_face(node_idx, inner_idx, res):
        for n_i, in_i, r in zip(node_idx, inner_idx, res):
            bc_entries.setdefault(n_i, []).append((in_i, r))

    j_all = np.arange(m)
    faces = [
        ((m - 1) * m + j_all, (m - 2) * m + j_all,
         (values[-1, :] - values[-2, :]) / h - t["xhi"]),
        (0 * m + j_all, 1 * m + j_all,
         (values[1, :] - values[0, :]) / h - (-t["xlo"])),
        (j_all * m + (m - 1), j_all * m + (m - 2),
         (values[:, -1] - values[:, -2]) / h - t["yhi"]),
        (j_all * m + 0, j_all * m + 1,
         (values[:, 1] - values[:, 0]) / h - (-t["ylo"])),
    ]
    for node_idx, inner_idx, res in faces:
        add_face(node_idx, inner_idx, res)
    for node, conditions in bc_entries.items():
        k = len(conditions)
        for inner, res in conditions:
            sign = 1.0 if inner < node else -1.0
            rows.append(np.array([node, node]))
            cols.append(np.array([node, inner]))
            data.append(np.array([sign / (h * k), -sign / (h * k)]))
            bc_rhs[node] += -res / k
        bc_count[node] = 1.0
    rhs = np.where(bc_count > 0, bc_rhs, rhs)
    matrix = sp.csc_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m * m, m * m),
    )
    return matrix, rhs


def newton_step(measure, field, min_damping=2.0**-24):
    """One damped Newton step on the transport residual.

    Solves the linearization  tr[Hess(psi)^{-1} Hess(u)] + u
    - grad rho(grad psi) . grad u = -F  with the boundary condition rows
    frozen, then halves the step until the residual norm decreases and
    discrete convexity is preserved.  Returns (field, step norm, damping).
    """
    F, norm, gated = _residual_norm(field, measure)
    if F is None:
        raise ConvexityLoss("iterate has non-convex interior Hessians")
    if not np.isfinite(norm):
        raise NoConvergence("residual is not finite", final_residual=norm)
    grid = field.grid
    if grid.dimension == 1:
        matrix, rhs = _assemble_jacobian_1d(field, measure, F)
    else:
        matrix, rhs = _assemble_jacobian_2d(field, measure, F)
    # gauge fixing inside the linear system: differentiating the residual
    # identity in x shows J (d_k psi) = 0 at the solution up to boundary
    # couplings of order exp(-S), so translations form a near-kernel that
    # plain solves excite with O(1) coefficients.  The bordered
    # saddle-point system constrains updates orthogonal (in the
    # exp(-psi)-weighted inner product) to the translation modes, pinning
    # the gauge throughout the iteration.
    n = matrix.shape[0]
    weight = (field.grid.simpson() * np.exp(-field.values)).ravel()
    modes = np.stack(
        [weight * field.node_gradients[..., k].ravel() for k in range(grid.dimension)],
        axis=1,
    )
    matrix = sp.bmat(
        [[matrix, sp.csc_matrix(modes)],
         [sp.csc_matrix(modes.T), None]],
        format="csr",
    )
    rhs = np.concatenate([rhs, np.zeros(grid.dimension)])
    # row equilibration + iterative refinement: the system mixes stiff
    # tail rows (coefficients ~ 1/(psi'' h^2)) with O(1) bulk rows, and raw
    # LU round-off would corrupt the tail curvature corrections
    row_scale = 1.0 / np.maximum(np.abs(matrix).max(axis=1).toarray().ravel(), 1e-300)
    scaled = sp.diags(row_scale) @ matrix
    try:
        lu = splu(scaled.tocsc())
        update = lu.solve(row_scale * rhs)
        for _ in range(2):
            defect = rhs - matrix @ update
            update = update + lu.solve(row_scale * defect)
    except RuntimeError as exc:
        raise SingularLinearization(str(exc)) from exc
    if not np.all(np.isfinite(update)):
        raise SingularLinearization("linear solve produced non-finite update")
    shape = field.values.shape
    update = update[:n].reshape(shape)
    merit, _ = _residual_merit(field, measure)
    t = 1.0
    convexity_blocked = False
    while t >= min_damping:
        candidate = PotentialField(grid, field.values + t * update, validate=False)
        cand_merit, _ = _residual_merit(candidate, measure)
        if not np.isfinite(cand_merit):
            convexity_blocked = True
        elif cand_merit <= merit * (1.0 - 1e-4 * t):
            return candidate, float(t * np.max(np.abs(update))), t
        t *= 0.5
    if convexity_blocked:
        raise ConvexityLoss("damping could not restore convexity of the iterate")
    raise NoConvergence("line search failed to reduce the residual", final_residual=norm)


def _initial_values(grid, measure):
    """Convex start: capped quadratic with consistent linear growth.

    Inside the region where the quadratic's gradient x / sigma^2 stays in
    closure(K), psi_0 is |x|^2 / (2 sigma^2) + c (sigma^2 from tr Cov(mu)).
    Beyond it, the gradient must saturate at the boundary of K, so the
    profile continues along each ray with constant slope and exponentially
    decaying curvature.  A plain quadratic start makes the linearized
    operator exponentially unstable on large boxes (its growing modes have
    rate ~ psi'' |grad rho| / 2), which this construction avoids.
    """
    from .measure import moments

    mom = moments(measure)
    sigma2 = max(float(np.trace(np.atleast_2d(mom.covariance))) / grid.dimension, 1e-3)
    pts = grid.points().reshape(-1, grid.dimension)
    c = 0.5 * grid.dimension * np.log(2.0 * np.pi * sigma2)
    grads = pts / sigma2
    gamma = np.maximum(measure.body.gauge(grads), 1e-300)
    vals = np.sum(pts**2, axis=-1) / (2.0 * sigma2) + c
    outside = gamma > 1.0
    if np.any(outside):
        xb = pts[outside] / gamma[outside][:, None]
        r_star = np.linalg.norm(xb, axis=1)
        r = np.linalg.norm(pts[outside], axis=1)
        t = r - r_star
        slope = r_star / sigma2
        a = np.maximum(slope, 0.2)
        ramp = (t - (1.0 - np.exp(-a * t)) / a) / a
        vals[outside] = (
            r_star**2 / (2.0 * sigma2) + c + slope * t + ramp / sigma2 + 0.5e-6 * t**2
        )
    shape = (grid.m,) if grid.dimension == 1 else (grid.m, grid.m)
    values = vals.reshape(shape)
    # convexify kinked rays (polytopal bodies) with a small ridge if needed
    for ridge in (0.0, 1e-4, 1e-3, 1e-2):
        candidate = values + 0.5 * ridge * np.sum(grid.points() ** 2, axis=-1) / sigma2
        if PotentialField(grid, candidate, validate=False).is_convex():
            return candidate
    return values + 0.5 * 0.1 * np.sum(grid.points() ** 2, axis=-1) / sigma2


def _newton_drive(measure, values, grid, tol, max_iter, stall_ok=None):
    """Newton loop with per-step gauge restoration.

    Coarse or strongly truncated boxes have a gauge floor (the discrete
    solution's mass differs from one, so recentering re-injects residual);
    ``stall_ok`` accepts a stagnated iterate below that threshold, which is
    what intermediate continuation stages need.
    """
    field = PotentialField(grid, values, validate=False)
    history = []
    floored_history = []
    plateau = 0
    for _ in range(max_iter):
        # per-step gauge fix: the mass constant only (exact, no
        # re-interpolation); the argument translation happens once at the
        # very end of the solve, where it cannot erode iterate convexity
        field = PotentialField(grid, field.values + np.log(field.mass()), validate=False)
        _, raw, floored = _residual_norm(field, measure)
        history.append(raw)
        floored_history.append(floored)
        if floored <= tol:
            return field, history
        # an exact plateau is the mass-gauge two-cycle: the box's discrete
        # solution has mass != 1, recentering re-injects that constant
        if len(floored_history) >= 2 and abs(floored - floored_history[-2]) <= 1e-3 * floored:
            plateau += 1
            if plateau >= 3:
                if stall_ok is not None and floored <= stall_ok:
                    return field, history
                raise NoConvergence(
                    f"residual stagnated at {floored:.3e} (gauge/truncation floor)",
                    final_residual=floored,
                )
        else:
            plateau = 0
        try:
            field, _, _ = newton_step(measure, field)
        except NoConvergence:
            # no descent left: the iterate sits at the box's gauge floor
            if stall_ok is not None and floored <= stall_ok:
                return field, history
            raise
    field = PotentialField(grid, field.values + np.log(field.mass()), validate=False)
    _, raw, floored = _residual_norm(field, measure)
    history.append(raw)
    if floored <= tol or (stall_ok is not None and floored <= stall_ok):
        return field, history
    raise NoConvergence(
        f"no convergence after {max_iter} iterations (residual {floored:.3e})",
        final_residual=floored,
    )


def solve_potential(measure, m, tol=1e-7, S=None, max_iter=60, pilot_m=129,
                    tail_target=1e-8, max_refits=3):
    """Solve the transport equation for the centered potential.

    A pilot solve on the initial box (half-width 8 R(K)) fits the linear
    growth rate; the box is then resized so the estimated truncated tail
    mass falls below ``tail_target`` and the full-resolution solve runs on
    the final box.  Returns a centered PotentialField with solve metadata
    in ``field.info``.
    """
    R = measure.body.outer_radius()
    S_current = float(S) if S is not None else 8.0 * R
    m_pilot = min(m, pilot_m)
    if m_pilot % 2 == 0:
        m_pilot += 1
    # the pilot only needs the growth rate; coarse boxes carry a truncation
    # mass defect that caps the attainable centered residual
    pilot_tol = max(tol, 1e-3)
    # staged box continuation: the linearized operator has growing modes of
    # rate ~ psi'' |grad rho| / 2, so the quadratic start is only safe on a
    # small box; consistent extensions keep later stages well-conditioned
    stages = [f * R for f in (2.0, 3.5, 5.5) if f * R < S_current] + [S_current]
    grid = Grid(measure.dimension, stages[0], m_pilot)
    values = _initial_values(grid, measure)
    field, history = _newton_drive(measure, values, grid, pilot_tol, max_iter, stall_ok=0.05)
    for S_stage in stages[1:]:
        grid = Grid(measure.dimension, S_stage, m_pilot)
        values = _regrid_values(field, grid)
        field, hist = _newton_drive(measure, values, grid, pilot_tol, max_iter, stall_ok=0.05)
        history.extend(hist)
    refits = 0
    if S is None:
        for _ in range(max_refits):
            tail = field.tail_mass_estimate()
            if 1e-11 <= tail <= tail_target:
                break
            a_min, _, _ = field.growth_fit()
            if a_min <= 0:
                break
            S_new = max(S_current + np.log(max(tail, 1e-300) / (0.3 * tail_target)) / a_min, 4.0 * R)
            S_new = float(np.round(S_new, 2))
            if abs(S_new - S_current) < 0.05 * S_current:
                break
            S_current = S_new
            grid = Grid(measure.dimension, S_current, m_pilot)
            values = _regrid_values(field, grid)
            field, hist = _newton_drive(measure, values, grid, pilot_tol, max_iter, stall_ok=0.05)
            history.extend(hist)
            refits += 1
    if m != m_pilot or tol < pilot_tol:
        grid = Grid(measure.dimension, S_current, m)
        values = _regrid_values(field, grid)
        # a residual plateau below the discretization scale h^2 is the
        # instance's gauge floor (the discrete solution's mass defect that
        # recentering keeps re-injecting), not a solver failure
        field, hist = _newton_drive(
            measure, values, grid, tol, max_iter, stall_ok=max(tol, grid.h**2)
        )
        history.extend(hist)
    field = field.centered_copy(tight=True)
    _, raw_final, gated_final = _residual_norm(field, measure)
    field.info = {
        "S": S_current,
        "m": m,
        "h": field.grid.h,
        "tol": tol,
        "refits": refits,
        "residual_history": history,
        "residual_raw": raw_final,
        "residual_gated": gated_final,
        "tail_mass_estimate": field.tail_mass_estimate(),
    }
    _validate_solution(field, measure)
    return field


def _regrid_values(field, grid):
    """Warm-start values on a new grid from a solved field.

    The extension ray starts at 75% of the old box so the curvature and
    slope estimates come from nodes unpolluted by the old boundary rows.
    """
    pts = grid.points().reshape(-1, grid.dimension)
    effective_S = field.reliable_radius()
    if grid.S > field.grid.S:
        effective_S = min(effective_S, 0.75 * field.grid.S)
    vals = _extend_values(field, pts, effective_S=effective_S)
    shape = (grid.m,) if grid.dimension == 1 else (grid.m, grid.m)
    values = vals.reshape(shape)
    if PotentialField(grid, values, validate=False).is_convex():
        return values
    # tangential kinks of the ray extension (polytopal bodies) can leave a
    # marginally indefinite node; lift with the smallest ridge that works
    sq = np.sum(grid.points() ** 2, axis=-1)
    for ridge in (1e-12, 1e-9, 1e-6, 1e-3):
        candidate = values + 0.5 * ridge * sq
        if PotentialField(grid, candidate, validate=False).is_convex():
            return candidate
    return values + 0.5 * sq


def _validate_solution(field, measure, centering_tol=1e-6):
    if not field.is_convex():
        raise ConvexityLoss("solved field lost discrete convexity")
    mass = field.mass()
    bary = field.barycenter()
    if abs(mass - 1.0) > centering_tol or np.max(np.abs(bary)) > centering_tol:
        raise NoConvergence(
            f"gauge not restored: mass {mass:.3e}, barycenter {bary}",
            final_residual=None,
        )
    a_min, _, _ = field.growth_fit()
    if a_min <= 0:
        raise NoConvergence("solved field lacks linear growth at the boundary")


# ---------------------------------------------------------------------------
# Legendre transform


def discrete_conjugate(xs, values, ys):
    """Exact conjugate sup_i (y x_i - f_i) of sampled data, vectorized in y.

    Builds the lower convex hull of (x_i, f_i) and walks its slopes; ties
    resolve to the smallest index.  Linear time after the hull pass.
    """
    xs = np.asarray(xs, dtype=float)
    values = np.asarray(values, dtype=float)
    hull = [0]
    for i in range(1, len(xs)):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            lhs = (values[b] - values[a]) * (xs[i] - xs[b])
            rhs = (values[i] - values[b]) * (xs[b] - xs[a])
            if lhs >= rhs:
                hull.pop()
            else:
                break
        hull.append(i)
    hull = np.asarray(hull)
    hx, hv = xs[hull], values[hull]
    slopes = np.diff(hv) / np.diff(hx)
    ys = np.asarray(ys, dtype=float)
    seg = np.searchsorted(slopes, ys, side="left")
    idx = hull[seg]
    return ys * xs[idx] - values[idx], idx


def _conjugate_grid(field, kgrid):
    """Dimension-wise polyhedral conjugation of the node data."""
    ax = field.grid.axis()
    if field.grid.dimension == 1:
        phi, idx = discrete_conjugate(ax, field.values, kgrid.axes[0])
        xstar = ax[idx][:, None]
        return phi, xstar
    y2 = kgrid.axes[1]
    m_src = field.grid.m
    m2 = len(y2)
    inner = np.empty((m_src, m2))
    inner_idx = np.empty((m_src, m2), dtype=int)
    for i in range(m_src):
        g, idx = discrete_conjugate(ax, field.values[i, :], y2)
        inner[i, :] = g
        inner_idx[i, :] = idx
    y1 = kgrid.axes[0]
    m1 = len(y1)
    phi = np.empty((m1, m2))
    xstar = np.empty((m1, m2, 2))
    for j in range(m2):
        g, idx = discrete_conjugate(ax, -inner[:, j], y1)
        phi[:, j] = g
        xstar[:, j, 0] = ax[idx]
        xstar[:, j, 1] = ax[inner_idx[idx, j]]
    return phi, xstar


def _polish_conjugate(field, kgrid, phi0, xstar0, max_iter=60):
    """Newton-solve grad psi(x) = y from the polyhedral argmax.

    Uses the cubic-spline derivatives of psi, so the polished phi inherits
    the interpolant's smoothness and supports honest finite-difference
    Hessians on the K-grid.
    """
    pts = kgrid.points().reshape(-1, kgrid.dimension)
    x = xstar0.reshape(-1, kgrid.dimension).copy()
    S = field.grid.S
    scale = max(1.0, float(np.max(np.abs(pts))))
    clamped = np.zeros(len(pts), dtype=bool)
    for _ in range(max_iter):
        g = field.spline_gradient(x)
        err = g - pts
        if np.max(np.abs(err)) < 1e-12 * scale:
            break
        H = field.spline_hessian(x)
        if kgrid.dimension == 1:
            step = err[:, 0] / np.maximum(H[:, 0, 0], 1e-300)
            x[:, 0] -= step
        else:
            det = H[:, 0, 0] * H[:, 1, 1] - H[:, 0, 1] ** 2
            det = np.where(np.abs(det) < 1e-300, 1e-300, det)
            sx = (H[:, 1, 1] * err[:, 0] - H[:, 0, 1] * err[:, 1]) / det
            sy = (-H[:, 0, 1] * err[:, 0] + H[:, 0, 0] * err[:, 1]) / det
            x[:, 0] -= sx
            x[:, 1] -= sy
        hit = np.max(np.abs(x), axis=1) > S
        clamped |= hit
        np.clip(x, -S, S, out=x)
    phi = np.einsum("ij,ij->i", x, pts) - field.value(x)
    lead = kgrid.mask.shape
    return phi.reshape(lead), x.reshape(lead + (kgrid.dimension,)), clamped.reshape(lead)


class LegendreField:
    """The Legendre dual phi = psi* on a grid over closure(K).

    Node data: phi values, the inverse gradient map x* = grad phi, honest
    finite-difference Hessians of phi, and the composed inverse tensors
    (Hess phi)^{-1}(y) = Hess psi(grad phi(y)) used by the dual metric.
    """

    def __init__(self, kgrid, phi, xstar, hess_fd, inv_metric, clamped):
        self.kgrid = kgrid
        self.phi = phi
        self.xstar = xstar
        self.hess_fd = hess_fd
        self.inv_metric = inv_metric
        self.clamped = clamped

    @property
    def body(self):
        return self.kgrid.body

    def gradient(self, points):
        return _linear_interp(self.kgrid.axes, self.xstar, points)

    def value(self, points):
        return _linear_interp(self.kgrid.axes, self.phi[..., None], points)[..., 0]

    def inverse_metric(self, points):
        """(Hess phi)^{-1} at arbitrary points of K, shape (n, d, d)."""
        return _linear_interp(self.kgrid.axes, self.inv_metric, points)


def legendre_transform(field, kgrid, polish=True):
    """Legendre dual of a convex potential field on a K-grid.

    Dimension-wise convex-hull conjugation provides exact polyhedral
    values and maximizer brackets; the polish pass then solves the smooth
    first-order condition so duality holds at interpolation accuracy.
    """
    phi0, xstar0 = _conjugate_grid(field, kgrid)
    if polish:
        phi, xstar, clamped = _polish_conjugate(field, kgrid, phi0, xstar0)
    else:
        phi, xstar = phi0, xstar0
        clamped = np.zeros(kgrid.mask.shape, dtype=bool)
    spacings = kgrid.spacings
    if kgrid.dimension == 1:
        hess_fd = fd_hessian(phi, spacings[0])
    else:
        if abs(spacings[0] - spacings[1]) > 1e-12 * abs(spacings[0]):
            hxx = _second_diff(phi, spacings[0], 0)
            hyy = _second_diff(phi, spacings[1], 1)
            hxy = np.gradient(
                np.gradient(phi, spacings[0], axis=0, edge_order=2),
                spacings[1], axis=1, edge_order=2,
            )
            hess_fd = np.empty(phi.shape + (2, 2))
            hess_fd[..., 0, 0] = hxx
            hess_fd[..., 0, 1] = hxy
            hess_fd[..., 1, 0] = hxy
            hess_fd[..., 1, 1] = hyy
        else:
            hess_fd = fd_hessian(phi, spacings[0])
    flat_x = xstar.reshape(-1, kgrid.dimension)
    inv_metric = field.hessian(flat_x).reshape(kgrid.mask.shape + (kgrid.dimension,) * 2)
    return LegendreField(kgrid, phi, xstar, hess_fd, inv_metric, clamped)


# ---------------------------------------------------------------------------
# Second-difference scan


@dataclass
class ScanResult:
    max_value: float
    argmax: np.ndarray
    direction: np.ndarray
    min_value: float
    per_direction: dict


def second_difference_scan(field, eps, directions=None):
    """Scan delta_eps(theta) psi = psi(x+eps theta)+psi(x-eps theta)-2 psi(x).

    Maximizes over all grid nodes x with x +- eps theta inside the box and
    over the given unit directions.  Evaluation uses the cubic interpolant
    so eps below the grid spacing remains meaningful.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    grid = field.grid
    if directions is None:
        if grid.dimension == 1:
            directions = np.array([[1.0]])
        else:
            angles = np.linspace(0.0, np.pi, 8, endpoint=False)
            directions = np.column_stack([np.cos(angles), np.sin(angles)])
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    pts = grid.points().reshape(-1, grid.dimension)
    values = field.values.reshape(-1)
    best = -np.inf
    best_loc = None
    best_dir = None
    worst = np.inf
    per_direction = {}
    for theta in directions:
        theta = theta / np.linalg.norm(theta)
        plus = pts + eps * theta[None, :]
        minus = pts - eps * theta[None, :]
        ok = np.all(np.abs(plus) <= grid.S, axis=1) & np.all(np.abs(minus) <= grid.S, axis=1)
        if not np.any(ok):
            continue
        delta = field.value(plus[ok]) + field.value(minus[ok]) - 2.0 * values[ok]
        k = int(np.argmax(delta))
        per_direction[tuple(np.round(theta, 12))] = float(delta[k])
        if delta[k] > best:
            best = float(delta[k])
            best_loc = pts[ok][k]
            best_dir = theta.copy()
        worst = min(worst, float(np.min(delta)))
    return ScanResult(
        max_value=best, argmax=best_loc, direction=best_dir,
        min_value=worst, per_direction=per_direction,
    )


# ---------------------------------------------------------------------------
# Serialization: flat text table with a fixed header, stable across versions


def write_field(field, path, binary=False):
    """Dump a field: header (d, m, S, centered), then row-major values."""
    if binary:
        np.save(path, field.values)
        return
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# momentlab field v1\n")
        fh.write(
            f"d={field.grid.dimension} m={field.grid.m} "
            f"S={field.grid.S!r} centered={int(field.centered)}\n"
        )
        for v in field.values.ravel(order="C"):
            fh.write(f"{v!r}\n")


def read_field(path):
    with open(path, "r", encoding="ascii") as fh:
        magic = fh.readline()
        if not magic.startswith("# momentlab field"):
            raise ValueError(f"{path} is not a momentlab field dump")
        header = dict(item.split("=") for item in fh.readline().split())
        d = int(header["d"])
        m = int(header["m"])
        S = float(header["S"])
        centered = bool(int(header["centered"]))
        values = np.array([float(line) for line in fh], dtype=float)
    shape = (m,) if d == 1 else (m, m)
    grid = Grid(d, S, m)
    return PotentialField(grid, values.reshape(shape), centered=centered, validate=False)
