"""Patch parametrizations, trim curves, manufactured problems, and the
midline model of the artificial interface.

Two geometry families are provided.  The surface family maps the unit square
onto a segment of a torus; the inner disc patch can be shifted a distance
``delta`` along the surface normal at the map midpoint, producing a gap or
overlap at the trim curve.  The planar family keeps the unit square in the
z = 0 plane and shifts the disc patch in-plane.  Both share the same trim
level set: a circle of radius 0.9 about the reference origin, so the disc
patch is the quarter disc at the corner of the reference square.

The artificial interface between the two perturbed boundary curves is
represented by dense samples of both curves; queries return the midpoint of
the two nearest samples and the averaged tangent.  A per-cell tensor Lagrange
interpolant of the tangent outer product supplies the projector used by the
hybrid-variable stabilization.
"""

import numpy as np
from scipy.spatial import cKDTree

TRIM_RADIUS = 0.9


# ---------------------------------------------------------------------------
# trim level set (shared by both geometry families)

def trim_levelset(x, y):
    """Signed trim function; negative inside the disc patch."""
    return x * x + y * y - TRIM_RADIUS**2


def trim_levelset_grad(x, y):
    return 2.0 * x, 2.0 * y


def trim_curve(theta):
    """Reference trim arc, counterclockwise; theta in [0, pi/2]."""
    theta = np.asarray(theta, dtype=float)
    return TRIM_RADIUS * np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def trim_curve_tangent(theta):
    theta = np.asarray(theta, dtype=float)
    return np.stack([-np.sin(theta), np.cos(theta)], axis=-1)


# ---------------------------------------------------------------------------
# patches

class PatchGeometry:
    """Parametric patch on the reference square with a circular trim.

    Subclasses fix the map F, its Jacobian, and the rigid shift.  The kept
    side of the trim level set is +1 for the outer patch and -1 for the disc
    patch.  Dirichlet conditions are applied on all four reference-square
    edges (the trim clips away edge parts owned by the other patch).
    """

    kept_sign = 1
    dirichlet_edges = (True, True, True, True)
    name = "patch"

    def map(self, xy):
        raise NotImplementedError

    def jacobian(self, xy):
        raise NotImplementedError

    def metric(self, xy):
        """First fundamental form G = DF^T DF, shape (..., 2, 2)."""
        J = self.jacobian(xy)
        return np.einsum("...ki,...kj->...ij", J, J)

    def levelset(self, xy):
        xy = np.asarray(xy, dtype=float)
        return trim_levelset(xy[..., 0], xy[..., 1])

    def levelset_grad(self, xy):
        xy = np.asarray(xy, dtype=float)
        gx, gy = trim_levelset_grad(xy[..., 0], xy[..., 1])
        return np.stack([gx, gy], axis=-1)

    def kept(self, phi):
        """True where the level-set value lies on this patch's kept side."""
        return self.kept_sign * np.asarray(phi) > 0

    def boundary_samples(self, spacing):
        """Sample the mapped trim curve at roughly uniform physical spacing.

        Returns ``(points (n,3), tangents (n,3))`` with tangents oriented by
        increasing arc parameter (counterclockwise in reference coordinates),
        which keeps tangent averages of the two patches sign-coherent.
        """
        n = 64
        for _ in range(12):
            theta = np.linspace(0.0, 0.5 * np.pi, n)
            pts = self.map(trim_curve(theta))
            seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
            if seg.max() <= spacing:
                break
            n = int(np.ceil(n * seg.max() / spacing)) + 1
        tref = trim_curve_tangent(theta)
        J = self.jacobian(trim_curve(theta))
        tan = np.einsum("...kj,...j->...k", J, tref)
        tan /= np.linalg.norm(tan, axis=-1, keepdims=True)
        return pts, tan


class TorusPatch(PatchGeometry):
    """Unit square mapped onto a torus segment; optional normal shift."""

    def __init__(self, R=1.0, r=0.3, delta=0.0, inner=False):
        if R <= r:
            raise ValueError("self-intersecting torus")
        if delta < 0:
            raise ValueError("delta must be nonnegative")
        self.R = R
        self.r = r
        self.delta = float(delta) if inner else 0.0
        self.inner = inner
        self.kept_sign = -1 if inner else 1
        self.name = "disc" if inner else "outer"
        # shift along the surface normal at the map midpoint
        u0, v0 = 5.0 * np.pi / 6.0, 5.0 * np.pi / 36.0
        self.shift_dir = np.array(
            [np.cos(u0) * np.cos(v0), np.cos(u0) * np.sin(v0), np.sin(u0)]
        )

    def map(self, xy):
        xy = np.asarray(xy, dtype=float)
        u = 5.0 * np.pi * xy[..., 0] / 3.0
        v = 5.0 * np.pi * xy[..., 1] / 18.0
        rho = self.R + self.r * np.cos(u)
        pts = np.stack(
            [rho * np.cos(v), rho * np.sin(v), self.r * np.sin(u)], axis=-1
        )
        return pts + self.delta * self.shift_dir

    def jacobian(self, xy):
        xy = np.asarray(xy, dtype=float)
        a = 5.0 * np.pi / 3.0
        b = 5.0 * np.pi / 18.0
        u = a * xy[..., 0]
        v = b * xy[..., 1]
        rho = self.R + self.r * np.cos(u)
        dx = np.stack(
            [
                -self.r * a * np.sin(u) * np.cos(v),
                -self.r * a * np.sin(u) * np.sin(v),
                self.r * a * np.cos(u),
            ],
            axis=-1,
        )
        dy = np.stack(
            [-rho * b * np.sin(v), rho * b * np.cos(v), np.zeros_like(u)], axis=-1
        )
        return np.stack([dx, dy], axis=-1)


class PlanarPatch(PatchGeometry):
    """Unit square at z = 0; the disc patch may be shifted in-plane."""

    shift_dir = np.array([1.0, 0.0, 0.0])

    def __init__(self, delta=0.0, inner=False):
        if delta < 0:
            raise ValueError("delta must be nonnegative")
        if delta >= 1.0 - TRIM_RADIUS:
            raise ValueError("disc leaves square")
        self.delta = float(delta) if inner else 0.0
        self.inner = inner
        self.kept_sign = -1 if inner else 1
        self.name = "disc" if inner else "outer"

    def map(self, xy):
        xy = np.asarray(xy, dtype=float)
        pts = np.stack(
            [xy[..., 0], xy[..., 1], np.zeros_like(xy[..., 0])], axis=-1
        )
        return pts + self.delta * self.shift_dir

    def jacobian(self, xy):
        xy = np.asarray(xy, dtype=float)
        J = np.zeros(xy.shape[:-1] + (3, 2))
        J[..., 0, 0] = 1.0
        J[..., 1, 1] = 1.0
        return J


def torus_map_outer(xy, R=1.0, r=0.3):
    """Outer torus map F1 at reference coordinates ``xy``."""
    return TorusPatch(R, r).map(xy)


def torus_map_inner(xy, R=1.0, r=0.3, delta=0.0):
    """Inner (disc) torus map F2 = F1 + delta * shift direction."""
    return TorusPatch(R, r, delta=delta, inner=True).map(xy)


def planar_patch_geometry(delta):
    """Outer and disc patches of the planar gap problem."""
    return PlanarPatch(0.0, inner=False), PlanarPatch(delta, inner=True)


def torus_patch_geometry(delta, R=1.0, r=0.3):
    """Outer and disc patches of the torus gap problem."""
    return TorusPatch(R, r), TorusPatch(R, r, delta=delta, inner=True)


# ---------------------------------------------------------------------------
# torus surface quantities

def torus_closest_point(x, R=1.0, r=0.3):
    """Closest point on the torus surface; x may be a batch (..., 3)."""
    x = np.asarray(x, dtype=float)
    rho = np.hypot(x[..., 0], x[..., 1])
    if np.any(rho < 1e-12):
        raise ValueError("ambiguous projection: point on the torus axis")
    ring = np.stack(
        [R * x[..., 0] / rho, R * x[..., 1] / rho, np.zeros_like(rho)], axis=-1
    )
    v = x - ring
    nv = np.linalg.norm(v, axis=-1)
    if np.any(nv < 1e-12):
        raise ValueError("ambiguous projection: point on the center ring")
    return ring + r * v / nv[..., None]


def torus_normal(x, R=1.0, r=0.3):
    """Outward unit normal of the torus at on-surface points."""
    x = np.asarray(x, dtype=float)
    rho = np.hypot(x[..., 0], x[..., 1])
    ring = np.stack(
        [R * x[..., 0] / rho, R * x[..., 1] / rho, np.zeros_like(rho)], axis=-1
    )
    return (x - ring) / r


def torus_mean_curvature(x, R=1.0, r=0.3):
    """Mean curvature wrt the outward normal: (1/r + cos(t)/(R + r cos(t)))/2."""
    x = np.asarray(x, dtype=float)
    rho = np.hypot(x[..., 0], x[..., 1])
    cos_t = (rho - R) / r
    return 0.5 * (1.0 / r + cos_t / (R + r * cos_t))


# ---------------------------------------------------------------------------
# manufactured problems

class TorusProblem:
    """Laplace-Beltrami problem on the torus with u = sin(3x)sin(3y)sin(3z).

    The source uses the ambient-derivative identity for the surface
    Laplacian: surface_lap(u) = lap(u) - d2u/dn2 - 2 H du/dn, with the
    analytic torus normal and mean curvature.  Off-surface evaluation goes
    through the closest-point lift.
    """

    planar = False

    def __init__(self, R=1.0, r=0.3):
        self.R = R
        self.r = r

    def exact(self, x):
        x = np.asarray(x, dtype=float)
        return np.sin(3 * x[..., 0]) * np.sin(3 * x[..., 1]) * np.sin(3 * x[..., 2])

    def exact_grad(self, x):
        x = np.asarray(x, dtype=float)
        s = np.sin(3 * x)
        c = np.cos(3 * x)
        return 3 * np.stack(
            [
                c[..., 0] * s[..., 1] * s[..., 2],
                s[..., 0] * c[..., 1] * s[..., 2],
                s[..., 0] * s[..., 1] * c[..., 2],
            ],
            axis=-1,
        )

    def exact_hessian(self, x):
        x = np.asarray(x, dtype=float)
        s = np.sin(3 * x)
        c = np.cos(3 * x)
        H = np.empty(x.shape[:-1] + (3, 3))
        u = s[..., 0] * s[..., 1] * s[..., 2]
        H[..., 0, 0] = H[..., 1, 1] = H[..., 2, 2] = -9 * u
        H[..., 0, 1] = H[..., 1, 0] = 9 * c[..., 0] * c[..., 1] * s[..., 2]
        H[..., 0, 2] = H[..., 2, 0] = 9 * c[..., 0] * s[..., 1] * c[..., 2]
        H[..., 1, 2] = H[..., 2, 1] = 9 * s[..., 0] * c[..., 1] * c[..., 2]
        return H

    def lift(self, x):
        return torus_closest_point(x, self.R, self.r)

    def _check_on_surface(self, x):
        if np.max(np.linalg.norm(self.lift(x) - x, axis=-1)) > 1e-10:
            raise ValueError("point not on the torus surface")

    def surface_normal(self, x):
        return torus_normal(x, self.R, self.r)

    def source_on_surface(self, x):
        """f = -surface_lap(u) at on-surface points."""
        self._check_on_surface(x)
        n = self.surface_normal(x)
        H = torus_mean_curvature(x, self.R, self.r)
        g = self.exact_grad(x)
        hess = self.exact_hessian(x)
        lap = -27.0 * self.exact(x)
        dn = np.einsum("...i,...i->...", g, n)
        dnn = np.einsum("...i,...ij,...j->...", n, hess, n)
        return -(lap - dnn - 2.0 * H * dn)

    def source(self, x):
        return self.source_on_surface(self.lift(x))

    def dirichlet(self, x):
        return self.exact(self.lift(x))

    def exact_lifted(self, x):
        return self.exact(self.lift(x))

    def exact_surface_grad_lifted(self, x, normal):
        """Ambient gradient at the lifted point, projected with ``normal``."""
        g = self.exact_grad(self.lift(x))
        gn = np.einsum("...i,...i->...", g, normal)
        return g - gn[..., None] * normal

    def surface_grad_exact(self, x):
        """Tangential gradient at on-surface points (diagnostic)."""
        self._check_on_surface(x)
        return self.exact_surface_grad_lifted(x, self.surface_normal(x))


class PlanarProblem:
    """Poisson problem in the plane with u = sin(3x)sin(3y), f = 18 u."""

    planar = True

    def exact(self, x):
        x = np.asarray(x, dtype=float)
        return np.sin(3 * x[..., 0]) * np.sin(3 * x[..., 1])

    def exact_grad(self, x):
        x = np.asarray(x, dtype=float)
        g = np.zeros(x.shape[:-1] + (3,))
        g[..., 0] = 3 * np.cos(3 * x[..., 0]) * np.sin(3 * x[..., 1])
        g[..., 1] = 3 * np.sin(3 * x[..., 0]) * np.cos(3 * x[..., 1])
        return g

    def lift(self, x):
        return np.asarray(x, dtype=float)

    def source(self, x):
        return 18.0 * self.exact(x)

    def dirichlet(self, x):
        return self.exact(x)

    def exact_lifted(self, x):
        return self.exact(x)

    def exact_surface_grad_lifted(self, x, normal):
        g = self.exact_grad(x)
        gn = np.einsum("...i,...i->...", g, normal)
        return g - gn[..., None] * normal


class ConstantProblem:
    """Zero source with constant Dirichlet data (reproduction smoke tests)."""

    planar = True

    def __init__(self, value):
        self.value = float(value)

    def exact(self, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], self.value)

    def exact_grad(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (3,))

    def lift(self, x):
        return np.asarray(x, dtype=float)

    def source(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1])

    def dirichlet(self, x):
        return self.exact(x)

    def exact_lifted(self, x):
        return self.exact(x)

    def exact_surface_grad_lifted(self, x, normal):
        return self.exact_grad(x)


def manufactured_data(x, R=1.0, r=0.3):
    """(u, f, tangential gradient) of the torus problem at on-surface points."""
    prob = TorusProblem(R, r)
    prob._check_on_surface(np.asarray(x, dtype=float))
    return prob.exact(x), prob.source_on_surface(x), prob.surface_grad_exact(x)


# ---------------------------------------------------------------------------
# artificial interface

class GammaModel:
    """Midline model of the artificial interface between two boundary curves.

    Holds dense samples (points and unit tangents) of both perturbed
    boundaries.  ``project`` maps a query to the midpoint of the nearest
    sample on each curve; ``tangent`` averages the two tangents there.
    Immutable after construction; queries are pure and vectorized.
    """

    def __init__(self, points1, tangents1, points2, tangents2):
        points1 = np.atleast_2d(np.asarray(points1, dtype=float))
        points2 = np.atleast_2d(np.asarray(points2, dtype=float))
        if points1.size == 0 or points2.size == 0:
            raise ValueError("empty boundary sample set")
        self.points = (points1, points2)
        self.tangents = (
            np.atleast_2d(np.asarray(tangents1, dtype=float)),
            np.atleast_2d(np.asarray(tangents2, dtype=float)),
        )
        self._trees = (cKDTree(points1), cKDTree(points2))
        seg = np.linalg.norm(np.diff(points1, axis=0), axis=1)
        self.sample_spacing = float(seg.max()) if seg.size else 0.0

    def nearest(self, x, side):
        """Indices of the nearest samples on one curve (0 or 1)."""
        _, idx = self._trees[side].query(np.asarray(x, dtype=float))
        return idx

    def closest_pair(self, x):
        i1 = self.nearest(x, 0)
        i2 = self.nearest(x, 1)
        return self.points[0][i1], self.points[1][i2]

    def project(self, x):
        """Midpoint of the nearest points on the two perturbed boundaries."""
        s1, s2 = self.closest_pair(x)
        return 0.5 * (s1 + s2)

    def tangent(self, x):
        """Unit tangent of the midline: normalized average of the two
        nearest-sample tangents (orientation-coherent by construction)."""
        t = self.tangents[0][self.nearest(x, 0)] + self.tangents[1][self.nearest(x, 1)]
        norm = np.linalg.norm(t, axis=-1, keepdims=True)
        return t / norm


def gamma_midpoint_model(samples1, samples2):
    """Build a :class:`GammaModel` from ``(points, tangents)`` pairs."""
    p1, t1 = samples1
    p2, t2 = samples2
    return GammaModel(p1, t1, p2, t2)


def boundary_sample_spacing(h, degree):
    """Physical sample spacing along the perturbed boundaries.

    Capped at h/4; shrinks with the mesh size fast enough that the
    nearest-sample tangent tracks the continuous closest-point tangent
    below the discretization error of degree-p splines.
    """
    return float(min(h / 4.0, h ** (0.5 * (degree + 2))))


# ---------------------------------------------------------------------------
# tangent projector field on the hybrid mesh

def _lagrange_1d(nodes, x):
    """Values of the Lagrange basis on ``nodes`` at points ``x``."""
    x = np.asarray(x, dtype=float)
    vals = np.ones((x.size, nodes.size))
    for j in range(nodes.size):
        for m in range(nodes.size):
            if m != j:
                vals[:, j] *= (x - nodes[m]) / (nodes[j] - nodes[m])
    return vals


class TangentProjectorField:
    """Per-cell tensor Lagrange interpolant of I - t⊗t on the hybrid mesh.

    The tangent outer product is sampled at a degree-p tensor Lagrange
    lattice in every active hexahedral cell (nodes shared between cells are
    evaluated once) and interpolated cellwise.  ``projector`` returns the
    symmetrized projector at local coordinates of a cell.
    """

    def __init__(self, hybrid_mesh, gamma, degree):
        self.grid = hybrid_mesh.grid
        self.degree = int(degree)
        p = self.degree
        self.nodes_1d = np.linspace(0.0, 1.0, p + 1)
        h = self.grid.cell_size
        origin = np.array(self.grid.origin)

        lattice = {}
        cells = list(hybrid_mesh.active_cells)
        for c in cells:
            base = np.array(c) * p
            for local in np.ndindex(p + 1, p + 1, p + 1):
                lattice.setdefault(tuple(base + np.array(local)), None)
        keys = np.array(sorted(lattice.keys()), dtype=float)
        coords = origin + keys * (h / p)
        tt = gamma.tangent(coords)
        outer = np.einsum("...i,...j->...ij", tt, tt)
        table = {tuple(int(v) for v in k): outer[i] for i, k in enumerate(keys)}

        self.cell_nodes = {}
        for c in cells:
            base = np.array(c) * p
            vals = np.empty((p + 1, p + 1, p + 1, 3, 3))
            for local in np.ndindex(p + 1, p + 1, p + 1):
                vals[local] = table[tuple(base + np.array(local))]
            self.cell_nodes[c] = vals

    def tangent_outer(self, cell, local_pts):
        """Interpolated t⊗t at local coordinates in [0,1]^3 of a cell."""
        local_pts = np.atleast_2d(np.asarray(local_pts, dtype=float))
        Lx = _lagrange_1d(self.nodes_1d, local_pts[:, 0])
        Ly = _lagrange_1d(self.nodes_1d, local_pts[:, 1])
        Lz = _lagrange_1d(self.nodes_1d, local_pts[:, 2])
        vals = self.cell_nodes[tuple(cell)]
        return np.einsum("qi,qj,qk,ijkab->qab", Lx, Ly, Lz, vals)

    def projector(self, cell, local_pts):
        """Symmetrized projector I - interp(t⊗t), shape (nq, 3, 3)."""
        M = self.tangent_outer(cell, local_pts)
        P = np.eye(3)[None] - M
        return 0.5 * (P + np.swapaxes(P, -1, -2))


def tangent_projector_field(hybrid_mesh, gamma, degree):
    """Build the interpolated projector field for the hybrid stabilization."""
    return TangentProjectorField(hybrid_mesh, gamma, degree)
