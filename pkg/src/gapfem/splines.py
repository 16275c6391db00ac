"""Tensor-product B-spline spaces on structured grids with active-cell restriction.

Spaces are built from open uniform knot vectors on a structured 2D or 3D grid
and restricted to a set of active cells.  Basis functions keep their full
support (no truncation); a function carries a degree of freedom whenever its
support intersects the active cell set.  Evaluation returns values and
derivatives of all covering basis functions on a cell, including one-sided
limits on cell boundaries, which is what face-jump terms need.
"""

from dataclasses import dataclass, field
import itertools

import numpy as np

__all__ = [
    "KnotGrid",
    "SplineSpace",
    "BasisEval",
    "FieldEval",
    "make_space",
    "eval_basis",
    "eval_field",
    "open_knot_vector",
    "bspline_all_ders",
]


def open_knot_vector(n_cells, degree, origin=0.0, cell_size=1.0):
    """Open uniform knot vector with ``n_cells`` spans of width ``cell_size``."""
    if n_cells < 1:
        raise ValueError("need at least one cell")
    interior = origin + cell_size * np.arange(1, n_cells)
    return np.concatenate(
        (
            np.full(degree + 1, origin),
            interior,
            np.full(degree + 1, origin + cell_size * n_cells),
        )
    )


def bspline_all_ders_batch(knots, degree, span, xs, max_order):
    """Values and derivatives of the ``degree+1`` B-splines nonzero on a span.

    Evaluates the polynomial pieces of the knot span ``[knots[span],
    knots[span+1]]`` even when points sit on the span boundary, so calling
    with the two spans adjacent to a breakpoint yields the two one-sided
    limits.  Vectorized over the evaluation points, which must all belong
    to the given span.

    Parameters
    ----------
    knots : ndarray
        Open knot vector.
    degree : int
        Spline degree p.
    span : int
        Knot span index, ``degree <= span <= len(knots)-degree-2``.
    xs : ndarray, shape (nq,)
        Evaluation points inside (or on the boundary of) the span.
    max_order : int
        Highest derivative order requested (0 gives values only).

    Returns
    -------
    ndarray, shape (max_order+1, nq, degree+1)
        ``out[k, q, j]`` is the k-th derivative of basis function
        ``span - degree + j`` at ``xs[q]``.
    """
    p = degree
    xs = np.asarray(xs, dtype=float)
    nq = xs.size
    out = np.zeros((max_order + 1, nq, p + 1))
    ndu = np.empty((nq, p + 1, p + 1))
    left = np.empty((nq, p))
    right = np.empty((nq, p))
    ndu[:, 0, 0] = 1.0
    for j in range(p):
        left[:, j] = xs - knots[span - j]
        right[:, j] = knots[span + 1 + j] - xs
        saved = np.zeros(nq)
        for r in range(j + 1):
            ndu[:, j + 1, r] = 1.0 / (right[:, r] + left[:, j - r])
            temp = ndu[:, r, j] * ndu[:, j + 1, r]
            ndu[:, r, j + 1] = saved + right[:, r] * temp
            saved = left[:, j - r] * temp
        ndu[:, j + 1, j + 1] = saved
    out[0] = ndu[:, :, p]

    ne = min(max_order, p)
    if ne:
        a = np.empty((nq, 2, p + 1))
        for r in range(p + 1):
            s1, s2 = 0, 1
            a[:, 0, 0] = 1.0
            for k in range(1, ne + 1):
                d = np.zeros(nq)
                rk = r - k
                pk = p - k
                if r >= k:
                    a[:, s2, 0] = a[:, s1, 0] * ndu[:, pk + 1, rk]
                    d = a[:, s2, 0] * ndu[:, rk, pk]
                j1 = 1 if rk >= -1 else -rk
                j2 = k - 1 if r - 1 <= pk else p - r
                for j in range(j1, j2 + 1):
                    a[:, s2, j] = (a[:, s1, j] - a[:, s1, j - 1]) * ndu[:, pk + 1, rk + j]
                    d += a[:, s2, j] * ndu[:, rk + j, pk]
                if r <= pk:
                    a[:, s2, k] = -a[:, s1, k - 1] * ndu[:, pk + 1, r]
                    d += a[:, s2, k] * ndu[:, r, pk]
                out[k, :, r] = d
                s1, s2 = s2, s1

        fac = float(p)
        for k in range(1, ne + 1):
            out[k] *= fac
            fac *= p - k
    return out


def bspline_all_ders(knots, degree, span, x, max_order):
    """Single-point variant of :func:`bspline_all_ders_batch`."""
    return bspline_all_ders_batch(knots, degree, span, np.array([x]), max_order)[:, 0, :]


@dataclass(frozen=True)
class KnotGrid:
    """Structured grid carrying an open uniform knot vector per axis.

    Attributes
    ----------
    origin : tuple of float
        Lower corner per axis.
    cell_size : float
        Cell width h, identical on all axes (quasiuniform structured grid).
    cells : tuple of int
        Number of cells per axis; the tuple length sets the dimension.
    degree : int
        Spline degree p (1 <= p <= 4).
    """

    origin: tuple
    cell_size: float
    cells: tuple
    degree: int

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if len(self.cells) not in (2, 3):
            raise ValueError("grid dimension must be 2 or 3")
        if len(self.origin) != len(self.cells):
            raise ValueError("origin and cells must have equal length")
        if any(n < 1 for n in self.cells):
            raise ValueError("each axis needs at least one cell")
        if not (1 <= self.degree <= 4):
            raise ValueError("degree must lie in [1, 4]")
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))
        object.__setattr__(self, "cells", tuple(int(n) for n in self.cells))

    @property
    def dim(self):
        return len(self.cells)

    def knots(self, axis):
        return open_knot_vector(
            self.cells[axis], self.degree, self.origin[axis], self.cell_size
        )

    def n_basis(self, axis):
        """Number of 1D basis functions along ``axis`` (open knots: n + p)."""
        return self.cells[axis] + self.degree

    def cell_bounds(self, cell):
        lo = np.array(
            [self.origin[k] + cell[k] * self.cell_size for k in range(self.dim)]
        )
        return lo, lo + self.cell_size

    def locate(self, point):
        """Cell multi-index containing ``point`` (upper boundaries clamp down)."""
        idx = []
        for k in range(self.dim):
            t = (point[k] - self.origin[k]) / self.cell_size
            i = int(np.floor(t))
            if i == self.cells[k] and abs(t - self.cells[k]) < 1e-12 * max(1, self.cells[k]):
                i = self.cells[k] - 1
            if not (0 <= i < self.cells[k]):
                raise ValueError(f"point {tuple(point)} outside grid along axis {k}")
            idx.append(i)
        return tuple(idx)

    def contains(self, point):
        for k in range(self.dim):
            lo = self.origin[k]
            hi = lo + self.cells[k] * self.cell_size
            if not (lo - 1e-12 <= point[k] <= hi + 1e-12):
                return False
        return True

    def all_cells(self):
        return itertools.product(*(range(n) for n in self.cells))

    def greville(self, axis):
        """Greville abscissae of the 1D basis along ``axis``."""
        t = self.knots(axis)
        p = self.degree
        n = self.n_basis(axis)
        return np.array([t[j + 1 : j + p + 1].mean() for j in range(n)])


class BasisEval:
    """Values/derivatives of the basis functions covering one cell at one point.

    Derivatives are assembled from per-axis 1D tables, so mixed and pure
    directional derivatives up to the requested order are all available.
    """

    def __init__(self, space, cell, tables, max_order):
        self.space = space
        self.cell = cell
        self.tables = tables  # per axis: (max_order+1, p+1)
        self.max_order = max_order
        self.dofs = space.cell_dofs(cell)

    def derivative(self, orders):
        """Mixed partial derivative ``orders`` (one entry per axis), flattened
        in the same local ordering as ``cell_dofs``."""
        if len(orders) != self.space.grid.dim:
            raise ValueError("orders must have one entry per axis")
        if any(o < 0 or o > self.max_order for o in orders):
            raise ValueError("derivative order outside evaluated range")
        vecs = [self.tables[k][orders[k]] for k in range(len(orders))]
        if len(vecs) == 2:
            return np.multiply.outer(vecs[0], vecs[1]).ravel()
        return np.einsum("i,j,k->ijk", *vecs).ravel()

    @property
    def values(self):
        zero = (0,) * self.space.grid.dim
        return self.derivative(zero)

    @property
    def gradient(self):
        dim = self.space.grid.dim
        cols = []
        for k in range(dim):
            orders = [0] * dim
            orders[k] = 1
            cols.append(self.derivative(tuple(orders)))
        return np.stack(cols, axis=1)

    def axis_derivative(self, order, axis):
        """Pure derivative of given ``order`` along one axis."""
        orders = [0] * self.space.grid.dim
        orders[axis] = order
        return self.derivative(tuple(orders))


@dataclass
class FieldEval:
    """Value and derivatives of a spline field at one point."""

    value: float
    gradient: np.ndarray
    basis: BasisEval = field(repr=False)
    coefs: np.ndarray = field(repr=False)

    def derivative(self, orders):
        return float(self.basis.derivative(orders) @ self.coefs)


class SplineSpace:
    """Degree-p tensor-product B-spline space restricted to active cells.

    Every active cell is covered by exactly ``(p+1)^dim`` basis functions;
    a function owns a degree of freedom iff its support meets the active set.
    Immutable after construction; all evaluation methods are pure.
    """

    def __init__(self, grid, active_cells):
        active = sorted(tuple(int(i) for i in c) for c in active_cells)
        if not active:
            raise ValueError("empty space")
        for c in active:
            if len(c) != grid.dim:
                raise ValueError("cell index dimension mismatch")
            if any(not (0 <= c[k] < grid.cells[k]) for k in range(grid.dim)):
                raise ValueError(f"cell {c} outside grid")
        self.grid = grid
        self.active_cells = tuple(active)
        self._active_set = frozenset(active)
        p = grid.degree
        funcs = set()
        for c in active:
            for b in itertools.product(*(range(c[k], c[k] + p + 1) for k in range(grid.dim))):
                funcs.add(b)
        self.dof_map = {b: i for i, b in enumerate(sorted(funcs))}
        self._knots = [grid.knots(k) for k in range(grid.dim)]
        self._table_cache = {}

    @property
    def dof_count(self):
        return len(self.dof_map)

    def is_active(self, cell):
        return tuple(cell) in self._active_set

    def cell_dofs(self, cell):
        """Global dof indices of the covering functions, C-ordered over the
        local multi-index."""
        p = self.grid.degree
        dofs = [
            self.dof_map[b]
            for b in itertools.product(
                *(range(cell[k], cell[k] + p + 1) for k in range(self.grid.dim))
            )
        ]
        return np.array(dofs, dtype=np.int64)

    def _check_point_in_cell(self, cell, point):
        lo, hi = self.grid.cell_bounds(cell)
        slack = 1e-10 * self.grid.cell_size
        if np.any(point < lo - slack) or np.any(point > hi + slack):
            raise ValueError(f"point {tuple(point)} outside cell {tuple(cell)}")

    def _axis_table(self, axis, cell_1d, x, max_order):
        span = self.grid.degree + cell_1d
        return bspline_all_ders(self._knots[axis], self.grid.degree, span, x, max_order)

    def axis_tables(self, axis, cell_1d, offsets, max_order):
        """Cached per-axis tables at local offsets in [0, 1] within a 1D cell.

        Returns an array of shape ``(max_order+1, len(offsets), p+1)``.
        The cache makes repeated structured quadrature cheap.
        """
        key = (axis, cell_1d, tuple(np.round(offsets, 15)), max_order)
        hit = self._table_cache.get(key)
        if hit is not None:
            return hit
        h = self.grid.cell_size
        x0 = self.grid.origin[axis] + cell_1d * h
        span = self.grid.degree + cell_1d
        tab = bspline_all_ders_batch(
            self._knots[axis], self.grid.degree, span, x0 + np.asarray(offsets) * h, max_order
        )
        self._table_cache[key] = tab
        return tab

    def eval_basis(self, cell, point, max_order):
        """Covering basis values and derivatives at one physical point."""
        if max_order > self.grid.degree:
            raise ValueError("max_order exceeds spline degree")
        cell = tuple(cell)
        point = np.asarray(point, dtype=float)
        self._check_point_in_cell(cell, point)
        tables = [
            self._axis_table(k, cell[k], point[k], max_order)
            for k in range(self.grid.dim)
        ]
        return BasisEval(self, cell, tables, max_order)

    def eval_scattered(self, cell, points, max_order=1):
        """Values and gradients of covering functions at many points in a cell.

        Returns ``(dofs, values (nq, nloc), grads (nq, nloc, dim))``; grads is
        None when ``max_order`` is 0.
        """
        cell = tuple(cell)
        points = np.atleast_2d(np.asarray(points, dtype=float))
        dofs = self.cell_dofs(cell)
        dim = self.grid.dim
        p = self.grid.degree
        tabs = [
            bspline_all_ders_batch(
                self._knots[k], p, p + cell[k], points[:, k], max_order
            )
            for k in range(dim)
        ]
        nq = points.shape[0]
        nloc = dofs.size
        if dim == 2:
            values = np.einsum("qa,qb->qab", tabs[0][0], tabs[1][0]).reshape(nq, nloc)
            if max_order == 0:
                return dofs, values, None
            gx = np.einsum("qa,qb->qab", tabs[0][1], tabs[1][0]).reshape(nq, nloc)
            gy = np.einsum("qa,qb->qab", tabs[0][0], tabs[1][1]).reshape(nq, nloc)
            return dofs, values, np.stack([gx, gy], axis=-1)
        values = np.einsum(
            "qa,qb,qc->qabc", tabs[0][0], tabs[1][0], tabs[2][0]
        ).reshape(nq, nloc)
        if max_order == 0:
            return dofs, values, None
        gx = np.einsum("qa,qb,qc->qabc", tabs[0][1], tabs[1][0], tabs[2][0]).reshape(nq, nloc)
        gy = np.einsum("qa,qb,qc->qabc", tabs[0][0], tabs[1][1], tabs[2][0]).reshape(nq, nloc)
        gz = np.einsum("qa,qb,qc->qabc", tabs[0][0], tabs[1][0], tabs[2][1]).reshape(nq, nloc)
        return dofs, values, np.stack([gx, gy, gz], axis=-1)

    def eval_tensor(self, cell, offsets_per_axis, max_order=1):
        """Tensor-grid evaluation on a cell from per-axis local offsets.

        Returns ``(dofs, tables)`` where ``tables[k]`` has shape
        ``(max_order+1, n_k, p+1)``; callers contract the tables themselves.
        """
        cell = tuple(cell)
        tables = [
            self.axis_tables(k, cell[k], offsets_per_axis[k], max_order)
            for k in range(self.grid.dim)
        ]
        return self.cell_dofs(cell), tables

    def eval_field(self, coefficients, point, max_order=1, cell=None):
        """Evaluate a coefficient vector as a field at one point."""
        coefficients = np.asarray(coefficients, dtype=float)
        if coefficients.shape != (self.dof_count,):
            raise ValueError(
                f"coefficient length {coefficients.size} != dof count {self.dof_count}"
            )
        if cell is None:
            cell = self.grid.locate(point)
        if not self.is_active(cell):
            raise ValueError(f"cell {tuple(cell)} not in the active set")
        ev = self.eval_basis(cell, point, max_order)
        local = coefficients[ev.dofs]
        grad = ev.gradient.T @ local if max_order >= 1 else np.zeros(self.grid.dim)
        return FieldEval(float(ev.values @ local), grad, ev, local)

    def greville_field(self, axis):
        """Coefficients reproducing the coordinate ``x_axis`` exactly."""
        grev = [self.grid.greville(k) for k in range(self.grid.dim)]
        coefs = np.empty(self.dof_count)
        for b, i in self.dof_map.items():
            coefs[i] = grev[axis][b[axis]]
        return coefs


def make_space(grid, active_cells):
    """Build a spline space on ``grid`` restricted to ``active_cells``."""
    return SplineSpace(grid, active_cells)


def eval_basis(space, cell, point, max_order):
    return space.eval_basis(cell, point, max_order)


def eval_field(space, coefficients, point, max_order=1):
    return space.eval_field(coefficients, point, max_order)
