"""Active meshes: trimmed 2D patch meshes and the 3D hybrid hex mesh.

Patch cells are classified against the trim level set; cut cells get a bulk
quadrature of the kept region and a line quadrature of the trim curve built
by recursive bisection.  On leaf subcells the curve is treated as a graph
over the axis orthogonal to the dominant level-set gradient: the leaf's
column range is split at the parameter values where the curve crosses the
leaf boundary, so every Gauss column sees a fixed crossing structure and the
rule converges at the Gauss order (exact curve points come from 1D
root-finding on the analytic level set).

The hybrid mesh is extracted from a structured background hexahedral grid by
marking voxels traversed by the perturbed-boundary samples, dilating by a
configurable margin of face neighbors, and keeping the face-connected
component containing the samples.
"""

from dataclasses import dataclass
from functools import lru_cache
import itertools

import numpy as np
from scipy.optimize import brentq

__all__ = [
    "MeshError",
    "ActiveMesh2D",
    "HybridMesh3D",
    "classify_cells",
    "cut_cell_quadrature",
    "ghost_faces",
    "extract_hybrid_mesh",
    "hybrid_background_grid",
    "gauss_01",
    "dump_active_mesh",
]

INSIDE = "inside"
CUT = "cut"
OUTSIDE = "outside"

_BRENTQ_XTOL = 1e-14


class MeshError(RuntimeError):
    """Mesh construction failure (bad cover, unresolved trim topology)."""


@lru_cache(maxsize=32)
def gauss_01(n):
    """Gauss-Legendre rule on [0, 1]; weights sum to one."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def tensor_gauss(lo, hi, n):
    """Tensor Gauss rule on a box; returns (points (n^d, d), weights)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    dim = lo.size
    x, w = gauss_01(n)
    axes = [lo[k] + (hi[k] - lo[k]) * x for k in range(dim)]
    wts = [(hi[k] - lo[k]) * w for k in range(dim)]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    wt = wts[0]
    for k in range(1, dim):
        wt = np.multiply.outer(wt, wts[k])
    return pts, wt.ravel()


# ---------------------------------------------------------------------------
# classification

def _sample_lattice(lo, hi, n):
    xs = np.linspace(lo[0], hi[0], n)
    ys = np.linspace(lo[1], hi[1], n)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=-1)


def classify_cells(grid, levelset, kept_sign, n_samples=None):
    """Status per cell: inside / cut / outside w.r.t. the kept side.

    A cell is cut when the signed samples (a (p+2)-per-axis lattice, corners
    included) change sign or hit zero; inside when all samples are strictly
    kept; outside otherwise.
    """
    n = n_samples or (grid.degree + 2)
    n = max(n, 3)
    status = {}
    for cell in grid.all_cells():
        lo, hi = grid.cell_bounds(cell)
        s = kept_sign * levelset(_sample_lattice(lo, hi, n))
        if np.min(s) > 0.0:
            status[cell] = INSIDE
        elif np.max(s) < 0.0:
            status[cell] = OUTSIDE
        else:
            status[cell] = CUT
    return status


# ---------------------------------------------------------------------------
# cut-cell quadrature

@dataclass
class CurveSegment:
    """Trim-curve quadrature inside one cut cell (reference coordinates)."""

    points: np.ndarray  # (nq, 2)
    weights: np.ndarray  # (nq,) arc-length weights
    conormals: np.ndarray  # (nq, 2) unit, outward from the kept region


def _line_roots(levelset, p0, p1, n_probe=8):
    """Roots of the level set along a segment, as parameters in (0, 1)."""
    t = np.linspace(0.0, 1.0, n_probe)
    pts = p0[None, :] + t[:, None] * (p1 - p0)[None, :]
    s = levelset(pts)

    def f(tt):
        return float(levelset((p0 + tt * (p1 - p0))[None, :])[0])

    roots = []
    for i in range(n_probe - 1):
        a, b = t[i], t[i + 1]
        sa, sb = s[i], s[i + 1]
        if sa == 0.0:
            roots.append(a)
        if sa * sb < 0.0:
            roots.append(brentq(f, a, b, xtol=_BRENTQ_XTOL))
    if s[-1] == 0.0:
        roots.append(1.0)
    out = []
    for r in sorted(roots):
        if not out or r - out[-1] > 1e-12:
            out.append(r)
    return out


def _count_boundary_sign_changes(levelset, lo, hi, per_edge=8):
    corners = np.array(
        [[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]]
    )
    pts = []
    for i in range(4):
        a, c = corners[i], corners[(i + 1) % 4]
        t = np.linspace(0.0, 1.0, per_edge, endpoint=False)
        pts.append(a[None, :] + t[:, None] * (c - a)[None, :])
    s = levelset(np.concatenate(pts))
    signs = np.sign(s[np.abs(s) > 0.0])
    if signs.size < 2:
        return 0
    flips = np.count_nonzero(signs[1:] != signs[:-1])
    if signs[0] != signs[-1]:
        flips += 1
    return flips


def _kept_intervals(levelset, kept_sign, p0, p1):
    """Kept sub-intervals (in the segment parameter) along p0 -> p1."""
    roots = _line_roots(levelset, p0, p1)
    breaks = [0.0] + [r for r in roots if 1e-13 < r < 1.0 - 1e-13] + [1.0]
    kept = []
    for a, b in zip(breaks[:-1], breaks[1:]):
        mid = p0 + 0.5 * (a + b) * (p1 - p0)
        if kept_sign * float(levelset(mid[None, :])[0]) > 0.0:
            kept.append((a, b))
    return kept


def _leaf_quadrature(levelset, levelset_grad, kept_sign, lo, hi, order):
    """Column rule on a leaf cut subcell.

    Chooses the height axis ``d`` from the dominant gradient component at the
    center, splits the base range at the curve's boundary crossings, and per
    Gauss column integrates the kept pieces and accumulates one curve point
    per root.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    center = 0.5 * (lo + hi)
    g = levelset_grad(center[None, :])[0]
    d = int(np.argmax(np.abs(g)))
    b = 1 - d

    corners = np.array(
        [[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]]
    )
    edges = [(corners[i], corners[(i + 1) % 4]) for i in range(4)]
    events = {lo[b], hi[b]}
    for a, c in edges:
        for r in _line_roots(levelset, a, c):
            events.add(float((a + r * (c - a))[b]))
    breaks = sorted(events)

    xq, wq = gauss_01(order)
    bulk_pts, bulk_wts = [], []
    crv_pts, crv_wts, crv_nrm = [], [], []

    def column(bval):
        p0 = np.empty(2)
        p1 = np.empty(2)
        p0[b] = p1[b] = bval
        p0[d], p1[d] = lo[d], hi[d]
        return p0, p1

    for bl, br in zip(breaks[:-1], breaks[1:]):
        span_b = br - bl
        if span_b <= 1e-14 * max(1.0, abs(br)):
            continue
        for t, w in zip(xq, wq):
            bval = bl + t * span_b
            wb = w * span_b
            p0, p1 = column(bval)
            span_d = hi[d] - lo[d]
            roots = _line_roots(levelset, p0, p1)
            cuts = [0.0] + [r for r in roots if 1e-13 < r < 1.0 - 1e-13] + [1.0]
            for a, c in zip(cuts[:-1], cuts[1:]):
                mid = p0 + 0.5 * (a + c) * (p1 - p0)
                if kept_sign * float(levelset(mid[None, :])[0]) > 0.0:
                    seg = (c - a) * span_d
                    for td, wd in zip(xq, wq):
                        pt = p0.copy()
                        pt[d] = lo[d] + (a + td * (c - a)) * span_d
                        bulk_pts.append(pt)
                        bulk_wts.append(wb * wd * seg)
            for r in roots:
                pt = p0 + r * (p1 - p0)
                gr = levelset_grad(pt[None, :])[0]
                if abs(gr[d]) < 1e-14:
                    continue
                slope = gr[b] / gr[d]
                crv_pts.append(pt)
                crv_wts.append(wb * np.sqrt(1.0 + slope * slope))
                nrm = -kept_sign * gr / np.linalg.norm(gr)
                crv_nrm.append(nrm)

    return bulk_pts, bulk_wts, crv_pts, crv_wts, crv_nrm


def cut_cell_quadrature(levelset, levelset_grad, kept_sign, lo, hi, order, depth=6):
    """Bulk quadrature of the kept region and trim-curve segments in a cell.

    Recursive bisection refines sign-changing subcells to ``depth`` levels;
    fully kept subcells get a tensor Gauss rule, leaf cut subcells the column
    rule.  Raises :class:`MeshError` when the trim has several branches in
    the cell (four or more sign changes around the cell boundary).

    Returns ``(points, weights, CurveSegment)``.
    """
    if _count_boundary_sign_changes(levelset, np.asarray(lo), np.asarray(hi)) >= 4:
        raise MeshError("refine mesh: multiple trim branches in one cell")

    bulk_pts, bulk_wts = [], []
    crv_pts, crv_wts, crv_nrm = [], [], []

    def recurse(lo_, hi_, level):
        s = kept_sign * levelset(_sample_lattice(lo_, hi_, 4))
        if np.min(s) > 0.0:
            pts, wts = tensor_gauss(lo_, hi_, order)
            bulk_pts.extend(pts)
            bulk_wts.extend(wts)
            return
        if np.max(s) < 0.0:
            return
        if level > 0:
            mid = 0.5 * (np.asarray(lo_) + np.asarray(hi_))
            for qx, qy in itertools.product(range(2), range(2)):
                clo = np.array(
                    [lo_[0] if qx == 0 else mid[0], lo_[1] if qy == 0 else mid[1]]
                )
                chi = np.array(
                    [mid[0] if qx == 0 else hi_[0], mid[1] if qy == 0 else hi_[1]]
                )
                recurse(clo, chi, level - 1)
            return
        bp, bw, cp, cw, cn = _leaf_quadrature(
            levelset, levelset_grad, kept_sign, lo_, hi_, order
        )
        bulk_pts.extend(bp)
        bulk_wts.extend(bw)
        crv_pts.extend(cp)
        crv_wts.extend(cw)
        crv_nrm.extend(cn)

    recurse(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float), depth)

    bulk_pts = np.array(bulk_pts).reshape(-1, 2)
    bulk_wts = np.array(bulk_wts)
    segment = CurveSegment(
        np.array(crv_pts).reshape(-1, 2),
        np.array(crv_wts),
        np.array(crv_nrm).reshape(-1, 2),
    )
    return bulk_pts, bulk_wts, segment


# ---------------------------------------------------------------------------
# 2D active mesh

@dataclass
class DirichletEdge:
    """Quadrature of the kept part of a boundary cell edge."""

    cell: tuple
    edge: int  # 0: x=lo, 1: x=hi, 2: y=lo, 3: y=hi of the reference square
    points: np.ndarray  # (nq, 2)
    weights: np.ndarray  # (nq,) reference arc length
    conormal: np.ndarray  # (2,) outward square normal


_EDGE_NORMALS = {
    0: np.array([-1.0, 0.0]),
    1: np.array([1.0, 0.0]),
    2: np.array([0.0, -1.0]),
    3: np.array([0.0, 1.0]),
}


class ActiveMesh2D:
    """Trimmed patch mesh: classification, quadratures, and stabilized faces.

    Attributes
    ----------
    status : dict
        Cell -> inside | cut | outside.
    active_cells : tuple
        Sorted cells with status inside or cut.
    bulk : dict
        Cell -> (points, weights, tensor_offsets_or_None); weights sum to the
        kept reference area.
    curve : dict
        Cut cell -> :class:`CurveSegment` of the trim curve.
    ghost_faces : list
        Interior faces ``(cell, axis)`` (between ``cell`` and its upper
        neighbor) touching at least one cut cell.
    dirichlet : list
        :class:`DirichletEdge` quadratures on flagged square edges.
    """

    def __init__(self, grid, patch, bulk_order=None, depth=6):
        if grid.dim != 2:
            raise ValueError("patch meshes are two-dimensional")
        self.grid = grid
        self.patch = patch
        p = grid.degree
        self.bulk_order = int(bulk_order) if bulk_order else p + 2
        self.depth = int(depth)

        levelset = patch.levelset
        self.status = classify_cells(grid, levelset, patch.kept_sign)
        self.active_cells = tuple(
            sorted(c for c, s in self.status.items() if s != OUTSIDE)
        )
        if not self.active_cells:
            raise MeshError("trim removes every cell of the patch grid")

        xq, _ = gauss_01(self.bulk_order)
        self.bulk = {}
        self.curve = {}
        for cell in self.active_cells:
            lo, hi = grid.cell_bounds(cell)
            if self.status[cell] == INSIDE:
                pts, wts = tensor_gauss(lo, hi, self.bulk_order)
                self.bulk[cell] = (pts, wts, (xq, xq))
            else:
                pts, wts, seg = cut_cell_quadrature(
                    levelset,
                    patch.levelset_grad,
                    patch.kept_sign,
                    lo,
                    hi,
                    self.bulk_order,
                    self.depth,
                )
                self.bulk[cell] = (pts, wts, None)
                if seg.points.size:
                    self.curve[cell] = seg

        self.ghost_faces = ghost_faces(self)
        self.dirichlet = self._dirichlet_edges()

    def _dirichlet_edges(self):
        grid = self.grid
        nx, ny = grid.cells
        xq, wq = gauss_01(self.bulk_order)
        out = []
        for cell in self.active_cells:
            lo, hi = grid.cell_bounds(cell)
            sides = []
            if cell[0] == 0:
                sides.append((0, np.array([lo[0], lo[1]]), np.array([lo[0], hi[1]])))
            if cell[0] == nx - 1:
                sides.append((1, np.array([hi[0], lo[1]]), np.array([hi[0], hi[1]])))
            if cell[1] == 0:
                sides.append((2, np.array([lo[0], lo[1]]), np.array([hi[0], lo[1]])))
            if cell[1] == ny - 1:
                sides.append((3, np.array([lo[0], hi[1]]), np.array([hi[0], hi[1]])))
            for edge, p0, p1 in sides:
                if not self.patch.dirichlet_edges[edge]:
                    continue
                length = np.linalg.norm(p1 - p0)
                pts, wts = [], []
                for a, b in _kept_intervals(
                    self.patch.levelset, self.patch.kept_sign, p0, p1
                ):
                    for t, w in zip(xq, wq):
                        pts.append(p0 + (a + t * (b - a)) * (p1 - p0))
                        wts.append(w * (b - a) * length)
                if pts:
                    out.append(
                        DirichletEdge(
                            cell,
                            edge,
                            np.array(pts),
                            np.array(wts),
                            _EDGE_NORMALS[edge],
                        )
                    )
        return out

    @property
    def cut_cells(self):
        return tuple(c for c in self.active_cells if self.status[c] == CUT)

    def kept_area(self):
        return float(sum(w.sum() for _, w, _ in self.bulk.values()))

    def curve_length(self):
        return float(sum(seg.weights.sum() for seg in self.curve.values()))


def ghost_faces(mesh):
    """Interior faces of the active mesh touching at least one cut cell.

    Faces are ``(cell, axis)`` pairs between ``cell`` and ``cell + e_axis``;
    both cells are active.
    """
    status = mesh.status
    faces = []
    for cell in mesh.active_cells:
        for axis in range(mesh.grid.dim):
            nbr = tuple(c + (1 if k == axis else 0) for k, c in enumerate(cell))
            if status.get(nbr, OUTSIDE) == OUTSIDE:
                continue
            if status[cell] == CUT or status[nbr] == CUT:
                faces.append((cell, axis))
    return faces


# ---------------------------------------------------------------------------
# hybrid hexahedral mesh

class HybridMesh3D:
    """Face-connected set of active hexahedral background cells.

    Attributes
    ----------
    active_cells : tuple
        Sorted voxel multi-indices.
    faces : list
        Interior faces ``(cell, axis)`` between ``cell`` and its upper
        neighbor along ``axis``; every interior face appears exactly once.
    bulk : dict
        Cell -> (points, weights, tensor_offsets) full tensor Gauss rule.
    """

    def __init__(self, grid, active_cells, bulk_order=None):
        if grid.dim != 3:
            raise ValueError("hybrid mesh must be three-dimensional")
        self.grid = grid
        self.active_cells = tuple(sorted(tuple(c) for c in active_cells))
        if not self.active_cells:
            raise MeshError("empty hybrid mesh")
        active = frozenset(self.active_cells)
        self._active_set = active
        self.faces = []
        for cell in self.active_cells:
            for axis in range(3):
                nbr = tuple(c + (1 if k == axis else 0) for k, c in enumerate(cell))
                if nbr in active:
                    self.faces.append((cell, axis))
        order = int(bulk_order) if bulk_order else grid.degree + 2
        xq, _ = gauss_01(order)
        self.bulk = {}
        for cell in self.active_cells:
            lo, hi = grid.cell_bounds(cell)
            pts, wts = tensor_gauss(lo, hi, order)
            self.bulk[cell] = (pts, wts, (xq, xq, xq))

    def is_active(self, cell):
        return tuple(cell) in self._active_set

    def locate(self, point):
        """Containing active voxel of a physical point.

        On shared cell boundaries any containing voxel is equivalent (the
        spline field is continuous); an active one is preferred.
        """
        cell = self.grid.locate(point)
        if cell in self._active_set:
            return cell
        # boundary points can be claimed by an inactive lower neighbor
        h = self.grid.cell_size
        for delta in itertools.product((0, -1, 1), repeat=3):
            cand = tuple(c + d for c, d in zip(cell, delta))
            if cand in self._active_set:
                lo, hi = self.grid.cell_bounds(cand)
                if np.all(point >= lo - 1e-9 * h) and np.all(point <= hi + 1e-9 * h):
                    return cand
        raise MeshError("hybrid mesh does not cover interface")

    def volume(self):
        return len(self.active_cells) * self.grid.cell_size ** 3


def hybrid_background_grid(samples, cell_size, degree, pad_cells=2):
    """Structured background grid enclosing the samples with padding.

    The origin snaps to the cell-size lattice so identical inputs give
    identical grids.
    """
    from .splines import KnotGrid

    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    lo = samples.min(axis=0)
    hi = samples.max(axis=0)
    origin = (np.floor(lo / cell_size) - pad_cells) * cell_size
    counts = np.ceil((hi - origin) / cell_size).astype(int) + pad_cells
    return KnotGrid(
        origin=tuple(origin), cell_size=float(cell_size), cells=tuple(counts), degree=degree
    )


def extract_hybrid_mesh(grid, samples, margin=1, bulk_order=None):
    """Active hex set: sample voxels, dilated ``margin`` face layers, kept as
    the face-connected component containing the samples."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    origin = np.array(grid.origin)
    h = grid.cell_size
    idx = np.floor((samples - origin) / h).astype(int)
    for k in range(3):
        at_top = (idx[:, k] == grid.cells[k]) & np.isclose(
            samples[:, k], origin[k] + grid.cells[k] * h
        )
        idx[at_top, k] -= 1
    if np.any(idx < 0) or np.any(idx >= np.array(grid.cells)):
        raise MeshError("grid too small: boundary sample outside background grid")

    seeds = {tuple(i) for i in idx}
    marked = set(seeds)
    frontier = set(seeds)
    for _ in range(int(margin)):
        new = set()
        for cell in frontier:
            for axis in range(3):
                for step in (-1, 1):
                    nbr = tuple(
                        c + (step if k == axis else 0) for k, c in enumerate(cell)
                    )
                    if all(0 <= nbr[k] < grid.cells[k] for k in range(3)):
                        if nbr not in marked:
                            new.add(nbr)
        marked |= new
        frontier = new

    # face-connected component reachable from the seeds
    reached = set()
    stack = list(seeds)
    while stack:
        cell = stack.pop()
        if cell in reached:
            continue
        reached.add(cell)
        for axis in range(3):
            for step in (-1, 1):
                nbr = tuple(c + (step if k == axis else 0) for k, c in enumerate(cell))
                if nbr in marked and nbr not in reached:
                    stack.append(nbr)

    return HybridMesh3D(grid, reached, bulk_order=bulk_order)


# ---------------------------------------------------------------------------
# debugging dump

def dump_active_mesh(mesh, stream):
    """Plain-text listing of cells and faces (one record per line).

    Format: ``cell i j [k] status`` for every active cell, then
    ``face i j [k] axis`` for every stabilized/interior face.
    """
    if isinstance(mesh, ActiveMesh2D):
        for cell in mesh.active_cells:
            stream.write(f"cell {cell[0]} {cell[1]} {mesh.status[cell]}\n")
        for cell, axis in mesh.ghost_faces:
            stream.write(f"face {cell[0]} {cell[1]} {axis}\n")
    else:
        for cell in mesh.active_cells:
            stream.write(f"cell {cell[0]} {cell[1]} {cell[2]} active\n")
        for cell, axis in mesh.faces:
            stream.write(f"face {cell[0]} {cell[1]} {cell[2]} {axis}\n")
