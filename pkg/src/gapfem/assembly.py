"""Assembly of the hybridized Nitsche system over the three DOF blocks.

Block layout is (hybrid; patch 1; patch 2).  Patch terms are assembled in
the reference domain with metric pullback: the bulk form uses the weighted
stiffness ``sqrt(det G) G^{-1}``, boundary flux terms use the co-normal
contraction of the same tensor, and the interface penalty carries the weight
``beta/h * sqrt(det G) (n . G^{-1} n)``.  The hybrid variable enters patch
boundary terms through direct evaluation of the 3D spline space at mapped
physical points.  Ghost penalties on the patches and the normal-gradient
stabilization plus face jumps on the hybrid block complete the system, which
is symmetric by construction.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import gauss_01

__all__ = [
    "AssemblyError",
    "MethodParameters",
    "PatchDiscretization",
    "HybridDiscretization",
    "ProblemSetup",
    "AssembledSystem",
    "assemble_patch_form",
    "assemble_ghost_penalty",
    "assemble_hybrid_stab",
    "assemble_dirichlet",
    "assemble_load",
    "assemble_system",
]


class AssemblyError(RuntimeError):
    """Assembly failure (uncovered interface point, inconsistent setup)."""


@dataclass
class MethodParameters:
    """Penalty and stabilization parameters of the method.

    ``beta`` defaults to 25 p^2; the stabilization strengths default to
    0.01 and the hybrid stabilization exponent to alpha = 2.
    """

    degree: int
    beta: float = None
    tau0: float = 0.01
    tau_patch: float = 0.01
    alpha: float = 2.0

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be at least 1")
        if self.beta is None:
            self.beta = 25.0 * self.degree**2
        if self.beta <= 0 or self.tau0 <= 0 or self.tau_patch <= 0:
            raise ValueError("penalty parameters must be positive")


@dataclass
class PatchDiscretization:
    """Geometry, trimmed mesh, and spline space of one patch."""

    geometry: object
    mesh: object
    space: object

    @property
    def h(self):
        return self.space.grid.cell_size


@dataclass
class HybridDiscretization:
    """Hex mesh, 3D spline space, and tangent projector of the hybrid block."""

    mesh: object
    space: object
    projector: object

    @property
    def h(self):
        return self.space.grid.cell_size


@dataclass
class ProblemSetup:
    """Everything assembly needs for one solve."""

    hybrid: HybridDiscretization
    patches: list
    gamma: object
    problem: object
    params: MethodParameters

    @property
    def block_sizes(self):
        return [self.hybrid.space.dof_count] + [
            p.space.dof_count for p in self.patches
        ]

    @property
    def offsets(self):
        sizes = self.block_sizes
        return np.concatenate([[0], np.cumsum(sizes)])


@dataclass
class AssembledSystem:
    """Symmetric sparse system with block offsets (hybrid; patch 1; patch 2)."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    offsets: np.ndarray
    params: MethodParameters
    energy: dict = field(default_factory=dict, repr=False)

    def block_slice(self, i):
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))


# ---------------------------------------------------------------------------
# local evaluation helpers

def _cell_basis(space, cell, pts, tensor):
    """Covering dofs, values (nq, nloc) and gradients (nq, nloc, dim)."""
    if tensor is None:
        return space.eval_scattered(cell, pts, max_order=1)
    dofs, tables = space.eval_tensor(cell, tensor, max_order=1)
    dim = space.grid.dim
    if dim == 2:
        t0, t1 = tables
        vals = np.einsum("ia,jb->ijab", t0[0], t1[0])
        gx = np.einsum("ia,jb->ijab", t0[1], t1[0])
        gy = np.einsum("ia,jb->ijab", t0[0], t1[1])
        nq = vals.shape[0] * vals.shape[1]
        nloc = dofs.size
        grads = np.stack([gx.reshape(nq, nloc), gy.reshape(nq, nloc)], axis=-1)
        return dofs, vals.reshape(nq, nloc), grads
    t0, t1, t2 = tables
    vals = np.einsum("ia,jb,kc->ijkabc", t0[0], t1[0], t2[0])
    gx = np.einsum("ia,jb,kc->ijkabc", t0[1], t1[0], t2[0])
    gy = np.einsum("ia,jb,kc->ijkabc", t0[0], t1[1], t2[0])
    gz = np.einsum("ia,jb,kc->ijkabc", t0[0], t1[0], t2[1])
    nq = vals.shape[0] * vals.shape[1] * vals.shape[2]
    nloc = dofs.size
    grads = np.stack(
        [gx.reshape(nq, nloc), gy.reshape(nq, nloc), gz.reshape(nq, nloc)], axis=-1
    )
    return dofs, vals.reshape(nq, nloc), grads


def _metric_weights(geometry, pts):
    """Metric data at reference points: (G, G^{-1}, sqrt(det G))."""
    G = geometry.metric(pts)
    det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0]
    if np.any(det <= 0):
        raise AssemblyError("degenerate patch metric")
    inv = np.empty_like(G)
    inv[..., 0, 0] = G[..., 1, 1]
    inv[..., 1, 1] = G[..., 0, 0]
    inv[..., 0, 1] = -G[..., 0, 1]
    inv[..., 1, 0] = -G[..., 1, 0]
    inv /= det[..., None, None]
    return G, inv, np.sqrt(det)


def _sym(m):
    return 0.5 * (m + m.T)


class _Coo:
    """Triplet accumulator for one matrix block."""

    def __init__(self, shape):
        self.shape = shape
        self.rows = []
        self.cols = []
        self.vals = []

    def add(self, rows, cols, local):
        self.rows.append(np.repeat(rows, cols.size))
        self.cols.append(np.tile(cols, rows.size))
        self.vals.append(np.asarray(local, dtype=float).ravel())

    def matrix(self):
        if not self.rows:
            return sp.csr_matrix(self.shape)
        m = sp.coo_matrix(
            (
                np.concatenate(self.vals),
                (np.concatenate(self.rows), np.concatenate(self.cols)),
            ),
            shape=self.shape,
        )
        return m.tocsr()


def _hybrid_boundary_groups(hybrid, points):
    """Group physical points by containing hybrid cell and evaluate values.

    Returns a list of ``(point_indices, dofs, values)`` covering all points.
    """
    from .mesh import MeshError

    groups = {}
    for q, x in enumerate(points):
        try:
            cell = hybrid.mesh.locate(x)
        except MeshError as exc:
            raise AssemblyError("hybrid mesh does not cover interface") from exc
        groups.setdefault(cell, []).append(q)
    out = []
    for cell, qidx in groups.items():
        qidx = np.array(qidx)
        dofs, vals, _ = hybrid.space.eval_scattered(cell, points[qidx], max_order=0)
        out.append((qidx, dofs, vals))
    return out


# ---------------------------------------------------------------------------
# patch forms

def assemble_patch_bulk(patch):
    """Metric-weighted stiffness (sqrt(det G) G^{-1} grad v, grad w)."""
    n = patch.space.dof_count
    acc = _Coo((n, n))
    for cell in patch.mesh.active_cells:
        pts, wts, tensor = patch.mesh.bulk[cell]
        if wts.size == 0:
            continue
        dofs, _, grads = _cell_basis(patch.space, cell, pts, tensor)
        _, inv, sdet = _metric_weights(patch.geometry, pts)
        coef = inv * (sdet * wts)[:, None, None]
        local = np.einsum("qad,qde,qbe->ab", grads, coef, grads)
        acc.add(dofs, dofs, _sym(local))
    return acc.matrix()


def assemble_interface_terms(patch, hybrid, params):
    """Nitsche coupling of one patch to the hybrid variable on the trim curve.

    Returns a dict with the bilinear blocks ``ii``, ``i0``, ``00`` (the
    penalty also touches the hybrid-hybrid block) and the energy-norm
    companions: ``jump_ii/i0/00`` for the h^{-1} interface mismatch and
    ``bgrad_ii`` for the h-weighted boundary gradient, both with the physical
    surface measure.
    """
    ni = patch.space.dof_count
    n0 = hybrid.space.dof_count
    h = patch.h
    beta = params.beta
    blocks = {
        "ii": _Coo((ni, ni)),
        "i0": _Coo((ni, n0)),
        "00": _Coo((n0, n0)),
        "jump_ii": _Coo((ni, ni)),
        "jump_i0": _Coo((ni, n0)),
        "jump_00": _Coo((n0, n0)),
        "bgrad_ii": _Coo((ni, ni)),
    }
    n_points = 0
    for cell, seg in patch.mesh.curve.items():
        pts, wts, nrm = seg.points, seg.weights, seg.conormals
        n_points += wts.size
        dofs, vals, grads = _cell_basis(patch.space, cell, pts, None)
        _, inv, sdet = _metric_weights(patch.geometry, pts)
        ginv_n = np.einsum("qde,qe->qd", inv, nrm)
        n_ginv_n = np.einsum("qd,qd->q", nrm, ginv_n)
        flux = np.einsum("qad,qd->qa", grads, ginv_n) * sdet[:, None]
        wpen = (beta / h) * sdet * n_ginv_n
        measure = sdet * np.sqrt(n_ginv_n)
        X = patch.geometry.map(pts)

        consistency = np.einsum("q,qa,qb->ab", wts, flux, vals)
        penalty = np.einsum("q,qa,qb->ab", wts * wpen, vals, vals)
        blocks["ii"].add(dofs, dofs, _sym(-consistency - consistency.T + penalty))
        jii = np.einsum("q,qa,qb->ab", wts * measure / h, vals, vals)
        blocks["jump_ii"].add(dofs, dofs, _sym(jii))
        bii = np.einsum("qad,qde,qbe,q->ab", grads, inv, grads, wts * measure * h)
        blocks["bgrad_ii"].add(dofs, dofs, _sym(bii))

        for qidx, hd, hv in _hybrid_boundary_groups(hybrid, X):
            wg = wts[qidx]
            blocks["i0"].add(
                dofs,
                hd,
                np.einsum("q,qa,qc->ac", wg, flux[qidx], hv)
                - np.einsum("q,qa,qc->ac", wg * wpen[qidx], vals[qidx], hv),
            )
            blocks["00"].add(
                hd, hd, _sym(np.einsum("q,qc,qd->cd", wg * wpen[qidx], hv, hv))
            )
            wj = wg * measure[qidx] / h
            blocks["jump_i0"].add(
                dofs, hd, -np.einsum("q,qa,qc->ac", wj, vals[qidx], hv)
            )
            blocks["jump_00"].add(hd, hd, _sym(np.einsum("q,qc,qd->cd", wj, hv, hv)))
    out = {k: v.matrix() for k, v in blocks.items()}
    out["n_points"] = n_points
    return out


def assemble_patch_form(patch, hybrid, params):
    """Bulk plus interface Nitsche terms of one patch.

    Returns ``(blocks, diagnostics)`` where blocks holds ``ii`` (bulk plus
    boundary), ``i0`` and ``00``; the transposed ``0i`` block is implied by
    symmetry.
    """
    bulk = assemble_patch_bulk(patch)
    iface = assemble_interface_terms(patch, hybrid, params)
    blocks = {
        "ii": (bulk + iface["ii"]).tocsr(),
        "i0": iface["i0"],
        "00": iface["00"],
    }
    diag = {"n_interface_points": iface["n_points"], "bulk": bulk, "interface": iface}
    return blocks, diag


def assemble_dirichlet(patch, problem, params):
    """Symmetric Nitsche boundary terms and data contribution to the load."""
    ni = patch.space.dof_count
    acc = _Coo((ni, ni))
    load = np.zeros(ni)
    h = patch.h
    beta = params.beta
    for edge in patch.mesh.dirichlet:
        pts, wts = edge.points, edge.weights
        nrm = np.broadcast_to(edge.conormal, (wts.size, 2))
        dofs, vals, grads = _cell_basis(patch.space, edge.cell, pts, None)
        _, inv, sdet = _metric_weights(patch.geometry, pts)
        ginv_n = np.einsum("qde,qe->qd", inv, nrm)
        n_ginv_n = np.einsum("qd,qd->q", nrm, ginv_n)
        flux = np.einsum("qad,qd->qa", grads, ginv_n) * sdet[:, None]
        wpen = (beta / h) * sdet * n_ginv_n
        g = problem.dirichlet(patch.geometry.map(pts))
        consistency = np.einsum("q,qa,qb->ab", wts, flux, vals)
        penalty = np.einsum("q,qa,qb->ab", wts * wpen, vals, vals)
        acc.add(dofs, dofs, _sym(-consistency - consistency.T + penalty))
        load[dofs] += (-flux + wpen[:, None] * vals).T @ (wts * g)
    return acc.matrix(), load


def assemble_load(patch, problem):
    """Source term (f, v) with the surface measure."""
    load = np.zeros(patch.space.dof_count)
    for cell in patch.mesh.active_cells:
        pts, wts, tensor = patch.mesh.bulk[cell]
        if wts.size == 0:
            continue
        dofs, vals, _ = _cell_basis(patch.space, cell, pts, tensor)
        _, _, sdet = _metric_weights(patch.geometry, pts)
        f = problem.source(patch.geometry.map(pts))
        load[dofs] += vals.T @ (wts * sdet * f)
    return load


# ---------------------------------------------------------------------------
# face-jump stabilizations

def _face_jump_matrix(space, faces, level_weight, quad_order):
    """Sum over faces of jump terms in pure normal derivatives.

    ``level_weight(l)`` returns the prefactor of the order-l jump term
    (l = 1..p).  The jump is the difference of one-sided evaluations from
    the two cells sharing the face; the face measure is h^{dim-1}.
    """
    grid = space.grid
    p = grid.degree
    dim = grid.dim
    h = grid.cell_size
    xq, wq = gauss_01(quad_order)
    n = space.dof_count
    acc = _Coo((n, n))
    weights = np.array([level_weight(l) for l in range(1, p + 1)])

    for cell, axis in faces:
        nbr = tuple(c + (1 if k == axis else 0) for k, c in enumerate(cell))
        offsets_lo = []
        offsets_hi = []
        for k in range(dim):
            if k == axis:
                offsets_lo.append(np.array([1.0]))
                offsets_hi.append(np.array([0.0]))
            else:
                offsets_lo.append(xq)
                offsets_hi.append(xq)
        dofs_lo, tab_lo = space.eval_tensor(cell, offsets_lo, max_order=p)
        dofs_hi, tab_hi = space.eval_tensor(nbr, offsets_hi, max_order=p)

        union = {}
        for d in dofs_lo:
            union.setdefault(int(d), len(union))
        for d in dofs_hi:
            union.setdefault(int(d), len(union))
        udofs = np.array(list(union.keys()), dtype=np.int64)
        lo_pos = np.array([union[int(d)] for d in dofs_lo])
        hi_pos = np.array([union[int(d)] for d in dofs_hi])

        wface = wq
        for _ in range(dim - 2):
            wface = np.multiply.outer(wface, wq)
        wface = (wface * h ** (dim - 1)).ravel()
        nq = wface.size

        local = np.zeros((udofs.size, udofs.size))
        for l in range(1, p + 1):
            jump = np.zeros((nq, udofs.size))
            jump_side = _tensor_axis_derivative(tab_lo, axis, l, dim)
            jump[:, lo_pos] += jump_side
            jump_side = _tensor_axis_derivative(tab_hi, axis, l, dim)
            jump[:, hi_pos] -= jump_side
            local += weights[l - 1] * np.einsum("qa,qb,q->ab", jump, jump, wface)
        acc.add(udofs, udofs, _sym(local))
    return acc.matrix()


def _tensor_axis_derivative(tables, axis, order, dim):
    """Contract per-axis tables into the pure axis derivative (nq, nloc)."""
    sel = [tables[k][order if k == axis else 0] for k in range(dim)]
    if dim == 2:
        out = np.einsum("ia,jb->ijab", sel[0], sel[1])
        nq = out.shape[0] * out.shape[1]
    else:
        out = np.einsum("ia,jb,kc->ijkabc", sel[0], sel[1], sel[2])
        nq = out.shape[0] * out.shape[1] * out.shape[2]
    return out.reshape(nq, -1)


def assemble_ghost_penalty(space, faces, params):
    """Ghost penalty: tau_i sum_l h^{2l-1} (jump d^l_n v, jump d^l_n w)."""
    h = space.grid.cell_size
    tau = params.tau_patch

    return _face_jump_matrix(
        space, faces, lambda l: tau * h ** (2 * l - 1), space.grid.degree + 1
    )


def assemble_hybrid_stab(hybrid, params):
    """Hybrid stabilization tau0 h^-alpha (normal-gradient bulk + face jumps)."""
    space = hybrid.space
    h = space.grid.cell_size
    scale = params.tau0 * h ** (-params.alpha)
    n = space.dof_count
    acc = _Coo((n, n))
    for cell in hybrid.mesh.active_cells:
        pts, wts, tensor = hybrid.mesh.bulk[cell]
        dofs, _, grads = _cell_basis(space, cell, pts, tensor)
        lo, _ = space.grid.cell_bounds(cell)
        local_pts = (pts - lo) / space.grid.cell_size
        P = hybrid.projector.projector(cell, local_pts)
        V = np.einsum("qij,qaj->qai", P, grads)
        local = scale * np.einsum("qai,qbi,q->ab", V, V, wts)
        acc.add(dofs, dofs, _sym(local))
    bulk = acc.matrix()
    jumps = _face_jump_matrix(
        space,
        hybrid.mesh.faces,
        lambda l: scale * h ** (2 * l + 1),
        space.grid.degree + 1,
    )
    return (bulk + jumps).tocsr()


# ---------------------------------------------------------------------------
# the full system

def _expand(block, rows_off, cols_off, shape):
    m = block.tocoo()
    return sp.coo_matrix(
        (m.data, (m.row + rows_off, m.col + cols_off)), shape=shape
    )


def assemble_system(setup, with_energy=True):
    """Assemble the full symmetric system (and energy-norm component matrices).

    The matrix is block-structured over (hybrid; patch 1; patch 2) and
    combines patch bulk/interface/boundary Nitsche terms, ghost penalties,
    and the hybrid stabilization.  When ``with_energy`` is set, the pieces of
    the energy norm are returned as independent sparse matrices in
    ``AssembledSystem.energy``.
    """
    params = setup.params
    offsets = setup.offsets
    ntot = int(offsets[-1])
    shape = (ntot, ntot)
    parts = []
    energy = {}

    s0 = assemble_hybrid_stab(setup.hybrid, params)
    parts.append(_expand(s0, 0, 0, shape))
    if with_energy:
        energy["hybrid_stab"] = _expand(s0, 0, 0, shape).tocsr()

    rhs = np.zeros(ntot)
    for i, patch in enumerate(setup.patches, start=1):
        oi = int(offsets[i])
        bulk = assemble_patch_bulk(patch)
        iface = assemble_interface_terms(patch, setup.hybrid, params)
        ghost = assemble_ghost_penalty(patch.space, patch.mesh.ghost_faces, params)
        bc, bc_load = assemble_dirichlet(patch, setup.problem, params)

        parts.append(_expand(bulk + iface["ii"] + ghost + bc, oi, oi, shape))
        parts.append(_expand(iface["i0"], oi, 0, shape))
        parts.append(_expand(iface["i0"].T, 0, oi, shape))
        parts.append(_expand(iface["00"], 0, 0, shape))

        rhs[oi : oi + patch.space.dof_count] += assemble_load(patch, setup.problem)
        rhs[oi : oi + patch.space.dof_count] += bc_load

        if with_energy:
            energy[f"patch_grad_{i}"] = _expand(bulk, oi, oi, shape).tocsr()
            energy[f"patch_ghost_{i}"] = _expand(ghost, oi, oi, shape).tocsr()
            energy[f"boundary_grad_{i}"] = _expand(
                iface["bgrad_ii"], oi, oi, shape
            ).tocsr()
            jump = (
                _expand(iface["jump_ii"], oi, oi, shape)
                + _expand(iface["jump_i0"], oi, 0, shape)
                + _expand(iface["jump_i0"].T, 0, oi, shape)
                + _expand(iface["jump_00"], 0, 0, shape)
            )
            energy[f"interface_jump_{i}"] = jump.tocsr()

    A = sum(parts).tocsr()
    A = (A + A.T) * 0.5
    return AssembledSystem(A.tocsr(), rhs, offsets, params, energy)
