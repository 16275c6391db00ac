import io

import numpy as np
import pytest

from gapfem.geometry import planar_patch_geometry
from gapfem.mesh import (
    CUT,
    INSIDE,
    OUTSIDE,
    ActiveMesh2D,
    MeshError,
    classify_cells,
    cut_cell_quadrature,
    dump_active_mesh,
    extract_hybrid_mesh,
    gauss_01,
    ghost_faces,
    hybrid_background_grid,
    tensor_gauss,
)
from gapfem.splines import KnotGrid

QUARTER_DISC_AREA = np.pi * 0.81 / 4.0
QUARTER_ARC_LENGTH = 0.5 * np.pi * 0.9


def grid2(n=8, p=2):
    return KnotGrid(origin=(0.0, 0.0), cell_size=1.0 / n, cells=(n, n), degree=p)


def test_classification_examples():
    outer, disc = planar_patch_geometry(0.0)
    g = grid2(8)
    status = classify_cells(g, disc.levelset, disc.kept_sign)
    # a cell well inside the disc
    assert status[(1, 1)] == INSIDE
    # the cell containing (0.9, 0) is cut
    assert status[g.locate((0.9, 0.001))] == CUT
    # corner cell far outside the disc
    assert status[(7, 7)] == OUTSIDE
    status_outer = classify_cells(g, outer.levelset, outer.kept_sign)
    assert status_outer[(7, 7)] == INSIDE
    # cover property: outer-active + disc-active >= total (cut counted twice)
    n_active = sum(1 for s in status.values() if s != OUTSIDE) + sum(
        1 for s in status_outer.values() if s != OUTSIDE
    )
    assert n_active >= 64


def test_uncut_tensor_gauss_exactness():
    # p+1 Gauss points integrate degree 2p+1 monomials exactly
    for p in (1, 2, 3):
        pts, wts = tensor_gauss([0.2, 0.4], [0.45, 0.65], p + 1)
        for dx, dy in [(2 * p + 1, 0), (p, p + 1), (0, 2 * p + 1)]:
            approx = float(np.sum(wts * pts[:, 0] ** dx * pts[:, 1] ** dy))
            exact = (0.45 ** (dx + 1) - 0.2 ** (dx + 1)) / (dx + 1)
            exact *= (0.65 ** (dy + 1) - 0.4 ** (dy + 1)) / (dy + 1)
            assert abs(approx - exact) <= 1e-13 * abs(exact)


def test_quarter_disc_areas_and_arc_length():
    outer, disc = planar_patch_geometry(0.0)
    g = grid2(8)
    m_outer = ActiveMesh2D(g, outer)
    m_disc = ActiveMesh2D(g, disc)
    assert abs(m_outer.kept_area() - (1.0 - QUARTER_DISC_AREA)) <= 1e-8 * 1.0
    assert abs(m_disc.kept_area() - QUARTER_DISC_AREA) <= 1e-8
    assert abs(m_outer.curve_length() - QUARTER_ARC_LENGTH) <= 1e-8
    assert abs(m_disc.curve_length() - QUARTER_ARC_LENGTH) <= 1e-8


def test_cut_quadrature_polynomial_on_kept_region():
    # integrate x^2 y over the quarter disc: analytic value in polar coords
    outer, disc = planar_patch_geometry(0.0)
    g = grid2(4, p=2)
    m = ActiveMesh2D(g, disc)
    total = 0.0
    for cell in m.active_cells:
        pts, wts, _ = m.bulk[cell]
        if wts.size:
            total += float(np.sum(wts * pts[:, 0] ** 2 * pts[:, 1]))
    # int_0^{pi/2} cos^2 t sin t dt * int_0^0.9 r^4 dr = (1/3) * 0.9^5 / 5
    exact = (1.0 / 3.0) * 0.9**5 / 5.0
    assert abs(total - exact) <= 1e-8 * exact


def test_conormals_unit_and_outward():
    outer, disc = planar_patch_geometry(0.0)
    g = grid2(8)
    for patch in (outer, disc):
        m = ActiveMesh2D(g, patch)
        for seg in m.curve.values():
            norms = np.linalg.norm(seg.conormals, axis=1)
            assert np.abs(norms - 1.0).max() <= 1e-12
            # stepping along the conormal leaves the kept region
            probe = seg.points + 1e-6 * seg.conormals
            phi = patch.levelset(probe)
            assert np.all(~patch.kept(phi))


def test_cut_area_convergence_rate_with_depth():
    """Order-1 column rule: halving the leaf size cuts the area error ~4x."""
    outer, disc = planar_patch_geometry(0.0)
    g = grid2(4, p=1)
    errors = []
    for depth in (3, 4, 5):
        area = 0.0
        for cell in g.all_cells():
            lo, hi = g.cell_bounds(cell)
            pts, wts, _ = cut_cell_quadrature(
                disc.levelset, disc.levelset_grad, disc.kept_sign, lo, hi, 1, depth
            )
            area += wts.sum() if wts.size else 0.0
        errors.append(abs(area - QUARTER_DISC_AREA))
    assert errors[0] / errors[1] >= 3.5
    assert errors[1] / errors[2] >= 3.5


def test_multibranch_detection():
    # level set with two branches crossing one cell
    def levelset(pts):
        pts = np.atleast_2d(pts)
        return (pts[..., 1] - 0.3) * (pts[..., 1] - 0.7)

    def grad(pts):
        pts = np.atleast_2d(pts)
        g = np.zeros(pts.shape[:-1] + (2,))
        g[..., 1] = 2.0 * pts[..., 1] - 1.0
        return g

    with pytest.raises(MeshError, match="refine"):
        cut_cell_quadrature(levelset, grad, 1, [0.0, 0.0], [1.0, 1.0], 2, 2)


def test_ghost_faces_brute_force():
    outer, disc = planar_patch_geometry(0.0)
    g = grid2(8)
    m = ActiveMesh2D(g, disc)
    faces = set(ghost_faces(m))
    # brute-force scan over all (cell, neighbor) pairs
    expected = set()
    for cell, status in m.status.items():
        if status == OUTSIDE:
            continue
        for axis in range(2):
            nbr = tuple(c + (1 if k == axis else 0) for k, c in enumerate(cell))
            if m.status.get(nbr, OUTSIDE) == OUTSIDE:
                continue
            if status == CUT or m.status[nbr] == CUT:
                expected.add((cell, axis))
    assert faces == expected
    # every ghost face touches at least one cut cell
    for cell, axis in faces:
        nbr = tuple(c + (1 if k == axis else 0) for k, c in enumerate(cell))
        assert m.status[cell] == CUT or m.status[nbr] == CUT


def test_ghost_faces_single_cut_cell():
    class OneCut:
        kept_sign = 1
        dirichlet_edges = (True, True, True, True)

        def levelset(self, pts):
            pts = np.atleast_2d(np.asarray(pts, dtype=float))
            # small disc removed from the middle of cell (1, 1) of a 4x4 grid
            r2 = (pts[..., 0] - 0.375) ** 2 + (pts[..., 1] - 0.375) ** 2
            return r2 - 0.09**2

        def levelset_grad(self, pts):
            pts = np.atleast_2d(np.asarray(pts, dtype=float))
            g = np.empty(pts.shape[:-1] + (2,))
            g[..., 0] = 2.0 * (pts[..., 0] - 0.375)
            g[..., 1] = 2.0 * (pts[..., 1] - 0.375)
            return g

        def kept(self, phi):
            return np.asarray(phi) > 0

    m = ActiveMesh2D(grid2(4), OneCut())
    assert m.cut_cells == ((1, 1),)
    faces = ghost_faces(m)
    assert len(faces) == 4  # quad has four faces


def test_no_cut_cells_empty_ghost_set():
    class NoTrim:
        kept_sign = 1
        dirichlet_edges = (True, True, True, True)

        def levelset(self, pts):
            pts = np.atleast_2d(np.asarray(pts, dtype=float))
            return np.ones(pts.shape[:-1])

        def levelset_grad(self, pts):
            pts = np.atleast_2d(np.asarray(pts, dtype=float))
            g = np.zeros(pts.shape[:-1] + (2,))
            g[..., 0] = 1.0
            return g

        def kept(self, phi):
            return np.asarray(phi) > 0

    m = ActiveMesh2D(grid2(4), NoTrim())
    assert m.cut_cells == ()
    assert ghost_faces(m) == []
    assert abs(m.kept_area() - 1.0) <= 1e-13


def test_dirichlet_edges_clip_against_trim():
    outer, disc = planar_patch_geometry(0.0)
    g = grid2(8)
    m_outer = ActiveMesh2D(g, outer)
    m_disc = ActiveMesh2D(g, disc)
    # outer patch keeps x=0 edge only for y in [0.9, 1]
    len_left = sum(
        e.weights.sum() for e in m_outer.dirichlet if e.edge == 0
    )
    assert abs(len_left - 0.1) <= 1e-10
    # disc patch keeps x=0 edge for y in [0, 0.9]
    len_left_disc = sum(e.weights.sum() for e in m_disc.dirichlet if e.edge == 0)
    assert abs(len_left_disc - 0.9) <= 1e-10
    # full edges x=1, y=1 belong to the outer patch
    len_right = sum(e.weights.sum() for e in m_outer.dirichlet if e.edge == 1)
    assert abs(len_right - 1.0) <= 1e-12
    assert all(e.edge != 1 for e in m_disc.dirichlet)


# ---------------------------------------------------------------------------
# hybrid mesh


def _circle_points(radius, n, z=0.0):
    theta = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    return np.stack(
        [radius * np.cos(theta), radius * np.sin(theta), np.full(n, z)], axis=-1
    )


def test_voxel_index_floor_arithmetic():
    pts = _circle_points(0.9, 100)
    grid = hybrid_background_grid(pts, 0.25, 2)
    hm = extract_hybrid_mesh(grid, pts, margin=0)
    origin = np.array(grid.origin)
    for x in pts[:10]:
        idx = tuple(int(np.floor(v)) for v in (x - origin) / 0.25)
        assert idx in hm._active_set


def test_hybrid_mesh_connected_and_covering():
    pts = _circle_points(0.9, 200)
    grid = hybrid_background_grid(pts, 0.25, 2)
    hm = extract_hybrid_mesh(grid, pts, margin=1)
    active = set(hm.active_cells)
    # contains every sample's cell
    origin = np.array(grid.origin)
    for x in pts:
        idx = tuple(int(np.floor(v)) for v in (x - origin) / 0.25)
        assert idx in active
    # midpoints of consecutive samples are covered
    mids = 0.5 * (pts + np.roll(pts, -1, axis=0))
    for x in mids:
        hm.locate(x)
    # face-connected: BFS from one cell reaches all
    seen = {hm.active_cells[0]}
    stack = [hm.active_cells[0]]
    while stack:
        cell = stack.pop()
        for axis in range(3):
            for step in (-1, 1):
                nbr = tuple(c + (step if k == axis else 0) for k, c in enumerate(cell))
                if nbr in active and nbr not in seen:
                    seen.add(nbr)
                    stack.append(nbr)
    assert seen == active


def test_hybrid_mesh_matches_brute_force_mark_and_dilate():
    delta = 0.2  # smaller than h = 0.25
    pts = np.vstack([_circle_points(0.9, 300), _circle_points(0.9 + delta, 300)])
    grid = hybrid_background_grid(pts, 0.25, 2)
    hm = extract_hybrid_mesh(grid, pts, margin=1)

    origin = np.array(grid.origin)
    marked = set()
    for x in pts:
        marked.add(tuple(int(np.floor(v)) for v in (x - origin) / 0.25))
    dilated = set(marked)
    for cell in marked:
        for axis in range(3):
            for step in (-1, 1):
                nbr = tuple(c + (step if k == axis else 0) for k, c in enumerate(cell))
                if all(0 <= nbr[k] < grid.cells[k] for k in range(3)):
                    dilated.add(nbr)
    assert set(hm.active_cells) == dilated


def test_faces_unique_and_complete():
    pts = _circle_points(0.9, 200)
    grid = hybrid_background_grid(pts, 0.25, 2)
    hm = extract_hybrid_mesh(grid, pts, margin=1)
    active = set(hm.active_cells)
    seen = set()
    for cell, axis in hm.faces:
        nbr = tuple(c + (1 if k == axis else 0) for k, c in enumerate(cell))
        assert cell in active and nbr in active
        key = (cell, nbr)
        assert key not in seen
        seen.add(key)
    # brute force count of interior faces
    count = 0
    for cell in active:
        for axis in range(3):
            nbr = tuple(c + (1 if k == axis else 0) for k, c in enumerate(cell))
            if nbr in active:
                count += 1
    assert len(hm.faces) == count


def test_sample_outside_grid_raises():
    pts = _circle_points(0.9, 50)
    grid = hybrid_background_grid(pts, 0.25, 2, pad_cells=1)
    bad = np.vstack([pts, [[5.0, 5.0, 5.0]]])
    with pytest.raises(MeshError, match="grid too small"):
        extract_hybrid_mesh(grid, bad, margin=1)


def test_mesh_dump_format():
    outer, _ = planar_patch_geometry(0.0)
    m = ActiveMesh2D(grid2(4, p=1), outer)
    buf = io.StringIO()
    dump_active_mesh(m, buf)
    lines = buf.getvalue().strip().splitlines()
    cells = [l for l in lines if l.startswith("cell ")]
    faces = [l for l in lines if l.startswith("face ")]
    assert len(cells) == len(m.active_cells)
    assert len(faces) == len(m.ghost_faces)
    assert all(len(l.split()) == 4 for l in cells)

    pts = _circle_points(0.9, 50)
    grid = hybrid_background_grid(pts, 0.5, 1)
    hm = extract_hybrid_mesh(grid, pts, margin=1)
    buf = io.StringIO()
    dump_active_mesh(hm, buf)
    lines = buf.getvalue().strip().splitlines()
    assert sum(1 for l in lines if l.startswith("cell ")) == len(hm.active_cells)
    assert sum(1 for l in lines if l.startswith("face ")) == len(hm.faces)
