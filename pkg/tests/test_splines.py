import numpy as np
import pytest

from gapfem.splines import (
    KnotGrid,
    bspline_all_ders,
    make_space,
    open_knot_vector,
)


def grid2(n=4, p=2, h=0.25):
    return KnotGrid(origin=(0.0, 0.0), cell_size=h, cells=(n, n), degree=p)


def test_open_knot_vector_counts():
    t = open_knot_vector(4, 2, origin=0.0, cell_size=0.25)
    assert t.size == 4 + 2 * 2 + 1
    assert np.all(t[:3] == 0.0) and np.all(t[-3:] == 1.0)


def test_dof_counts_1d_view():
    # p=1, 4 cells all active -> 5 dofs along that axis
    g = KnotGrid(origin=(0.0, 0.0), cell_size=0.25, cells=(4, 1), degree=1)
    sp = make_space(g, g.all_cells())
    assert sp.dof_count == 5 * 2  # tensor with the single-cell axis (2 funcs)
    assert g.n_basis(0) == 5


def test_dof_counts_2d_full():
    sp = make_space(grid2(4, 2), grid2(4, 2).all_cells())
    assert sp.dof_count == 36


def test_dof_counts_single_active_cell():
    g = grid2(4, 1)
    sp = make_space(g, [(0, 0)])
    assert sp.dof_count == 4


def test_empty_active_set_raises():
    with pytest.raises(ValueError, match="empty space"):
        make_space(grid2(), [])


def test_partition_of_unity_random_points():
    rng = np.random.default_rng(3)
    for p in (1, 2, 3):
        g = grid2(5, p, h=0.2)
        sp = make_space(g, g.all_cells())
        pts = rng.uniform(0.0, 1.0, size=(1000, 2))
        worst = 0.0
        gworst = 0.0
        for x in pts:
            ev = sp.eval_basis(g.locate(x), x, 1)
            worst = max(worst, abs(ev.values.sum() - 1.0))
            gworst = max(gworst, np.abs(ev.gradient.sum(axis=0)).max())
        assert worst <= 1e-12
        assert gworst <= 1e-11 / g.cell_size


def test_hat_function_values_and_slopes():
    # p=1 on [0, h]: midpoint values 0.5 each, slopes -1/h and +1/h
    h = 0.5
    knots = open_knot_vector(1, 1, 0.0, h)
    ders = bspline_all_ders(knots, 1, 1, 0.25, 1)
    assert np.allclose(ders[0], [0.5, 0.5])
    assert np.allclose(ders[1], [-1.0 / h, 1.0 / h])


def test_max_order_and_outside_point_errors():
    g = grid2()
    sp = make_space(g, g.all_cells())
    with pytest.raises(ValueError, match="max_order"):
        sp.eval_basis((0, 0), (0.1, 0.1), 3)
    with pytest.raises(ValueError, match="outside cell"):
        sp.eval_basis((0, 0), (0.6, 0.1), 1)


def test_constant_field_reproduction():
    g = grid2(4, 3)
    sp = make_space(g, g.all_cells())
    coefs = np.full(sp.dof_count, 4.25)
    fe = sp.eval_field(coefs, (0.37, 0.81))
    assert abs(fe.value - 4.25) <= 1e-12
    assert np.abs(fe.gradient).max() <= 1e-10


def test_greville_linear_reproduction():
    rng = np.random.default_rng(11)
    for p in (1, 2, 3):
        g = grid2(4, p)
        sp = make_space(g, g.all_cells())
        for axis in (0, 1):
            coefs = sp.greville_field(axis)
            for x in rng.uniform(0.0, 1.0, size=(50, 2)):
                fe = sp.eval_field(coefs, x)
                assert abs(fe.value - x[axis]) <= 1e-12


def test_coefficient_length_mismatch():
    g = grid2()
    sp = make_space(g, g.all_cells())
    with pytest.raises(ValueError, match="coefficient length"):
        sp.eval_field(np.ones(sp.dof_count + 1), (0.5, 0.5))


def _lstsq_fit(space, f, rng, n_samples=400):
    """Independent dense least-squares fit of f on the space."""
    pts = rng.uniform(0.0, 1.0, size=(n_samples, 2))
    A = np.zeros((n_samples, space.dof_count))
    b = np.empty(n_samples)
    for i, x in enumerate(pts):
        ev = space.eval_basis(space.grid.locate(x), x, 0)
        A[i, ev.dofs] = ev.values
        b[i] = f(x)
    coefs, *_ = np.linalg.lstsq(A, b, rcond=None)
    return coefs


@pytest.mark.parametrize("p", [1, 2, 3])
def test_polynomial_reproduction(p):
    rng = np.random.default_rng(5 + p)
    g = grid2(4, p)
    sp = make_space(g, g.all_cells())

    def poly(x):
        # total degree <= p
        if p == 1:
            return 1.0 + 2.0 * x[0] - 0.5 * x[1]
        if p == 2:
            return 0.3 + x[0] - x[1] + 2.0 * x[0] * x[1] - 0.7 * x[0] ** 2
        return 0.1 + x[0] ** 3 - 2.0 * x[0] * x[1] ** 2 + 0.5 * x[1]

    coefs = _lstsq_fit(sp, poly, rng)
    for x in rng.uniform(0.0, 1.0, size=(100, 2)):
        fe = sp.eval_field(coefs, x)
        assert abs(fe.value - poly(x)) <= 1e-10


def test_quadratic_reproduction_through_interpolation_oracle():
    rng = np.random.default_rng(17)
    g = grid2(4, 2)
    sp = make_space(g, g.all_cells())
    coefs = _lstsq_fit(sp, lambda x: x[0] ** 2, rng)
    for x in rng.uniform(0.0, 1.0, size=(100, 2)):
        assert abs(sp.eval_field(coefs, x).value - x[0] ** 2) <= 1e-12


@pytest.mark.parametrize("p", [1, 2, 3])
def test_smoothness_across_interior_faces(p):
    """Jumps of normal derivatives of order < p vanish; order p generally not."""
    g = grid2(4, p)
    sp = make_space(g, g.all_cells())
    h = g.cell_size
    rng = np.random.default_rng(2)
    top_jump = 0.0
    for _ in range(20):
        # random interior vertical face between cells (i, j) and (i+1, j)
        i = rng.integers(0, 3)
        j = rng.integers(0, 4)
        y = (j + rng.uniform(0.1, 0.9)) * h
        x = (i + 1) * h
        evL = sp.eval_basis((i, j), (x, y), p)
        evR = sp.eval_basis((i + 1, j), (x, y), p)
        for l in range(p):
            left = dict(zip(evL.dofs, evL.axis_derivative(l, 0)))
            right = dict(zip(evR.dofs, evR.axis_derivative(l, 0)))
            for dof in set(left) | set(right):
                jump = left.get(dof, 0.0) - right.get(dof, 0.0)
                assert abs(jump) <= 1e-12 / h**l
        left = dict(zip(evL.dofs, evL.axis_derivative(p, 0)))
        right = dict(zip(evR.dofs, evR.axis_derivative(p, 0)))
        top_jump = max(
            top_jump,
            max(abs(left.get(d, 0.0) - right.get(d, 0.0)) for d in set(left) | set(right)),
        )
    assert top_jump > 1e-6  # order-p jump is genuinely nonzero


def test_first_derivative_matches_finite_differences():
    g = KnotGrid(origin=(0.0, 0.0, 0.0), cell_size=0.2, cells=(3, 3, 3), degree=3)
    sp = make_space(g, g.all_cells())
    rng = np.random.default_rng(9)
    step = 1e-6 * g.cell_size
    for _ in range(10):
        x = rng.uniform(0.05, 0.55, size=3)
        cell = g.locate(x)
        ev = sp.eval_basis(cell, x, 1)
        for ax in range(3):
            d = np.zeros(3)
            d[ax] = step
            fd = (
                sp.eval_basis(cell, x + d, 0).values
                - sp.eval_basis(cell, x - d, 0).values
            ) / (2 * step)
            scale = max(np.abs(ev.gradient[:, ax]).max(), 1e-12)
            assert np.abs(fd - ev.gradient[:, ax]).max() / scale <= 1e-6


def test_scattered_matches_single_point_eval():
    g = grid2(4, 2)
    sp = make_space(g, g.all_cells())
    rng = np.random.default_rng(21)
    cell = (1, 2)
    lo, hi = g.cell_bounds(cell)
    pts = rng.uniform(lo, hi, size=(7, 2))
    dofs, vals, grads = sp.eval_scattered(cell, pts, max_order=1)
    for q, x in enumerate(pts):
        ev = sp.eval_basis(cell, x, 1)
        assert np.allclose(vals[q], ev.values, atol=1e-14)
        assert np.allclose(grads[q], ev.gradient, atol=1e-12)
