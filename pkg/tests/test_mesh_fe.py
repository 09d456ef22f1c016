import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from diffsbm.mesh_fe import (
    ConvergenceError,
    FEField,
    OutOfDomainError,
    QuadratureRule,
    build_mesh,
    cg_solve,
    shape_values,
    write_vtk,
)


def test_build_mesh_sizes():
    m = build_mesh(16)
    assert m.h == pytest.approx(0.0625)
    assert m.n_nodes == 289
    assert m.n_cells == 256
    assert build_mesh(128).h == pytest.approx(1 / 128)


def test_build_mesh_rejects_degenerate():
    with pytest.raises(ValueError):
        build_mesh(1)


def test_locate_cell_grid_point():
    m = build_mesh(10)
    cell, local = m.locate_cell(np.array([0.3, 0.7]))
    assert cell == 7 * 10 + 3
    np.testing.assert_allclose(local, [0.0, 0.0], atol=1e-12)


def test_locate_cell_shared_corner_is_deterministic():
    m = build_mesh(2)
    a = m.locate_cell(np.array([0.5, 0.5]))
    b = m.locate_cell(np.array([0.5, 0.5]))
    assert a[0] == b[0]
    # the point is a corner of the returned cell
    assert np.all(np.isin(a[1], [0.0, 1.0]))


def test_locate_cell_outside():
    with pytest.raises(OutOfDomainError):
        build_mesh(4).locate_cell(np.array([1.2, 0.5]))


def test_eval_reproduces_linear_field():
    m = build_mesh(8)
    f = FEField.interpolate(m, lambda x: x[:, 0] + 2 * x[:, 1])
    pts = np.random.default_rng(0).random((200, 2))
    np.testing.assert_allclose(f.eval(pts), pts[:, 0] + 2 * pts[:, 1], atol=1e-13)
    np.testing.assert_allclose(f.eval_grad(pts), np.tile([1.0, 2.0], (200, 1)), atol=1e-12)


def test_eval_quadratic_interpolation_error_is_second_order():
    m = build_mesh(128)
    u = lambda x: (x[:, 0] - 0.5) ** 2 - (x[:, 1] - 0.5) ** 2
    f = FEField.interpolate(m, u)
    pts = np.random.default_rng(1).random((1000, 2))
    err = np.abs(f.eval(pts) - u(pts)).max()
    # bilinear interpolation error bound h^2/8 (|u_xx| + |u_yy|)
    assert err <= 0.5 * m.h**2


def test_constant_field_has_zero_gradient():
    m = build_mesh(4)
    f = FEField(m, np.full(m.n_nodes, 3.0))
    np.testing.assert_allclose(f.eval_grad(np.array([[0.3, 0.4]])), [[0.0, 0.0]], atol=1e-14)


def test_eval_out_of_domain():
    m = build_mesh(4)
    with pytest.raises(OutOfDomainError):
        FEField(m, np.zeros(m.n_nodes)).eval(np.array([[-0.1, 0.5]]))


def test_partition_of_unity():
    m = build_mesh(5)
    T = m.interp_matrix(m.qpoints)
    np.testing.assert_allclose(np.asarray(T.sum(axis=1)).ravel(), 1.0, atol=1e-14)
    assert np.all(np.abs(shape_values(m.quad.points).sum(axis=1) - 1) < 1e-14)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_q1_reproduces_bilinears(c):
    m = build_mesh(6)
    f = lambda x: c[0] + c[1] * x[:, 0] + c[2] * x[:, 1] + c[3] * x[:, 0] * x[:, 1]
    pts = np.random.default_rng(2).random((50, 2))
    np.testing.assert_allclose(FEField.interpolate(m, f).eval(pts), f(pts), atol=1e-11)


def test_quadrature_exact_for_monomials():
    rule = QuadratureRule.gauss(3)
    assert rule.weights.sum() == pytest.approx(1.0)
    for p in range(rule.degree + 1):
        for q in range(rule.degree + 1):
            val = np.sum(rule.weights * rule.points[:, 0] ** p * rule.points[:, 1] ** q)
            assert val == pytest.approx(1.0 / ((p + 1) * (q + 1)), abs=1e-14)


def test_mass_and_stiffness_basic_properties():
    m = build_mesh(8)
    M = m.mass_matrix()
    K = m.stiffness_matrix()
    assert M.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(K @ np.ones(m.n_nodes), 0.0, atol=1e-12)
    assert abs(M - M.T).max() == 0
    assert abs(K - K.T).max() < 1e-14
    np.testing.assert_allclose(m.lumped_mass().sum(), 1.0)


def test_ray_exit_right_neighbour():
    m = build_mesh(4)
    cell = 5  # (1, 1)
    center = m.cell_origin(cell) + 0.5 * m.h
    pt, nxt = m.ray_exit(cell, center, np.array([1.0, 0.0]))
    np.testing.assert_allclose(pt, [2 * m.h, 1.5 * m.h])
    assert nxt == 6


def test_ray_exit_leaves_domain():
    m = build_mesh(4)
    pt, nxt = m.ray_exit(4, np.array([0.1, 0.3]), np.array([-1.0, 0.0]))
    assert nxt is None
    np.testing.assert_allclose(pt, [0.0, 0.3])


def test_ray_exit_through_corner():
    m = build_mesh(4)
    cell = 5
    origin = m.cell_origin(cell) + 0.5 * m.h
    d = np.array([1.0, 1.0]) / np.sqrt(2)
    pt, nxt = m.ray_exit(cell, origin, d)
    # brute force: minimal positive parameter over the four edges
    lo = m.cell_origin(cell)
    cands = []
    for k, bound in ((0, lo[0]), (0, lo[0] + m.h), (1, lo[1]), (1, lo[1] + m.h)):
        s = (bound - origin[k]) / d[k]
        if s > 0:
            cands.append(s)
    np.testing.assert_allclose(pt, origin + min(cands) * d, atol=1e-14)
    assert nxt == 10  # diagonal neighbour (2, 2)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0, 2 * np.pi))
def test_ray_chain_terminates(x, y, angle):
    m = build_mesh(8)
    d = np.array([np.cos(angle), np.sin(angle)])
    cell, _ = m.locate_cell(np.array([x, y]))
    pt = np.array([x, y])
    for _ in range(m.nx + m.ny + 2):
        pt, cell = m.ray_exit(cell, pt, d)
        if cell is None:
            break
    assert cell is None


def test_cg_identity_one_iteration():
    b = np.random.default_rng(3).random(10)
    x, it = cg_solve(sp.identity(10, format="csr"), b)
    np.testing.assert_allclose(x, b)
    assert it <= 1


def test_cg_matches_direct_solve():
    n = 50
    A = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]).tocsr()
    x, _ = cg_solve(A, np.ones(n), tol=1e-12)
    np.testing.assert_allclose(x, np.linalg.solve(A.toarray(), np.ones(n)), rtol=1e-9)


def test_cg_indefinite_reports_failure():
    A = sp.diags([1.0, -1.0, 2.0, -3.0]).tocsr()
    A = A + sp.diags([0.5, 0.5, 0.5], 1) + sp.diags([0.5, 0.5, 0.5], -1)
    with pytest.raises(ConvergenceError):
        cg_solve(A.tocsr(), np.ones(4), maxit=40)


def test_write_vtk(tmp_path):
    m = build_mesh(3)
    path = tmp_path / "f.vtk"
    write_vtk(path, m, {"u": np.arange(m.n_nodes, dtype=float)})
    text = path.read_text()
    assert "STRUCTURED_POINTS" in text
    assert "DIMENSIONS 4 4 1" in text
    assert "SCALARS u double 1" in text
