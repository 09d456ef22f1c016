import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp

from diffsbm.extrapolation import BoundaryData
from diffsbm.interface import Circle, LevelSetField
from diffsbm.mesh_fe import ConvergenceError, build_mesh, cg_solve
from diffsbm.transport_solver import (
    GhostPenaltyConfig,
    NodalAffine,
    Operators,
    ProblemSpec,
    TransientState,
    assemble_advection,
    assemble_ghost_penalty,
    assemble_interface_rhs,
    assemble_stiffness,
    assemble_weighted_mass,
    build_operators,
    solve_steady,
    step_crank_nicolson,
    step_heun,
)

CIRCLE = Circle((0.5, 0.5), 0.25)


def saddle(x, t=0.0):
    x = np.atleast_2d(x)
    return (x[:, 0] - 0.5) ** 2 - (x[:, 1] - 0.5) ** 2


def linear(x, t=0.0):
    x = np.atleast_2d(x)
    return 0.3 + 1.5 * x[:, 0] - 0.7 * x[:, 1]


def flat_ls(nx, value=10.0):
    """Level set far above zero everywhere: ``H_eps == 1``, no interface."""
    m = build_mesh(nx)
    return LevelSetField(m, np.full(m.n_nodes, value))


def elliptic_spec(data=saddle):
    return ProblemSpec(1.0, BoundaryData(dirichlet=data), data)


def test_problem_spec_invariants():
    with pytest.raises(ValueError):
        ProblemSpec(-1.0, BoundaryData(dirichlet=saddle), saddle)
    with pytest.raises(ValueError):
        ProblemSpec(0.0, BoundaryData(dirichlet=saddle), saddle)
    with pytest.raises(ValueError):
        GhostPenaltyConfig(kind="robin")
    with pytest.raises(ValueError):
        TransientState(np.zeros(3), 0.0, 0.0)
    assert GhostPenaltyConfig().gamma_for(0.1) == pytest.approx(10.0)
    assert GhostPenaltyConfig(kind="neumann").gamma_for(0.1) == pytest.approx(0.1)


def test_weighted_mass_limits():
    ls = flat_ls(8)
    M = assemble_weighted_mass(ls, 0.25)
    M0 = ls.mesh.mass_matrix()
    assert abs(M - M0).max() < 1e-15
    np.testing.assert_allclose(np.asarray(M.sum(axis=1)).ravel(), ls.mesh.lumped_mass())


def test_weighted_mass_area():
    m = build_mesh(128)
    ls = LevelSetField.from_analytic(m, CIRCLE)
    M = assemble_weighted_mass(ls, 2 * m.h)
    assert M.sum() == pytest.approx(np.pi / 16, rel=1e-2)
    assert abs(M - M.T).max() < 1e-18


def test_stiffness_and_advection():
    ls = flat_ls(8)
    K = assemble_stiffness(ls, 0.25, 1.0)
    np.testing.assert_allclose(K @ np.ones(ls.mesh.n_nodes), 0.0, atol=1e-13)
    assert assemble_stiffness(ls, 0.25, 0.0).count_nonzero() == 0
    rot = lambda x: np.column_stack([0.5 - x[:, 1], x[:, 0] - 0.5])
    C = assemble_advection(ls, 0.25, rot)
    nodes = ls.mesh.nodes
    interior = (nodes > 0).all(axis=1) & (nodes < 1).all(axis=1)
    np.testing.assert_allclose((C @ np.ones(len(nodes)))[interior], 0.0, atol=1e-14)


def test_interface_rhs_without_interface_is_zero():
    ls = flat_ls(16)
    b = assemble_interface_rhs(ls, 2 / 16, np.ones(ls.mesh.n_nodes), elliptic_spec(),
                               GhostPenaltyConfig())
    assert np.abs(b).max() == 0.0


def test_interface_rhs_support():
    m = build_mesh(64)
    eps = 2 * m.h
    ls = LevelSetField.from_analytic(m, CIRCLE)
    b = assemble_interface_rhs(ls, eps, saddle(m.nodes), elliptic_spec(), GhostPenaltyConfig())
    big = np.abs(b) > 1e-8 * np.abs(b).max()
    assert np.abs(ls.values[big]).max() <= 4 * eps + np.sqrt(2) * m.h


def test_steady_residual_consistency():
    sums = []
    for nx in (32, 64, 128):
        m = build_mesh(nx)
        eps = 2 * m.h
        ls = LevelSetField.from_analytic(m, CIRCLE)
        ops = build_operators(ls, eps, elliptic_spec(), GhostPenaltyConfig())
        u = saddle(m.nodes)
        r = -ops.A @ u + ops.interface(u) - ops.P_lhs @ u + ops.P_rhs(u)
        keep = ls.values > -2 * eps  # drop penalty rows deep in the fictitious domain
        sums.append(np.abs(r[keep]).sum())
    rates = np.log2(np.array(sums[:-1]) / np.array(sums[1:]))
    assert np.all(rates >= 1.0)


def test_ghost_penalty_linear_fixed_point():
    m = build_mesh(32)
    ls = LevelSetField.from_analytic(m, CIRCLE, root_source="analytic")
    u = linear(m.nodes)
    for cfg in (GhostPenaltyConfig(), GhostPenaltyConfig(lumped_lhs=False),
                GhostPenaltyConfig(kind="neumann")):
        lhs, rhs = assemble_ghost_penalty(ls, 2 * m.h, u, elliptic_spec(linear), cfg)
        assert np.abs(lhs @ u - rhs).max() <= 1e-10 * np.abs(rhs).max()


def test_ghost_penalty_zero_gamma():
    m = build_mesh(16)
    ls = LevelSetField.from_analytic(m, CIRCLE)
    lhs, rhs = assemble_ghost_penalty(ls, 2 * m.h, saddle(m.nodes), elliptic_spec(),
                                      GhostPenaltyConfig(gamma=0.0))
    assert abs(lhs).max() == 0
    assert np.abs(rhs).max() == 0


def test_implicit_system_is_spd():
    m = build_mesh(32)
    ls = LevelSetField.from_analytic(m, CIRCLE)
    ops = build_operators(ls, 2 * m.h, elliptic_spec(), GhostPenaltyConfig())
    dt = 3.2 * m.h
    S = (ops.M + 0.5 * dt * ops.A + ops.P_lhs).tocsr()
    assert abs(S - S.T).max() < 1e-12
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = rng.standard_normal(m.n_nodes)
        assert v @ (S @ v) > 0
    cg_solve(S, rng.standard_normal(m.n_nodes))


def _no_interface_ops(nx, kappa=1.0, velocity=None):
    ls = flat_ls(nx)
    spec = ProblemSpec(kappa, BoundaryData(dirichlet=saddle), saddle, inviscid=velocity)
    return build_operators(ls, 2 * ls.mesh.h, spec, GhostPenaltyConfig(gamma=0.0))


def test_crank_nicolson_eigenmode_decay():
    ops = _no_interface_ops(8)
    lam, vecs = sla.eigh(ops.A.toarray(), ops.M.toarray())
    k = 5
    u0 = vecs[:, k]
    dt = 0.05
    st = step_crank_nicolson(TransientState(u0, 0.0, dt), ops, ops)
    factor = (1 - 0.5 * lam[k] * dt) / (1 + 0.5 * lam[k] * dt)
    np.testing.assert_allclose(st.u, factor * u0, atol=1e-8)


def test_crank_nicolson_small_step():
    ops = _no_interface_ops(8)
    u0 = saddle(ops.mesh.nodes)
    st = step_crank_nicolson(TransientState(u0, 0.0, 1e-8), ops, ops)
    assert np.abs(st.u - u0).max() < 1e-5


def test_time_orders():
    ops = _no_interface_ops(8)
    u0 = np.cos(np.pi * ops.mesh.nodes[:, 0]) + ops.mesh.nodes[:, 1] ** 2
    T = 0.2
    M, A = ops.M.toarray(), ops.A.toarray()
    exact_cn = sla.expm(-T * np.linalg.solve(M, A)) @ u0
    mL = ops.lumped_mass()
    exact_heun = sla.expm(-T * (A / mL[:, None])) @ u0

    def run(stepper, n):
        st = TransientState(u0, 0.0, T / n)
        for _ in range(n):
            st = stepper(st)
        return st.u

    e_cn = [np.abs(run(lambda s: step_crank_nicolson(s, ops, ops), n) - exact_cn).max()
            for n in (10, 20, 40)]
    e_h = [np.abs(run(lambda s: step_heun(s, ops), n) - exact_heun).max() for n in (40, 80, 160)]
    assert np.all(np.log2(np.array(e_cn[:-1]) / np.array(e_cn[1:])) > 1.9)
    assert np.all(np.log2(np.array(e_h[:-1]) / np.array(e_h[1:])) > 1.9)


def test_heun_amplification_factor():
    n = 3
    I = sp.identity(n, format="csr")
    ls = flat_ls(2)
    zero = sp.csr_matrix((n, n))
    ops = Operators(ls, 1.0, 0.0, I, I, NodalAffine(n), zero, NodalAffine(n))
    dt = 0.1
    st = step_heun(TransientState(np.ones(n), 0.0, dt), ops)
    np.testing.assert_allclose(st.u, 1 - dt + dt**2 / 2, atol=1e-12)


def test_heun_constant_state_without_flow():
    ops = _no_interface_ops(8, kappa=0.0, velocity=lambda x: np.zeros((len(x), 2)))
    u0 = np.full(ops.mesh.n_nodes, 1.3)
    st = step_heun(TransientState(u0, 0.0, 0.01), ops)
    np.testing.assert_allclose(st.u, u0, atol=1e-14)


def test_solve_steady_diagonal_system():
    n = 4
    I = sp.identity(n, format="csr")
    ls = flat_ls(2)
    rhs = NodalAffine(n, parts=[])
    ops = Operators(ls, 1.0, 0.0, I, I * 0.0, NodalAffine(n), I * 1e6, rhs)
    u, steps = solve_steady(ops, np.ones(n), 0.1)
    assert steps <= 3
    np.testing.assert_allclose(u, 0.0, atol=1e-9)


def test_solve_steady_step_budget_exhausted():
    m = build_mesh(16)
    ls = LevelSetField.from_analytic(m, CIRCLE)
    ops = build_operators(ls, 2 * m.h, elliptic_spec(), GhostPenaltyConfig())
    with pytest.raises(ConvergenceError):
        solve_steady(ops, np.zeros(m.n_nodes), 3.2 * m.h, max_steps=3)
