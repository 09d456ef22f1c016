"""Assembly and time integration of the diffuse fictitious-domain conservation law.

The semi-discrete system for the nodal vector ``u`` reads

    M(t) du/dt = -A(t) u + b(t, u) - P_lhs u + P_rhs(u)

with ``M`` the ``H_eps``-weighted mass matrix, ``A`` the weighted diffusion and
advection operators, ``b`` the interface flux term (affine in ``u``), and the
ghost penalty split into an implicit part ``P_lhs`` and a lagged target
``P_rhs``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .extrapolation import (
    BoundaryData,
    closest_point,
    flux_map,
    reconstruct,
    upwind_map,
)
from .interface import M_DAMP, damping, delta_eps, heaviside_eps
from .mesh_fe import ConvergenceError, FEField, cg_solve

log = logging.getLogger(__name__)

SKIP = 1e-12


@dataclass
class ProblemSpec:
    kappa: float
    boundary: BoundaryData
    initial: Callable
    inviscid: Optional[Callable] = None
    exact: Optional[Callable] = None
    interface_motion: str = "fixed"

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("diffusivity must be non-negative")
        if self.kappa == 0 and self.inviscid is None:
            raise ValueError("a hyperbolic problem needs an inviscid velocity")


@dataclass
class GhostPenaltyConfig:
    kind: str = "dirichlet"
    gamma: Optional[float] = None
    damped: bool = False
    lumped_lhs: bool = False
    m_damp: int = M_DAMP
    damp_flux: bool = False

    def __post_init__(self):
        if self.kind not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown ghost penalty kind {self.kind!r}")
        if self.gamma is not None and self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    def gamma_for(self, h):
        if self.gamma is not None:
            return self.gamma
        return 1.0 / h if self.kind == "dirichlet" else h


@dataclass
class TransientState:
    u: np.ndarray
    t: float
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("time step must be positive")


class PointOperator:
    """Nodal vector ``T @ f(u)`` where ``f`` is an :class:`Affine` at quadrature points.

    ``T`` already carries quadrature and coefficient weights.
    """

    def __init__(self, T, f):
        self.T = T
        self.f = f

    def __call__(self, u):
        return self.T @ self.f(u)

    def matrix(self):
        return (self.T @ self.f.A).tocsr()

    def vector(self):
        return self.T @ self.f.c


class NodalAffine:
    """Sum of a sparse matrix term and point-operator terms."""

    def __init__(self, n, matrix=None, parts=()):
        self.n = n
        self.mat = matrix
        self.parts = list(parts)

    def __call__(self, u):
        out = np.zeros(self.n) if self.mat is None else self.mat @ u
        for p in self.parts:
            out = out + p(u)
        return out

    def matrix(self):
        A = sp.csr_matrix((self.n, self.n)) if self.mat is None else self.mat.tocsr()
        for p in self.parts:
            A = A + p.matrix()
        return A

    def vector(self):
        out = np.zeros(self.n)
        for p in self.parts:
            out = out + p.vector()
        return out


def _weighted_test(mesh, idx, weights, grad=None):
    T = mesh.test_operator() if grad is None else mesh.grad_test_operator()[grad]
    Tc = T.tocsc()[:, idx]
    return (Tc @ sp.diags(weights)).tocsr()


def assemble_weighted_mass(ls, eps):
    H = heaviside_eps(ls.qp_values(), eps)
    return ls.mesh.mass_matrix(H)


def assemble_stiffness(ls, eps, kappa):
    H = heaviside_eps(ls.qp_values(), eps)
    return kappa * ls.mesh.stiffness_matrix(H)


def assemble_advection(ls, eps, velocity):
    H = heaviside_eps(ls.qp_values(), eps)
    v = velocity(ls.mesh.qpoints)
    return ls.mesh.advection_matrix(v, H)


@dataclass
class Operators:
    """Discrete operators for one level set geometry."""

    ls: object
    eps: float
    t: float
    M: sp.csr_matrix
    A: sp.csr_matrix
    interface: NodalAffine
    P_lhs: sp.csr_matrix
    P_rhs: NodalAffine
    stats: dict = field(default_factory=dict)

    @property
    def mesh(self):
        return self.ls.mesh

    def lumped_mass(self, floor=1e-12):
        m = np.asarray(self.M.sum(axis=1)).ravel()
        return np.maximum(m, floor * self.mesh.h**2)


class _QPGeometry:
    """Closest-point data for a subset of quadrature points, computed once."""

    def __init__(self, ls, eps, idx, method):
        self.idx = idx
        pts = ls.mesh.qpoints[idx]
        self.cp = closest_point(ls, pts, eps, method=method, strict=False)

    def sub(self, mask):
        return self.cp.subset(mask)


def build_operators(ls, eps, spec, cfg, t=0.0, method="traversal", skip=SKIP):
    """Assemble every operator of the semi-discrete system for geometry ``ls``."""
    mesh = ls.mesh
    N = mesh.n_nodes
    bd = spec.boundary
    phi = ls.qp_values()
    gnorm = ls.qp_grad_norm()
    H = heaviside_eps(phi, eps)

    M = mesh.mass_matrix(H)
    A = spec.kappa * mesh.stiffness_matrix(H) if spec.kappa else sp.csr_matrix((N, N))
    if spec.inviscid is not None:
        A = A + mesh.advection_matrix(spec.inviscid(mesh.qpoints), H)

    w_if = delta_eps(phi, eps) * gnorm
    need_if = w_if >= skip
    gamma = cfg.gamma_for(mesh.h)
    w_gp = 1.0 - H
    if cfg.damped:
        w_gp = w_gp * damping(phi, eps, cfg.m_damp)
    need_gp = (w_gp >= skip) & (gamma > 0)

    union = np.flatnonzero(need_if | need_gp)
    geo = _QPGeometry(ls, eps, union, method)
    cp_all = geo.cp
    in_if = need_if[union]
    in_gp = need_gp[union]
    bad = ~cp_all.ok & (in_if | in_gp)
    if np.any(bad):
        weight = np.where(in_if, w_if[union], 0) + np.where(in_gp, w_gp[union], 0)
        worst = weight[bad].max()
        log.warning("closest-point search failed at %d points (max weight %.2e)", bad.sum(), worst)
        if worst > 1e-6:
            cp_all.subset(bad).raise_for_status()

    # interface flux term b = -int phi_i G delta |grad phi|
    cp_if = cp_all.subset(in_if)
    idx_if = union[in_if]
    G = flux_map(cp_if, bd, mesh, spec.kappa, phi_Q=phi[idx_if], eps=eps,
                 damped=cfg.damp_flux, m=cfg.m_damp, velocity=spec.inviscid, t=t)
    okf = cp_if.ok.astype(float)
    T_if = _weighted_test(mesh, idx_if, -w_if[idx_if] * okf)
    interface = NodalAffine(N, parts=[PointOperator(T_if, G)])

    # ghost penalty
    cp_gp = cp_all.subset(in_gp)
    idx_gp = union[in_gp]
    okg = cp_gp.ok.astype(float)
    if cfg.kind == "dirichlet":
        P_lhs = gamma * mesh.mass_matrix()
        if cfg.lumped_lhs:
            P_lhs = sp.diags(np.asarray(P_lhs.sum(axis=1)).ravel()).tocsr()
        if spec.inviscid is not None:
            _, U, _ = upwind_map(cp_gp, bd, mesh, spec.inviscid, t)
        else:
            U = reconstruct(cp_gp, bd, mesh, t).value_linear()
        T_gp = _weighted_test(mesh, idx_gp, gamma * w_gp[idx_gp] * okg)
        P_rhs = NodalAffine(N, matrix=gamma * M, parts=[PointOperator(T_gp, U)])
    else:
        P_lhs = gamma * mesh.stiffness_matrix()
        rec = reconstruct(cp_gp, bd, mesh, t)
        gx, gy = rec.grad
        s = gamma * w_gp[idx_gp] * okg
        parts = [
            PointOperator(_weighted_test(mesh, idx_gp, s, grad=0), gx),
            PointOperator(_weighted_test(mesh, idx_gp, s, grad=1), gy),
        ]
        P_rhs = NodalAffine(N, matrix=gamma * mesh.stiffness_matrix(H), parts=parts)

    stats = {
        "interface_points": int(in_if.sum()),
        "penalty_points": int(in_gp.sum()),
        "search_steps_max": int(cp_all.steps.max()) if len(cp_all) else 0,
        "failed": int(bad.sum()),
    }
    return Operators(ls, eps, t, M, A.tocsr(), interface, P_lhs.tocsr(), P_rhs, stats)


def assemble_interface_rhs(ls, eps, u_h, spec, cfg, t=0.0, method="traversal"):
    ops = build_operators(ls, eps, spec, cfg, t=t, method=method)
    return ops.interface(u_h.coefficients if isinstance(u_h, FEField) else u_h)


def assemble_ghost_penalty(ls, eps, u_lagged, spec, cfg, t=0.0, method="traversal"):
    """``(lhs matrix, rhs vector)`` of the fixed-point split of the ghost penalty."""
    ops = build_operators(ls, eps, spec, cfg, t=t, method=method)
    u = u_lagged.coefficients if isinstance(u_lagged, FEField) else u_lagged
    return ops.P_lhs, ops.P_rhs(u)


def _solve(A, b, symmetric=False):
    if symmetric:
        x, _ = cg_solve(A, b, tol=1e-10)
        return x
    return spla.spsolve(A.tocsc(), b)


def step_crank_nicolson(state, ops_old, ops_new, implicit_interface=True):
    """One Crank-Nicolson step from ``ops_old`` (time t^n) to ``ops_new`` (t^{n+1}).

    The mass term is discretized as ``(M^{n+1} u^{n+1} - M^n u^n)/dt``; the
    ghost penalty uses one lagged fixed-point pass with the new geometry.
    """
    dt = state.dt
    u = state.u
    lhs = ops_new.M / dt + 0.5 * ops_new.A + ops_new.P_lhs
    rhs = ops_old.M @ u / dt - 0.5 * (ops_old.A @ u) + ops_new.P_rhs(u)
    if implicit_interface:
        lhs = lhs - 0.5 * ops_new.interface.matrix()
        rhs = rhs + 0.5 * ops_old.interface(u) + 0.5 * ops_new.interface.vector()
        symmetric = False
    else:
        rhs = rhs + ops_old.interface(u)
        symmetric = True
    unew = _solve(lhs.tocsr(), rhs, symmetric=symmetric)
    if not np.all(np.isfinite(unew)):
        raise ConvergenceError("Crank-Nicolson solve produced non-finite values")
    return TransientState(unew, state.t + dt, dt)


def step_heun(state, ops, lumped_mass=True):
    """Heun (SSP-RK2) step for a fixed geometry.

    Each forward-Euler stage treats the (lumped) ghost penalty matrix
    implicitly; with lumped mass that is a diagonal solve.
    """
    dt = state.dt
    u0 = state.u
    if lumped_mass:
        m = ops.lumped_mass()
        p = ops.P_lhs.diagonal()
        diagonal = (ops.P_lhs - sp.diags(p)).count_nonzero() == 0
        lhs = None if diagonal else (sp.diags(m) + dt * ops.P_lhs).tocsr()
        denom = m + dt * p

        def euler(u):
            r = m * u + dt * (-(ops.A @ u) + ops.interface(u) + ops.P_rhs(u))
            return r / denom if lhs is None else _solve(lhs, r, symmetric=True)
    else:
        lhs = (ops.M + dt * ops.P_lhs).tocsr()
        lu = spla.splu(lhs.tocsc())

        def euler(u):
            r = ops.M @ u + dt * (-(ops.A @ u) + ops.interface(u) + ops.P_rhs(u))
            return lu.solve(r)

    u1 = euler(u0)
    u2 = euler(u1)
    return TransientState(0.5 * (u0 + u2), state.t + dt, dt)


def solve_steady(ops, u0, pseudo_dt, tol=1e-9, max_steps=100_000):
    """Backward-Euler pseudo-time marching to the steady state.

    Each pseudo-step refreshes the lagged ghost-penalty target, so the loop is
    the fixed-point iteration of the penalty split. Returns ``(u, steps)``.
    """
    lhs = (ops.M / pseudo_dt + ops.A - ops.interface.matrix() + ops.P_lhs).tocsc()
    lu = spla.splu(lhs)
    b0 = ops.interface.vector()
    Mdt = ops.M / pseudo_dt
    u = np.array(u0, dtype=float)
    for step in range(1, max_steps + 1):
        unew = lu.solve(Mdt @ u + b0 + ops.P_rhs(u))
        if not np.all(np.isfinite(unew)):
            raise ConvergenceError("pseudo-time iteration diverged", iterations=step)
        change = np.max(np.abs(unew - u)) / pseudo_dt
        u = unew
        if change <= tol:
            return u, step
    raise ConvergenceError(
        f"steady state not reached in {max_steps} pseudo-steps (change {change:.3e})",
        residual=change,
        iterations=max_steps,
    )
