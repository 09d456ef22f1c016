"""Conservative level set transport with extension velocities.

The level set is advanced through its regularized sign function while an
Eikonal-type penalty ``lambda (grad phi - q)`` keeps it close to a signed
distance function. The normal field ``q`` is the lumped-mass averaged gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .extrapolation import closest_point, extension_velocity
from .interface import (
    SIGMA,
    AveragedGradient,
    LevelSetField,
    averaged_gradient,
    delta_eps,
    heaviside_eps,
)
from .mesh_fe import FEField, cg_solve

BAND_SKIP = 1e-12
LAMBDA_FACTOR = 16.0  # default lambda = LAMBDA_FACTOR * h


@dataclass
class EvolutionParams:
    dt: float
    eps: float
    lam: Optional[float] = None  # defaults to LAMBDA_FACTOR * h
    sigma: float = SIGMA
    floor: float = 1e-3  # mass floor beta = floor / eps
    cg_tol: float = 1e-10

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("time step must be positive")
        if not self.eps > 0:
            raise ValueError("interface thickness must be positive")
        if self.lam is not None and not self.lam > 0:
            raise ValueError("penalty parameter must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def lam_for(self, h):
        return self.lam if self.lam is not None else LAMBDA_FACTOR * h


@dataclass
class LevelSetState:
    phi: FEField
    q: AveragedGradient
    t: float = 0.0

    @classmethod
    def from_values(cls, mesh, values, t=0.0, sigma=SIGMA):
        phi = FEField(mesh, np.asarray(values, dtype=float))
        return cls(phi, averaged_gradient(phi, sigma), t)

    @property
    def mesh(self):
        return self.phi.mesh

    def level_set(self):
        """View as a :class:`LevelSetField` (FE roots, averaged normals)."""
        ls = LevelSetField(self.mesh, self.phi.coefficients, t=self.t,
                           q_source="averaged", sigma=self.q.sigma)
        ls._avg = self.q
        return ls


def evolve_step(state, velocity, params):
    """Advance the level set by one semi-implicit step.

    ``velocity(x)`` returns the extension velocity at points ``x`` (n, 2).
    The time derivative of the sign function is linearized by the chain rule
    with a lumped, floored weight; transport is explicit and the Eikonal
    penalty implicit in the new level set.
    """
    mesh = state.mesh
    dt, eps = params.dt, params.eps
    lam = params.lam_for(mesh.h)
    c = state.phi.coefficients

    beta = params.floor / eps
    W = mesh.lumped_mass() * np.maximum(2.0 * delta_eps(c, eps), beta)

    phi_q = mesh.field_at_qpoints(c)
    g_q = mesh.grad_at_qpoints(c)
    d_q = 2.0 * delta_eps(phi_q, eps)
    band = d_q >= BAND_SKIP
    vg = np.zeros(mesh.n_cells * mesh.nq)
    if np.any(band):
        v = np.asarray(velocity(mesh.qpoints[band]), dtype=float).reshape(-1, 2)
        vg[band] = d_q[band] * np.sum(v * g_q[band], axis=1)
    T = mesh.test_operator()
    Tx, Ty = mesh.grad_test_operator()
    qx = mesh.field_at_qpoints(state.q.q[:, 0])
    qy = mesh.field_at_qpoints(state.q.q[:, 1])

    K = mesh.stiffness_matrix()
    lhs = (K * lam).tocsr()
    lhs.setdiag(lhs.diagonal() + W / dt)
    rhs = W / dt * c - T @ vg + lam * (Tx @ qx + Ty @ qy)
    new, _ = cg_solve(lhs, rhs, tol=params.cg_tol, x0=c)
    phi = FEField(mesh, new)
    return LevelSetState(phi, averaged_gradient(phi, params.sigma), state.t + dt)


def normal_derivative_law(rate=-0.15):
    """Motion law ``V = rate * dPhi/dn`` with ``dPhi/dn = -phi_h(x_P) / eps``."""

    def law(cp, state):
        dn = -state.phi.eval(cp.x_P) / cp.eps
        return rate * dn

    return law


def prescribed_speed(func):
    """Motion law evaluating a given function ``V(x_Gamma)`` on the interface."""

    def law(cp, state):
        return np.asarray(func(cp.x_gamma), dtype=float)

    return law


def build_interface_velocity(state, motion_law, eps, method="traversal"):
    """Extension velocity evaluator ``v_h(x) = -V(x_Gamma) q(x)``.

    Points outside the band where ``delta_eps`` is negligible, or where the
    closest-point search fails, get a zero velocity.
    """
    ls = state.level_set()

    def velocity(x):
        x = np.atleast_2d(x)
        out = np.zeros((len(x), 2))
        phi = state.phi.eval(x)
        band = 2.0 * delta_eps(phi, eps) >= BAND_SKIP
        if not np.any(band):
            return out
        cp = closest_point(ls, x[band], eps, method=method, strict=False)
        ok = cp.ok
        if np.any(ok):
            sub = cp.subset(ok)
            V = motion_law(sub, state)
            idx = np.flatnonzero(band)[ok]
            out[idx] = np.atleast_2d(extension_velocity(sub, V, state.q.eval(x[idx])))
        return out

    return velocity


def volume(state, eps):
    """Regularized area of the positive phase, ``int H_eps(phi_h)``."""
    mesh = state.mesh
    phi_q = mesh.field_at_qpoints(state.phi.coefficients)
    return float(np.sum(mesh.qweights * heaviside_eps(phi_q, eps)))


def zero_level_points(state):
    """Zero crossings of ``phi_h`` along mesh edges (linear interpolation)."""
    mesh = state.mesh
    c = state.phi.coefficients.reshape(mesh.ny + 1, mesh.nx + 1)
    X = mesh.nodes[:, 0].reshape(c.shape)
    Y = mesh.nodes[:, 1].reshape(c.shape)
    pts = []
    for a, b, xa, xb, ya, yb in (
        (c[:, :-1], c[:, 1:], X[:, :-1], X[:, 1:], Y[:, :-1], Y[:, 1:]),
        (c[:-1, :], c[1:, :], X[:-1, :], X[1:, :], Y[:-1, :], Y[1:, :]),
    ):
        cross = (a * b < 0) | ((a == 0) & (b != 0))
        s = a[cross] / (a[cross] - b[cross])
        pts.append(np.column_stack([xa[cross] + s * (xb[cross] - xa[cross]),
                                    ya[cross] + s * (yb[cross] - ya[cross])]))
    return np.vstack(pts)


def interface_radius(state, center):
    """Mean and max deviation of the zero level set's distance to ``center``."""
    p = zero_level_points(state)
    r = np.linalg.norm(p - np.asarray(center), axis=1)
    return float(r.mean()), float(np.abs(r - r.mean()).max())


def centroid(state, eps):
    """Centroid of the positive phase weighted by ``H_eps(phi_h)``."""
    mesh = state.mesh
    w = mesh.qweights * heaviside_eps(mesh.field_at_qpoints(state.phi.coefficients), eps)
    return (w @ mesh.qpoints) / w.sum()
