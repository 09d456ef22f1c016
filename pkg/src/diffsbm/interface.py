"""Level set fields and Gaussian-regularized interface kernels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .mesh_fe import FEField

SIGMA = 1e-3
M_DAMP = 4  # default damping band multiplier


def _check_eps(eps):
    if not eps > 0:
        raise ValueError(f"interface thickness must be positive, got {eps}")


def heaviside_eps(phi, eps):
    _check_eps(eps)
    return 0.5 * (1.0 + erf(np.pi * np.asarray(phi) / (3.0 * eps)))


def delta_eps(phi, eps):
    _check_eps(eps)
    phi = np.asarray(phi)
    return np.sqrt(np.pi / 9.0) / eps * np.exp(-(np.pi**2) * phi**2 / (9.0 * eps**2))


def sign_eps(phi, eps):
    return 2.0 * heaviside_eps(phi, eps) - 1.0


def damping(phi, eps, m=M_DAMP):
    """Narrow-band damping ``H(phi + m eps) - H(phi - m eps)``."""
    if m < 2:
        raise ValueError(f"damping width multiplier must be >= 2, got {m}")
    phi = np.asarray(phi)
    return heaviside_eps(phi + m * eps, eps) - heaviside_eps(phi - m * eps, eps)


@dataclass(frozen=True)
class RegularizedKernels:
    eps: float
    m_damp: int = M_DAMP

    def __post_init__(self):
        _check_eps(self.eps)
        if self.m_damp < 2:
            raise ValueError("m_damp must be >= 2")

    def H(self, phi):
        return heaviside_eps(phi, self.eps)

    def delta(self, phi):
        return delta_eps(phi, self.eps)

    def S(self, phi):
        return sign_eps(phi, self.eps)

    def D(self, phi):
        return damping(phi, self.eps, self.m_damp)


@dataclass
class AveragedGradient:
    """Nodal normalized gradient of a level set field (two FE components)."""

    q: np.ndarray  # (n_nodes, 2)
    sigma: float
    mesh: object

    def eval(self, x):
        return np.column_stack(
            [FEField(self.mesh, self.q[:, k]).eval(np.atleast_2d(x)) for k in range(2)]
        )


def averaged_gradient(phi, sigma=SIGMA):
    """Lumped-mass approximation of ``grad phi / sqrt(|grad phi|^2 + sigma^2)``.

    ``q_j = int d(phi_h) phi_j / int sqrt(|grad phi_h|^2 + sigma^2) phi_j``.
    """
    mesh = phi.mesh
    T = mesh.test_operator()
    g = mesh.grad_at_qpoints(phi.coefficients)
    denom = T @ np.sqrt(np.sum(g**2, axis=1) + sigma**2)
    q = np.column_stack([T @ g[:, 0], T @ g[:, 1]]) / denom[:, None]
    return AveragedGradient(q=q, sigma=sigma, mesh=mesh)


def interface_measure(phi, eps):
    """``int delta_eps(phi_h) |grad phi_h| dx``, an approximation of the interface length."""
    mesh = phi.mesh
    vals = mesh.field_at_qpoints(phi.coefficients)
    g = mesh.grad_at_qpoints(phi.coefficients)
    return float(np.sum(mesh.qweights * delta_eps(vals, eps) * np.linalg.norm(g, axis=1)))


class Circle:
    """Signed distance to a circle, positive inside.

    ``radius`` may be a number or a callable of time.
    """

    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=float)
        self._radius = radius

    def radius(self, t=0.0):
        return self._radius(t) if callable(self._radius) else float(self._radius)

    def value(self, x, t=0.0):
        x = np.atleast_2d(x)
        return self.radius(t) - np.linalg.norm(x - self.center, axis=1)

    def gradient(self, x, t=0.0):
        x = np.atleast_2d(x)
        d = x - self.center
        r = np.linalg.norm(d, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            g = -d / r[:, None]
        g[r == 0] = 0.0
        return g

    def project(self, x, t=0.0):
        """Exact closest point on the circle."""
        x = np.atleast_2d(x)
        d = x - self.center
        r = np.linalg.norm(d, axis=1)
        return self.center + self.radius(t) * d / r[:, None]


class LevelSetField:
    """Level set ``phi`` at one time level with its normal field ``q``.

    ``values`` are the nodal coefficients of the FE level set ``phi_h``. When an
    ``analytic`` signed distance is supplied, ``q`` is its exact normalized
    gradient; otherwise ``q`` is the lumped-mass averaged gradient of ``phi_h``.
    ``root_source`` selects which function the closest-point search zeroes:
    ``"fe"`` (the bilinear interpolant) or ``"analytic"``.
    """

    def __init__(self, mesh, values, analytic=None, t=0.0, root_source="fe",
                 q_source=None, sigma=SIGMA):
        self.mesh = mesh
        self.values = np.asarray(values, dtype=float)
        self.analytic = analytic
        self.t = t
        if root_source == "analytic" and analytic is None:
            raise ValueError("analytic root search needs an analytic level set")
        self.root_source = root_source
        if q_source is None:
            q_source = "analytic" if analytic is not None else "averaged"
        if q_source == "analytic" and analytic is None:
            raise ValueError("analytic normals need an analytic level set")
        self.q_source = q_source
        self.sigma = sigma
        self._avg = None
        self._qp = {}

    @classmethod
    def from_analytic(cls, mesh, analytic, t=0.0, **kw):
        return cls(mesh, analytic.value(mesh.nodes, t), analytic=analytic, t=t, **kw)

    @property
    def fe(self):
        return FEField(self.mesh, self.values)

    @property
    def averaged(self):
        if self._avg is None:
            self._avg = averaged_gradient(self.fe, self.sigma)
        return self._avg

    def phi(self, x):
        """Level set used for root finding."""
        x = np.atleast_2d(x)
        if self.root_source == "analytic":
            return self.analytic.value(x, self.t)
        return self.fe.eval(x)

    def q(self, x):
        x = np.atleast_2d(x)
        if self.q_source == "analytic":
            return self.analytic.gradient(x, self.t)
        return self.averaged.eval(x)

    def q_nodal(self):
        if self.q_source == "analytic":
            return self.analytic.gradient(self.mesh.nodes, self.t)
        return self.averaged.q

    # quadrature-point data of the FE level set, cached
    def qp_values(self):
        if "phi" not in self._qp:
            self._qp["phi"] = self.mesh.field_at_qpoints(self.values)
        return self._qp["phi"]

    def qp_grad_norm(self):
        if "gnorm" not in self._qp:
            g = self.mesh.grad_at_qpoints(self.values)
            self._qp["gnorm"] = np.linalg.norm(g, axis=1)
        return self._qp["gnorm"]
