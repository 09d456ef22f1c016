"""Closest-point search along level set normals and extrapolation of interface data.

Every extension is linear in the nodal solution vector ``u`` once the geometry
(closest points, normals, stencils) is fixed, so reconstructions are built as
:class:`Affine` maps ``u -> A @ u + c`` over a batch of query points. The
pointwise functions evaluate those maps for a given :class:`FEField`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .interface import M_DAMP, damping, heaviside_eps
from .mesh_fe import _exit_params, shape_values

OK, DEGENERATE, NO_INTERFACE, SEARCH_FAILURE, OUT_OF_DOMAIN = range(5)
_STATUS_NAMES = {
    OK: "ok",
    DEGENERATE: "degenerate normal",
    NO_INTERFACE: "no interface found",
    SEARCH_FAILURE: "search failure",
    OUT_OF_DOMAIN: "out of domain",
}


class ClosestPointError(ValueError):
    pass


class DegenerateNormalError(ClosestPointError):
    pass


class NoInterfaceError(ClosestPointError):
    pass


class SearchFailure(ClosestPointError):
    pass


_ERRORS = {
    DEGENERATE: DegenerateNormalError,
    NO_INTERFACE: NoInterfaceError,
    SEARCH_FAILURE: SearchFailure,
    OUT_OF_DOMAIN: ClosestPointError,
}


@dataclass
class ClosestPointResult:
    """Batch of closest-point projections (row ``k`` belongs to ``x_Q[k]``)."""

    x_Q: np.ndarray
    x_gamma: np.ndarray
    xi: np.ndarray
    n_gamma: np.ndarray
    x_P: np.ndarray
    steps: np.ndarray
    status: np.ndarray
    eps: float

    def __len__(self):
        return len(self.xi)

    @property
    def ok(self):
        return self.status == OK

    @property
    def tangent(self):
        n = self.n_gamma
        return np.column_stack([-n[:, 1], n[:, 0]])

    def stencil(self):
        """Three-point stencil ``(x_P - eps/2 tau, x_P, x_P + eps/2 tau)``."""
        d = 0.5 * self.eps * self.tangent
        return self.x_P - d, self.x_P, self.x_P + d

    def raise_for_status(self):
        bad = np.flatnonzero(self.status != OK)
        if len(bad):
            k = bad[0]
            code = int(self.status[k])
            raise _ERRORS[code](
                f"closest-point search at {tuple(self.x_Q[k])}: {_STATUS_NAMES[code]}"
                f" ({len(bad)} of {len(self)} points)"
            )

    def subset(self, mask):
        return ClosestPointResult(
            self.x_Q[mask], self.x_gamma[mask], self.xi[mask], self.n_gamma[mask],
            self.x_P[mask], self.steps[mask], self.status[mask], self.eps,
        )


def _prepare(ls, x_Q):
    x_Q = np.atleast_2d(np.asarray(x_Q, dtype=float))
    n = len(x_Q)
    status = np.zeros(n, dtype=np.int64)
    inside = ls.mesh.contains(x_Q)
    status[~inside] = OUT_OF_DOMAIN
    phiQ = np.zeros(n)
    qQ = np.zeros((n, 2))
    phiQ[inside] = ls.phi(x_Q[inside])
    qQ[inside] = ls.q(x_Q[inside])
    qn = np.linalg.norm(qQ, axis=1)
    status[inside & (qn <= 1e-12)] = DEGENERATE
    with np.errstate(invalid="ignore", divide="ignore"):
        nQ = -qQ / qn[:, None]
    nQ[status != OK] = 0.0
    p = np.sign(phiQ)[:, None] * nQ
    return x_Q, status, phiQ, p


def _finish(ls, x_Q, xi, p, status, steps, eps):
    x_gamma = x_Q + xi[:, None] * p
    n_gamma = np.zeros_like(x_gamma)
    good = status == OK
    if np.any(good):
        q = ls.q(x_gamma[good])
        qn = np.linalg.norm(q, axis=1)
        bad = qn <= 1e-12
        with np.errstate(invalid="ignore", divide="ignore"):
            n_gamma[good] = -q / qn[:, None]
        if np.any(bad):
            idx = np.flatnonzero(good)[bad]
            status[idx] = DEGENERATE
            n_gamma[idx] = 0.0
    x_P = x_gamma - eps * n_gamma
    return ClosestPointResult(x_Q, x_gamma, xi, n_gamma, x_P, steps, status, eps)


def _cell_phi(mesh, values, cells, pts):
    """Bilinear evaluation of nodal ``values`` inside given cells (clipped local coords)."""
    loc = (pts - mesh.cell_origin(cells)) / mesh.h
    loc = np.clip(loc, 0.0, 1.0)
    return np.einsum("na,na->n", values[mesh.cells[cells]], shape_values(loc))


def _segment_root_fe(mesh, values, cells, pos, p, s_end, phi_end):
    """Smallest root in ``[0, s_end]`` of the bilinear level set along ``pos + s p``."""
    c = values[mesh.cells[cells]]
    b_ = c[:, 1] - c[:, 0]
    c_ = c[:, 3] - c[:, 0]
    d_ = c[:, 0] - c[:, 1] + c[:, 2] - c[:, 3]
    loc = np.clip((pos - mesh.cell_origin(cells)) / mesh.h, 0.0, 1.0)
    s0, t0 = loc[:, 0], loc[:, 1]
    al, be = p[:, 0] / mesh.h, p[:, 1] / mesh.h
    C = c[:, 0] + b_ * s0 + c_ * t0 + d_ * s0 * t0
    B = b_ * al + c_ * be + d_ * (s0 * be + t0 * al)
    A = d_ * al * be
    # secant fallback between the bracketing end values
    with np.errstate(invalid="ignore", divide="ignore"):
        lam = np.where(C != phi_end, s_end * C / (C - phi_end), 0.0)
        scale = np.abs(B) * s_end + np.abs(C) + 1e-300
        quad = np.abs(A) * s_end**2 > 1e-12 * scale
        lin_root = -C / B
        disc = np.maximum(B * B - 4 * A * C, 0.0)
        sq = np.sqrt(disc)
        qv = -0.5 * (B + np.copysign(sq, B))
        r1 = qv / A
        r2 = C / qv
    tol = 1e-12 * np.maximum(s_end, 1e-300) + 1e-15
    cand = np.full(len(C), np.inf)
    for r in (r1, r2):
        ok = quad & np.isfinite(r) & (r >= -tol) & (r <= s_end + tol)
        cand = np.where(ok & (r < cand), r, cand)
    ok = ~quad & np.isfinite(lin_root) & (lin_root >= -tol) & (lin_root <= s_end + tol)
    cand = np.where(ok, lin_root, cand)
    root = np.where(np.isfinite(cand), cand, lam)
    root = np.where(C == 0, 0.0, root)
    return np.clip(root, 0.0, s_end)


def _bisect(func, lo, hi, flo, tol=1e-12, maxit=200):
    """Vectorized bisection; ``func(s)`` must change sign on each ``[lo, hi]``."""
    lo = lo.copy()
    hi = hi.copy()
    flo = flo.copy()
    for _ in range(maxit):
        if np.all(hi - lo <= tol):
            break
        mid = 0.5 * (lo + hi)
        fm = func(mid)
        left = np.sign(fm) == np.sign(flo)
        lo = np.where(left, mid, lo)
        flo = np.where(left, fm, flo)
        hi = np.where(left, hi, mid)
    return 0.5 * (lo + hi)


def closest_point_traversal(ls, x_Q, eps, strict=True):
    """Cell-by-cell march along ``x_Q + xi p_Q`` until the level set changes sign.

    ``p_Q = sign(phi(x_Q)) n_Q`` with ``n_Q = -q(x_Q)/|q(x_Q)|``. The root inside
    the last cell is found from the quadratic restriction of the bilinear level
    set, or by bisection when the search uses an analytic level set.
    """
    mesh = ls.mesh
    x_Q, status, phiQ, p = _prepare(ls, x_Q)
    n = len(x_Q)
    xi = np.zeros(n)
    steps = np.zeros(n, dtype=np.int64)
    active = (status == OK) & (phiQ != 0.0)
    cells = mesh.locate(x_Q)[0]
    pos = x_Q.copy()
    xi_pos = np.zeros(n)
    fe = ls.root_source == "fe"
    max_steps = mesh.nx + mesh.ny + 2

    idx = np.flatnonzero(active)
    phi_prev = phiQ[idx]
    while len(idx):
        c, x0, pp = cells[idx], pos[idx], p[idx]
        s_exit, nxt = _exit_params(mesh, c, x0, pp)
        end = x0 + s_exit[:, None] * pp
        if fe:
            phi_end = _cell_phi(mesh, ls.values, c, end)
        else:
            phi_end = ls.phi(end)
        found = (phi_prev * phi_end < 0) | (phi_end == 0)
        steps[idx] += 1
        if np.any(found):
            f = np.flatnonzero(found)
            k = idx[f]
            if fe:
                r = _segment_root_fe(mesh, ls.values, c[f], x0[f], pp[f], s_exit[f], phi_end[f])
            else:
                x0f, ppf = x0[f], pp[f]

                def g(s):
                    return ls.phi(x0f + s[:, None] * ppf)

                r = _bisect(g, np.zeros(len(f)), s_exit[f], phi_prev[f], tol=1e-13, maxit=60)
            xi[k] = xi_pos[k] + r
        exited = ~found & (nxt < 0)
        status[idx[exited]] = NO_INTERFACE
        cont = ~found & ~exited
        failed = cont & (steps[idx] > max_steps)
        status[idx[failed]] = SEARCH_FAILURE
        cont &= ~failed
        k = idx[cont]
        pos[k] = end[cont]
        xi_pos[k] += s_exit[cont]
        cells[k] = nxt[cont]
        phi_prev = phi_end[cont]
        idx = k

    res = _finish(ls, x_Q, xi, p, status, steps, eps)
    if strict:
        res.raise_for_status()
    return res


def closest_point_bisection(ls, x_Q, eps, strict=True):
    """Bracket ``[xi* - m h, xi* + m h]`` around ``xi* = |phi(x_Q)|``, then bisect."""
    mesh = ls.mesh
    x_Q, status, phiQ, p = _prepare(ls, x_Q)
    n = len(x_Q)
    xi = np.zeros(n)
    steps = np.zeros(n, dtype=np.int64)
    h = mesh.h
    xi_star = np.abs(phiQ)

    def phi_line(k, s):
        pts = x_Q[k] + s[:, None] * p[k]
        out = np.full(len(k), np.nan)
        inside = mesh.contains(pts)
        if np.any(inside):
            out[inside] = ls.phi(pts[inside])
        return out

    todo = np.flatnonzero((status == OK) & (phiQ != 0.0))
    lo_all = np.zeros(n)
    hi_all = np.zeros(n)
    flo_all = np.zeros(n)
    for m in range(1, mesh.nx + mesh.ny + 1):
        if not len(todo):
            break
        steps[todo] = m
        lo = np.maximum(xi_star[todo] - m * h, 0.0)
        hi = xi_star[todo] + m * h
        flo = phi_line(todo, lo)
        fhi = phi_line(todo, hi)
        br = (flo * fhi < 0) | (fhi == 0) | (flo == 0)
        k = todo[br]
        lo_all[k], hi_all[k], flo_all[k] = lo[br], hi[br], flo[br]
        todo = todo[~br]
    status[todo] = SEARCH_FAILURE

    k = np.flatnonzero((status == OK) & (phiQ != 0.0))
    if len(k):
        def g(s):
            v = phi_line(k, s)
            return np.where(np.isnan(v), 0.0, v)

        xi[k] = _bisect(g, lo_all[k], hi_all[k], flo_all[k], tol=1e-12)
    res = _finish(ls, x_Q, xi, p, status, steps, eps)
    if strict:
        res.raise_for_status()
    return res


def closest_point(ls, x_Q, eps, method="traversal", strict=True):
    if method == "traversal":
        return closest_point_traversal(ls, x_Q, eps, strict=strict)
    if method == "bisection":
        return closest_point_bisection(ls, x_Q, eps, strict=strict)
    raise ValueError(f"unknown closest-point method {method!r}")


# ---------------------------------------------------------------------------
# affine maps of the nodal solution


class Affine:
    """Pointwise values ``A @ u + c`` for a batch of points."""

    def __init__(self, A, c):
        self.A = A
        self.c = np.asarray(c, dtype=float)

    @classmethod
    def const(cls, c, n_nodes):
        c = np.asarray(c, dtype=float)
        return cls(sp.csr_matrix((len(c), n_nodes)), c)

    @classmethod
    def linear(cls, A):
        return cls(A.tocsr(), np.zeros(A.shape[0]))

    def __call__(self, u):
        return self.A @ u + self.c

    def __add__(self, other):
        if isinstance(other, Affine):
            return Affine(self.A + other.A, self.c + other.c)
        return Affine(self.A, self.c + other)

    def __sub__(self, other):
        if isinstance(other, Affine):
            return Affine(self.A - other.A, self.c - other.c)
        return Affine(self.A, self.c - other)

    def __neg__(self):
        return Affine(-self.A, -self.c)

    def scale(self, s):
        s = np.broadcast_to(np.asarray(s, dtype=float), self.c.shape)
        return Affine(sp.diags(s) @ self.A, s * self.c)

    def __mul__(self, s):
        return self.scale(s)

    __rmul__ = __mul__

    def where(self, mask, other):
        """Row-wise choice: rows of ``self`` where ``mask`` else rows of ``other``."""
        m = mask.astype(float)
        return self.scale(m) + other.scale(1.0 - m)


@dataclass
class BoundaryData:
    """Interface data. Functions take ``(points, t)`` and return arrays."""

    dirichlet: Optional[Callable] = None
    neumann: Optional[Callable] = None
    normal_velocity: Optional[Callable] = None

    def __post_init__(self):
        if self.dirichlet is None and self.neumann is None:
            raise ValueError("boundary data needs a Dirichlet or Neumann component")


@dataclass
class Reconstruction:
    """Affine reconstructions at the interface points of one :class:`ClosestPointResult`."""

    cp: ClosestPointResult
    u_gamma: Affine
    dn: Affine
    dtau: Affine
    fallback: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def grad(self):
        n = self.cp.n_gamma
        tau = self.cp.tangent
        gx = self.dn.scale(n[:, 0]) + self.dtau.scale(tau[:, 0])
        gy = self.dn.scale(n[:, 1]) + self.dtau.scale(tau[:, 1])
        return gx, gy

    def value_linear(self):
        """``U(x_Q) = u_Gamma(x_Gamma) + grad U(x_Gamma) . (x_Q - x_Gamma)``."""
        d = self.cp.x_Q - self.cp.x_gamma
        gx, gy = self.grad
        return self.u_gamma + gx.scale(d[:, 0]) + gy.scale(d[:, 1])


def dirichlet_value_map(cp, bd, n_nodes, t=0.0):
    if bd.dirichlet is None:
        raise ValueError("no Dirichlet data")
    vals = np.zeros(len(cp))
    ok = cp.ok
    if np.any(ok):
        vals[ok] = bd.dirichlet(cp.x_gamma[ok], t)
    return Affine.const(vals, n_nodes)


def reconstruct(cp, bd, mesh, t=0.0, interface_value=None):
    """Normal and tangential derivative maps at ``x_Gamma``.

    The normal derivative is the Neumann datum when present, otherwise the
    one-sided difference ``(u_Gamma - u_h(x_P)) / eps``. ``interface_value``
    replaces the Dirichlet value when given (upwind extrapolation uses it).
    The tangential derivative is the central difference over the stencil,
    falling back to a one-sided pair when a stencil point leaves the domain.
    """
    eps = cp.eps
    N = mesh.n_nodes
    ok = cp.ok
    xm, xp, xpl = cp.stencil()
    in_m = mesh.contains(xm) & ok
    in_p = mesh.contains(xp) & ok
    in_pl = mesh.contains(xpl) & ok
    if np.any(ok & ~in_p):
        k = np.flatnonzero(ok & ~in_p)[0]
        raise ClosestPointError(f"shifted point {tuple(xp[k])} is outside the domain")
    IP = Affine.linear(mesh.interp_matrix(xp))
    Im = Affine.linear(mesh.interp_matrix(xm))
    Ipl = Affine.linear(mesh.interp_matrix(xpl))

    if interface_value is not None:
        ug = interface_value
    elif bd.dirichlet is not None:
        ug = dirichlet_value_map(cp, bd, N, t)
    else:
        ug = None

    if bd.neumann is not None:
        vals = np.zeros(len(cp))
        vals[ok] = bd.neumann(cp.x_gamma[ok], t)
        dn = Affine.const(vals, N)
        if ug is None:
            # value at x_Gamma from the interior point and the prescribed slope
            ug = IP + dn.scale(np.full(len(cp), eps))
    else:
        dn = (ug - IP).scale(np.full(len(cp), 1.0 / eps))

    central = in_m & in_pl
    only_minus = in_m & ~in_pl
    only_plus = ~in_m & in_pl
    dtau = (Ipl - Im).scale(central / eps)
    dtau = dtau + (IP - Im).scale(only_minus * (2.0 / eps))
    dtau = dtau + (Ipl - IP).scale(only_plus * (2.0 / eps))
    ok_mask = ok.astype(float)
    return Reconstruction(
        cp=cp,
        u_gamma=ug.scale(ok_mask),
        dn=dn.scale(ok_mask),
        dtau=dtau,
        fallback=ok & ~central,
    )


def _coeffs(u_h):
    return u_h.coefficients


def reconstruct_normal_derivative(cp, bd, u_h, eps=None, t=0.0):
    """Normal derivative at ``x_Gamma`` (Neumann datum or one-sided difference)."""
    _check_eps(cp, eps)
    return _squeeze(reconstruct(cp, bd, u_h.mesh, t).dn(_coeffs(u_h)))


def reconstruct_gradient(cp, bd, u_h, eps=None, t=0.0):
    """Cartesian gradient ``dnU n + dtauU tau`` at ``x_Gamma``."""
    _check_eps(cp, eps)
    rec = reconstruct(cp, bd, u_h.mesh, t)
    gx, gy = rec.grad
    u = _coeffs(u_h)
    g = np.column_stack([gx(u), gy(u)])
    return g[0] if len(g) == 1 else g


def extend_normal_derivative(cp, dn_gamma):
    """Constant extension of the normal derivative to ``x_Q``."""
    return dn_gamma


def extend_value_linear(cp, u_gamma, grad_gamma):
    """Taylor extension ``u_Gamma + grad . (x_Q - x_Gamma)``."""
    d = np.atleast_2d(cp.x_Q - cp.x_gamma)
    g = np.atleast_2d(grad_gamma)
    return _squeeze(np.atleast_1d(u_gamma) + np.sum(g * d, axis=1))


def _check_eps(cp, eps):
    if eps is not None and not np.isclose(eps, cp.eps):
        raise ValueError("eps differs from the one used to build the closest points")


def _squeeze(v):
    v = np.asarray(v)
    return v[0] if v.shape == (1,) else v


# ---------------------------------------------------------------------------
# fluxes, ghost fields, velocities


def upwind_map(cp, bd, mesh, velocity, t=0.0):
    """Extended upwind inviscid flux ``F = V_Q * U_hat`` as an affine map.

    Returns ``(F, U_hat, V_Q)``; ``U_hat`` is the linear extrapolation of the
    upwind interface value (Dirichlet data on inflow, ``u_h(x_Gamma)`` on outflow).
    """
    N = mesh.n_nodes
    V = np.zeros(len(cp))
    ok = cp.ok
    V[ok] = np.sum(velocity(cp.x_gamma[ok]) * cp.n_gamma[ok], axis=1)
    inflow = V < 0
    uD = dirichlet_value_map(cp, bd, N, t)
    uh = Affine.linear(mesh.interp_matrix(cp.x_gamma)).scale(ok.astype(float))
    u_hat = uD.where(inflow, uh)
    rec = reconstruct(cp, bd, mesh, t, interface_value=u_hat)
    U_hat = rec.value_linear()
    return U_hat.scale(V), U_hat, V


def upwind_inviscid_extension(cp, bd, u_h, velocity, t=0.0):
    F, _, _ = upwind_map(cp, bd, u_h.mesh, velocity, t)
    return _squeeze(F(_coeffs(u_h)))


def flux_map(cp, bd, mesh, kappa, phi_Q=None, eps=None, damped=False, m=M_DAMP,
             velocity=None, t=0.0):
    """``G = F - kappa dnU - V U`` at the query points as an affine map.

    ``velocity`` is the inviscid flux velocity (``f(u) = v u``); the interface
    normal speed comes from ``bd.normal_velocity``. With ``damped`` each
    extension is multiplied by ``D_eps(phi(x_Q))``.
    """
    N = mesh.n_nodes
    n = len(cp)
    G = Affine.const(np.zeros(n), N)
    damp = np.ones(n)
    if damped:
        damp = damping(phi_Q, cp.eps if eps is None else eps, m)
    if velocity is not None:
        F, _, _ = upwind_map(cp, bd, mesh, velocity, t)
        G = G + F.scale(damp)
    if not kappa and bd.normal_velocity is None:
        return G
    rec = reconstruct(cp, bd, mesh, t)
    if kappa:
        G = G - rec.dn.scale(kappa * damp)
    if bd.normal_velocity is not None:
        V = np.zeros(n)
        V[cp.ok] = bd.normal_velocity(cp.x_gamma[cp.ok], t)
        G = G - rec.value_linear().scale(V * damp)
    return G


def interface_flux_G(cp, bd, u_h, kappa, eps, phi_Q=None, damped=False, m=M_DAMP,
                     inviscid=None, t=0.0):
    _check_eps(cp, eps)
    if damped and phi_Q is None:
        raise ValueError("damped flux needs phi(x_Q)")
    G = flux_map(cp, bd, u_h.mesh, kappa, phi_Q=phi_Q, eps=eps, damped=damped, m=m,
                 velocity=inviscid, t=t)
    return _squeeze(G(_coeffs(u_h)))


def ghost_dirichlet_map(cp, phi_Q, H_Q, U, mesh, eps, m=M_DAMP, damped=False):
    """``u_Omega = H u_h + (1 - H) [D] U`` at the query points."""
    weight = 1.0 - H_Q
    if damped:
        weight = weight * damping(phi_Q, eps, m)
    uh = Affine.linear(mesh.interp_matrix(cp.x_Q))
    return uh.scale(H_Q) + U.scale(weight)


def _ghost_setup(u_h, ls, eps, bd, t, method, velocity):
    mesh = u_h.mesh

    def prepare(x_Q):
        x_Q = np.atleast_2d(np.asarray(x_Q, dtype=float))
        phi_Q = mesh_phi(ls, x_Q)
        cp = closest_point(ls, x_Q, eps, method=method)
        if velocity is not None:
            _, U, _ = upwind_map(cp, bd, mesh, velocity, t)
            rec = reconstruct(cp, bd, mesh, t)
        else:
            rec = reconstruct(cp, bd, mesh, t)
            U = rec.value_linear()
        return x_Q, phi_Q, cp, rec, U

    return prepare


def mesh_phi(ls, x):
    return ls.fe.eval(np.atleast_2d(x))


def ghost_field_dirichlet(u_h, ls, eps, bd, m=M_DAMP, damped=False, t=0.0,
                          method="traversal", velocity=None, skip=1e-12):
    """Evaluator ``x_Q -> u_Omega(x_Q)`` for the Dirichlet ghost penalty."""
    prepare = _ghost_setup(u_h, ls, eps, bd, t, method, velocity)
    u = _coeffs(u_h)

    def evaluate(x_Q):
        x_Q = np.atleast_2d(np.asarray(x_Q, dtype=float))
        phi_Q = mesh_phi(ls, x_Q)
        H = heaviside_eps(phi_Q, eps)
        w = (1.0 - H) * (damping(phi_Q, eps, m) if damped else 1.0)
        out = H * u_h.eval(x_Q)
        need = w >= skip
        if np.any(need):
            xq, ph, cp, rec, U = prepare(x_Q[need])
            out[need] += w[need] * U(u)
        return _squeeze(out)

    return evaluate


def ghost_field_neumann(u_h, ls, eps, bd, m=M_DAMP, damped=False, t=0.0,
                        method="traversal", skip=1e-12):
    """Evaluator ``x_Q -> g_Omega(x_Q)``: constant extension of the reconstructed gradient."""
    prepare = _ghost_setup(u_h, ls, eps, bd, t, method, None)
    u = _coeffs(u_h)

    def evaluate(x_Q):
        x_Q = np.atleast_2d(np.asarray(x_Q, dtype=float))
        phi_Q = mesh_phi(ls, x_Q)
        H = heaviside_eps(phi_Q, eps)
        w = (1.0 - H) * (damping(phi_Q, eps, m) if damped else 1.0)
        out = H[:, None] * u_h.eval_grad(x_Q)
        need = w >= skip
        if np.any(need):
            _, _, cp, rec, _ = prepare(x_Q[need])
            gx, gy = rec.grad
            out[need] += w[need, None] * np.column_stack([gx(u), gy(u)])
        return out[0] if len(out) == 1 else out

    return evaluate


def extension_velocity(cp, V_gamma, q_Q):
    """``v_h(x_Q) = -V(x_Gamma) q(x_Q)`` (constant extension of the normal speed)."""
    V = np.atleast_1d(np.asarray(V_gamma, dtype=float))
    q = np.atleast_2d(q_Q)
    v = -V[:, None] * q
    return v[0] if len(v) == 1 else v
