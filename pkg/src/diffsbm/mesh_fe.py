"""Uniform Q1 quadrilateral meshes, quadrature, field evaluation and sparse solvers.

Nodes are numbered x-fastest, ``node = j * (nx + 1) + i``. Cells are numbered
the same way, ``cell = cy * nx + cx``, and carry their four vertices in
counterclockwise order starting at the lower-left corner.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class OutOfDomainError(ValueError):
    """A query point lies outside the closed mesh domain."""


class DomainExit(Exception):
    """A ray left the mesh domain."""


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor Gauss-Legendre rule on the unit square ``[0, 1]^2``."""

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @classmethod
    def gauss(cls, n=3):
        x, w = np.polynomial.legendre.leggauss(n)
        x = 0.5 * (x + 1.0)
        w = 0.5 * w
        s, t = np.meshgrid(x, x, indexing="xy")
        ws = np.outer(w, w)
        pts = np.column_stack([s.ravel(), t.ravel()])
        return cls(points=pts, weights=ws.ravel(), degree=2 * n - 1)


def shape_values(local):
    """Q1 shape functions at local coordinates ``(n, 2)`` -> ``(n, 4)``."""
    s, t = local[..., 0], local[..., 1]
    return np.stack([(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t], axis=-1)


def shape_derivatives(local):
    """Reference-coordinate derivatives ``(n, 4, 2)``."""
    s, t = local[..., 0], local[..., 1]
    ds = np.stack([-(1 - t), 1 - t, t, -t], axis=-1)
    dt = np.stack([-(1 - s), -s, s, 1 - s], axis=-1)
    return np.stack([ds, dt], axis=-1)


@dataclass
class UniformQuadMesh:
    nx: int
    ny: int
    origin: tuple = (0.0, 0.0)
    extent: tuple = (1.0, 1.0)
    quad: QuadratureRule = field(default_factory=QuadratureRule.gauss)

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"need at least 2 cells per axis, got {self.nx}x{self.ny}")
        hx = self.extent[0] / self.nx
        hy = self.extent[1] / self.ny
        if not np.isclose(hx, hy):
            raise ValueError("only square cells are supported")
        self.h = hx
        self.origin = tuple(float(v) for v in self.origin)
        self.extent = tuple(float(v) for v in self.extent)
        self._cache = {}

    # -- topology ---------------------------------------------------------
    @property
    def n_nodes(self):
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_cells(self):
        return self.nx * self.ny

    @property
    def nodes(self):
        if "nodes" not in self._cache:
            xs = self.origin[0] + self.h * np.arange(self.nx + 1)
            ys = self.origin[1] + self.h * np.arange(self.ny + 1)
            X, Y = np.meshgrid(xs, ys, indexing="xy")
            self._cache["nodes"] = np.column_stack([X.ravel(), Y.ravel()])
        return self._cache["nodes"]

    @property
    def cells(self):
        if "cells" not in self._cache:
            cx, cy = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="xy")
            cx, cy = cx.ravel(), cy.ravel()
            n0 = cy * (self.nx + 1) + cx
            self._cache["cells"] = np.column_stack(
                [n0, n0 + 1, n0 + self.nx + 2, n0 + self.nx + 1]
            )
        return self._cache["cells"]

    def cell_origin(self, cell):
        cell = np.asarray(cell)
        cx, cy = cell % self.nx, cell // self.nx
        return np.stack(
            [self.origin[0] + cx * self.h, self.origin[1] + cy * self.h], axis=-1
        )

    def lumped_mass(self):
        """Row sums of the unweighted Q1 mass matrix (nodal control areas)."""
        if "lumped" not in self._cache:
            m = np.zeros(self.n_nodes)
            np.add.at(m, self.cells, 0.25 * self.h**2)
            self._cache["lumped"] = m
        return self._cache["lumped"]

    # -- point location -----------------------------------------------------
    def locate(self, points, snap=1e-10):
        """Vectorized cell lookup.

        Returns ``(cells, local, inside)``. Points on a shared edge go to the cell
        in which they are the lower/left edge; points on the upper/right domain
        boundary go to the last cell. ``inside`` is False for points outside the
        closed domain (their cell/local values are clipped and meaningless).
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        s = (pts[:, 0] - self.origin[0]) / self.h
        t = (pts[:, 1] - self.origin[1]) / self.h
        s = np.where(np.abs(s - np.round(s)) < snap, np.round(s), s)
        t = np.where(np.abs(t - np.round(t)) < snap, np.round(t), t)
        inside = (s >= 0) & (s <= self.nx) & (t >= 0) & (t <= self.ny)
        cx = np.clip(np.floor(s).astype(np.int64), 0, self.nx - 1)
        cy = np.clip(np.floor(t).astype(np.int64), 0, self.ny - 1)
        local = np.column_stack([np.clip(s - cx, 0, 1), np.clip(t - cy, 0, 1)])
        return cy * self.nx + cx, local, inside

    def locate_cell(self, x):
        """Single-point lookup; raises :class:`OutOfDomainError`."""
        cells, local, inside = self.locate(x)
        if not inside[0]:
            raise OutOfDomainError(f"point {tuple(np.ravel(x))} is outside the mesh")
        return int(cells[0]), local[0]

    def contains(self, points):
        return self.locate(points)[2]

    # -- interpolation ------------------------------------------------------
    def interp_matrix(self, points, grad=False):
        """Sparse matrix mapping nodal values to point values (or x/y gradients).

        Points outside the domain produce empty rows.
        """
        cells, local, inside = self.locate(points)
        n = len(cells)
        cols = self.cells[cells]
        rows = np.repeat(np.arange(n), 4).reshape(n, 4)
        shape = (n, self.n_nodes)

        def build(vals):
            vals = np.where(inside[:, None], vals, 0.0)
            return sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape)

        if not grad:
            return build(shape_values(local))
        d = shape_derivatives(local) / self.h
        return build(d[..., 0]), build(d[..., 1])

    # -- quadrature data ------------------------------------------------------
    @property
    def qpoints(self):
        """Physical quadrature points, shape ``(n_cells * nq, 2)``, cell-major."""
        if "qpoints" not in self._cache:
            org = self.cell_origin(np.arange(self.n_cells))
            pts = org[:, None, :] + self.h * self.quad.points[None, :, :]
            self._cache["qpoints"] = pts.reshape(-1, 2)
        return self._cache["qpoints"]

    @property
    def qweights(self):
        """Physical quadrature weights aligned with :attr:`qpoints`."""
        if "qweights" not in self._cache:
            w = np.tile(self.quad.weights * self.h**2, self.n_cells)
            self._cache["qweights"] = w
        return self._cache["qweights"]

    @property
    def nq(self):
        return len(self.quad.weights)

    def test_operator(self):
        """``T[i, q] = phi_i(x_q) w_q``; ``T @ f_q`` integrates ``f`` against each basis function."""
        if "T" not in self._cache:
            nq = self.nq
            N = shape_values(self.quad.points)  # (nq, 4)
            rows = np.repeat(self.cells, nq, axis=0)  # (ncell*nq, 4)
            vals = np.tile(N, (self.n_cells, 1)) * self.qweights[:, None]
            cols = np.repeat(np.arange(self.n_cells * nq), 4).reshape(-1, 4)
            self._cache["T"] = sp.csr_matrix(
                (vals.ravel(), (rows.ravel(), cols.ravel())),
                shape=(self.n_nodes, self.n_cells * nq),
            )
        return self._cache["T"]

    def grad_test_operator(self):
        """``(Tx, Ty)`` with ``Tx[i, q] = d_x phi_i(x_q) w_q``."""
        if "Tgrad" not in self._cache:
            nq = self.nq
            dN = shape_derivatives(self.quad.points) / self.h  # (nq, 4, 2)
            rows = np.repeat(self.cells, nq, axis=0)
            cols = np.repeat(np.arange(self.n_cells * nq), 4).reshape(-1, 4)
            out = []
            for k in range(2):
                vals = np.tile(dN[..., k], (self.n_cells, 1)) * self.qweights[:, None]
                out.append(
                    sp.csr_matrix(
                        (vals.ravel(), (rows.ravel(), cols.ravel())),
                        shape=(self.n_nodes, self.n_cells * nq),
                    )
                )
            self._cache["Tgrad"] = tuple(out)
        return self._cache["Tgrad"]

    def field_at_qpoints(self, coeffs):
        """Values of a nodal field at all quadrature points."""
        N = shape_values(self.quad.points)
        return (coeffs[self.cells] @ N.T).ravel()

    def grad_at_qpoints(self, coeffs):
        dN = shape_derivatives(self.quad.points) / self.h
        c = coeffs[self.cells]  # (ncell, 4)
        gx = c @ dN[..., 0].T
        gy = c @ dN[..., 1].T
        return np.column_stack([gx.ravel(), gy.ravel()])

    # -- element matrices -----------------------------------------------------
    def _assemble(self, local_mats):
        rows = np.repeat(self.cells, 4, axis=1)
        cols = np.tile(self.cells, (1, 4))
        A = sp.coo_matrix(
            (local_mats.reshape(self.n_cells, 16).ravel(), (rows.ravel(), cols.ravel())),
            shape=(self.n_nodes, self.n_nodes),
        )
        return A.tocsr()

    def mass_matrix(self, coef=None):
        """``M_ij = int c phi_i phi_j``; ``coef`` is given at quadrature points."""
        N = shape_values(self.quad.points)
        w = self.qweights.reshape(self.n_cells, self.nq)
        if coef is not None:
            w = w * np.asarray(coef).reshape(self.n_cells, self.nq)
        local = np.einsum("eq,qa,qb->eab", w, N, N)
        return self._assemble(local)

    def stiffness_matrix(self, coef=None):
        """``K_ij = int c grad phi_i . grad phi_j``."""
        dN = shape_derivatives(self.quad.points) / self.h
        w = self.qweights.reshape(self.n_cells, self.nq)
        if coef is not None:
            w = w * np.asarray(coef).reshape(self.n_cells, self.nq)
        local = np.einsum("eq,qak,qbk->eab", w, dN, dN)
        return self._assemble(local)

    def advection_matrix(self, velocity, coef=None):
        """``C_ij = -int c (grad phi_i . v) phi_j`` for ``velocity`` at quadrature points."""
        N = shape_values(self.quad.points)
        dN = shape_derivatives(self.quad.points) / self.h
        w = self.qweights.reshape(self.n_cells, self.nq)
        if coef is not None:
            w = w * np.asarray(coef).reshape(self.n_cells, self.nq)
        v = np.asarray(velocity).reshape(self.n_cells, self.nq, 2)
        dv = np.einsum("qak,eqk->eqa", dN, v)
        local = -np.einsum("eq,eqa,qb->eab", w, dv, N)
        return self._assemble(local)

    # -- rays -------------------------------------------------------------------
    def ray_exit(self, cell, origin, direction):
        """Exit of the ray ``origin + s * direction`` from ``cell``.

        Returns ``(exit_point, next_cell)``; ``next_cell`` is None when the ray
        leaves the domain. A corner hit (both axes within 1e-12 of the minimal
        parameter) advances diagonally.
        """
        origin = np.asarray(origin, dtype=float)
        direction = np.asarray(direction, dtype=float)
        s, nxt = _exit_params(self, np.array([cell]), origin[None], direction[None])
        exit_point = origin + s[0] * direction
        if nxt[0] < 0:
            return exit_point, None
        return exit_point, int(nxt[0])


def _exit_params(mesh, cells, origins, dirs, tie=1e-12):
    """Vectorized exit parameters and neighbour cells (-1 on domain exit)."""
    h = mesh.h
    cx = cells % mesh.nx
    cy = cells // mesh.nx
    lo = mesh.cell_origin(cells)
    with np.errstate(divide="ignore", invalid="ignore"):
        bx = np.where(dirs[:, 0] > 0, lo[:, 0] + h, lo[:, 0])
        by = np.where(dirs[:, 1] > 0, lo[:, 1] + h, lo[:, 1])
        tx = np.where(dirs[:, 0] != 0, (bx - origins[:, 0]) / dirs[:, 0], np.inf)
        ty = np.where(dirs[:, 1] != 0, (by - origins[:, 1]) / dirs[:, 1], np.inf)
    tx = np.maximum(tx, 0.0)
    ty = np.maximum(ty, 0.0)
    s = np.minimum(tx, ty)
    stepx = tx <= s + tie
    stepy = ty <= s + tie
    ncx = cx + np.where(stepx, np.sign(dirs[:, 0]).astype(np.int64), 0)
    ncy = cy + np.where(stepy, np.sign(dirs[:, 1]).astype(np.int64), 0)
    out = (ncx < 0) | (ncx >= mesh.nx) | (ncy < 0) | (ncy >= mesh.ny)
    nxt = np.where(out, -1, ncy * mesh.nx + ncx)
    return s, nxt


def build_mesh(nx, origin=(0.0, 0.0), extent=1.0):
    """Square ``nx x nx`` mesh on ``origin + [0, extent]^2``."""
    if nx < 2:
        raise ValueError(f"nx must be >= 2, got {nx}")
    return UniformQuadMesh(nx, nx, origin=origin, extent=(extent, extent))


class FEField:
    """Nodal Q1 field on a :class:`UniformQuadMesh`."""

    def __init__(self, mesh, coefficients):
        self.mesh = mesh
        self.coefficients = np.asarray(coefficients, dtype=float)
        if self.coefficients.shape[0] != mesh.n_nodes:
            raise ValueError("coefficient vector does not match the mesh")

    @classmethod
    def interpolate(cls, mesh, func):
        return cls(mesh, func(mesh.nodes))

    def _locate(self, x):
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        cells, local, inside = self.mesh.locate(pts)
        if not np.all(inside):
            bad = pts[~inside][0]
            raise OutOfDomainError(f"point {tuple(bad)} is outside the mesh")
        return cells, local

    def eval(self, x):
        cells, local = self._locate(x)
        vals = np.einsum("na,na->n", self.coefficients[self.mesh.cells[cells]], shape_values(local))
        return vals[0] if np.ndim(x) == 1 else vals

    def eval_grad(self, x):
        cells, local = self._locate(x)
        dN = shape_derivatives(local) / self.mesh.h
        g = np.einsum("na,nak->nk", self.coefficients[self.mesh.cells[cells]], dN)
        return g[0] if np.ndim(x) == 1 else g


def eval_field(field, x):
    return field.eval(x)


def eval_grad(field, x):
    return field.eval_grad(x)


def cg_solve(A, b, tol=1e-10, maxit=None, x0=None):
    """Jacobi-preconditioned conjugate gradients.

    Returns ``(x, iterations)``. Raises :class:`ConvergenceError` when the
    relative residual does not drop below ``tol`` within ``maxit`` iterations
    or a non-positive curvature direction is met.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if maxit is None:
        maxit = 10 * n
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise ConvergenceError("matrix has non-positive diagonal", iterations=0)
    dinv = 1.0 / diag
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    z = dinv * r
    p = z.copy()
    rz = r @ z
    for it in range(1, maxit + 1):
        Ap = A @ p
        curv = p @ Ap
        if curv <= 0:
            raise ConvergenceError(
                "CG breakdown: matrix is not positive definite",
                residual=np.linalg.norm(r) / bnorm,
                iterations=it,
            )
        alpha = rz / curv
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r) / bnorm
        if res <= tol:
            return x, it
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(
        f"CG did not converge in {maxit} iterations (residual {res:.3e})",
        residual=res,
        iterations=maxit,
    )


def write_vtk(path, mesh, fields, title="diffsbm output"):
    """Legacy ASCII VTK STRUCTURED_POINTS file with one scalar array per field."""
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write(f"{title}\n")
        f.write("ASCII\n")
        f.write("DATASET STRUCTURED_POINTS\n")
        f.write(f"DIMENSIONS {mesh.nx + 1} {mesh.ny + 1} 1\n")
        f.write(f"ORIGIN {mesh.origin[0]:.17g} {mesh.origin[1]:.17g} 0\n")
        f.write(f"SPACING {mesh.h:.17g} {mesh.h:.17g} 1\n")
        f.write(f"POINT_DATA {mesh.n_nodes}\n")
        for name, values in fields.items():
            values = np.asarray(values)
            f.write(f"SCALARS {name} double 1\n")
            f.write("LOOKUP_TABLE default\n")
            for v in values:
                f.write(f"{v:.12e}\n")
