"""Benchmark problems, grid convergence studies and the command-line driver."""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .extrapolation import BoundaryData, ClosestPointError, closest_point
from .interface import M_DAMP, Circle, LevelSetField, heaviside_eps
from .levelset_evolution import (
    LAMBDA_FACTOR,
    EvolutionParams,
    LevelSetState,
    build_interface_velocity,
    evolve_step,
    interface_radius,
    normal_derivative_law,
)
from .mesh_fe import (
    ConvergenceError,
    QuadratureRule,
    build_mesh,
    shape_values,
    write_vtk,
)
from .transport_solver import (
    GhostPenaltyConfig,
    ProblemSpec,
    TransientState,
    build_operators,
    solve_steady,
    step_crank_nicolson,
    step_heun,
)

log = logging.getLogger(__name__)

CASE_NAMES = ("elliptic", "parabolic", "hyperbolic", "parabolic-ls", "extension-circle")
EPS_REF = 2.0 / 1024


def saddle(x, t=0.0):
    x = np.atleast_2d(x)
    return (x[:, 0] - 0.5) ** 2 - (x[:, 1] - 0.5) ** 2


def paraboloid(x, t=0.0):
    x = np.atleast_2d(x)
    return (x[:, 0] - 0.5) ** 2 + (x[:, 1] - 0.5) ** 2


def rotation(x):
    x = np.atleast_2d(x)
    return np.column_stack([0.5 - x[:, 1], x[:, 0] - 0.5])


@dataclass(frozen=True)
class BenchmarkCase:
    name: str
    geometry: Circle
    exact: Callable
    kappa: float = 1.0
    velocity: Optional[Callable] = None
    normal_speed: float = 0.0
    T: float = 0.0  # 0 marks a steady problem
    dt_factor: float = 0.0
    stepper: str = "steady"
    lumped_lhs: bool = False
    advect_ls: bool = False

    def problem(self):
        bd = BoundaryData(dirichlet=self.exact)
        if self.normal_speed:
            speed = self.normal_speed
            bd = BoundaryData(dirichlet=self.exact,
                              normal_velocity=lambda x, t: np.full(len(np.atleast_2d(x)), speed))
        return ProblemSpec(self.kappa, bd, self.exact, inviscid=self.velocity, exact=self.exact,
                           interface_motion="prescribed" if self.normal_speed else "fixed")


CASES = {
    "elliptic": BenchmarkCase("elliptic", Circle((0.5, 0.5), 0.25), saddle),
    "parabolic": BenchmarkCase(
        "parabolic", Circle((0.5, 0.5), lambda t: 0.25 + 0.15 * t), saddle,
        normal_speed=0.15, T=1.0, dt_factor=3.2, stepper="cn"),
    "hyperbolic": BenchmarkCase(
        "hyperbolic", Circle((0.75, 0.5), 0.15), paraboloid, kappa=0.0, velocity=rotation,
        T=1.0, dt_factor=0.5, stepper="heun", lumped_lhs=True),
    "parabolic-ls": BenchmarkCase(
        "parabolic-ls", Circle((0.5, 0.5), lambda t: 0.25 + 0.15 * t), saddle,
        normal_speed=0.15, T=1.0, dt_factor=3.2, stepper="cn", advect_ls=True),
}


@dataclass
class RunConfig:
    ghost: str = "dirichlet"
    band: str = "full"
    eps_factor: float = 2.0
    m_damp: int = M_DAMP
    search: str = "traversal"
    advect_ls: Optional[bool] = None  # None: the case default
    eps_ref: float = EPS_REF
    lam_factor: float = LAMBDA_FACTOR
    gamma: Optional[float] = None
    lumped_lhs: Optional[bool] = None
    normals: str = "analytic"  # or "averaged": lumped-mass gradient of phi_h
    out: Optional[str] = None
    vtk: bool = False

    def __post_init__(self):
        if self.ghost not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown ghost penalty {self.ghost!r}")
        if self.band not in ("full", "damped"):
            raise ValueError(f"unknown band {self.band!r}")
        if self.search not in ("traversal", "bisection"):
            raise ValueError(f"unknown search {self.search!r}")
        if self.normals not in ("analytic", "averaged"):
            raise ValueError(f"unknown normal source {self.normals!r}")
        if not self.eps_factor > 0:
            raise ValueError("eps factor must be positive")

    def penalty(self, case):
        lumped = case.lumped_lhs if self.lumped_lhs is None else self.lumped_lhs
        return GhostPenaltyConfig(kind=self.ghost, gamma=self.gamma, damped=self.band == "damped",
                                  lumped_lhs=lumped, m_damp=self.m_damp)


@dataclass
class ConvergenceRow:
    inv_h: int
    inv_dt: Optional[int]
    l2_error: float
    eoc: Optional[float] = None


@dataclass
class LevelResult:
    nx: int
    error: float
    mesh: object
    u: np.ndarray
    phi: np.ndarray
    seconds: float
    info: dict = field(default_factory=dict)


def eoc(errors):
    """Experimental orders ``log2(e_{2h} / e_h)`` between successive levels."""
    e = np.asarray(errors, dtype=float)
    return [float(v) for v in np.log2(e[:-1] / e[1:])]


def _refined_rule(k, n=3):
    base = QuadratureRule.gauss(n)
    ij = np.stack(np.meshgrid(np.arange(k), np.arange(k), indexing="xy"), -1).reshape(-1, 2)
    pts = (ij[:, None, :] + base.points[None, :, :]).reshape(-1, 2) / k
    w = np.tile(base.weights, len(ij)) / k**2
    return pts, w


def l2_error(mesh, u, exact, phi, eps_ref=EPS_REF, t=0.0, refine=True):
    """``sqrt(int H_eps_ref(phi) (u_h - u)^2)`` over the mesh.

    ``phi(x)`` is the analytic level set. Cells cut by the thin transition
    layer of ``H_eps_ref`` are integrated on a sub-grid fine enough to resolve it.
    """
    x = mesh.qpoints
    w = mesh.qweights * heaviside_eps(phi(x), eps_ref)
    e = mesh.field_at_qpoints(u) - exact(x, t)
    total = w * e**2
    if refine:
        k = max(1, math.ceil(mesh.h / eps_ref))
        centers = mesh.cell_origin(np.arange(mesh.n_cells)) + 0.5 * mesh.h
        near = np.flatnonzero(np.abs(phi(centers)) <= mesh.h + 4.0 * eps_ref)
        if k > 1 and len(near):
            total = total.reshape(mesh.n_cells, -1)
            total[near] = 0.0
            local, lw = _refined_rule(k)
            N = shape_values(local)
            fine = np.zeros(len(near))
            for chunk in np.array_split(near, max(1, len(near) // 64)):
                pts = mesh.cell_origin(chunk)[:, None, :] + mesh.h * local[None, :, :]
                pts = pts.reshape(-1, 2)
                uh = (u[mesh.cells[chunk]] @ N.T).ravel()
                wf = np.tile(lw, len(chunk)) * mesh.h**2 * heaviside_eps(phi(pts), eps_ref)
                ef = (uh - exact(pts, t)) ** 2 * wf
                fine[np.searchsorted(near, chunk)] = ef.reshape(len(chunk), -1).sum(axis=1)
            return float(np.sqrt(total.sum() + fine.sum()))
    return float(np.sqrt(total.sum()))


def _analytic_ls(mesh, case, t, normals="analytic"):
    return LevelSetField.from_analytic(mesh, case.geometry, t=t, q_source=normals)


def run_level(case, nx, cfg):
    """Solve one benchmark on an ``nx x nx`` mesh and measure its error."""
    t_start = time.perf_counter()
    mesh = build_mesh(nx)
    eps = cfg.eps_factor * mesh.h
    spec = case.problem()
    pcfg = cfg.penalty(case)
    method = cfg.search
    info = {}
    advect = case.advect_ls if cfg.advect_ls is None else cfg.advect_ls

    if case.stepper == "steady":
        ls = _analytic_ls(mesh, case, 0.0, cfg.normals)
        ops = build_operators(ls, eps, spec, pcfg, method=method)
        u, steps = solve_steady(ops, np.zeros(mesh.n_nodes), 3.2 * mesh.h)
        t = 0.0
        phi_nodes = ops.ls.values
        info["pseudo_steps"] = steps
    else:
        dt = case.dt_factor * mesh.h
        nsteps = int(round(case.T / dt))
        dt = case.T / nsteps
        state = TransientState(spec.initial(mesh.nodes, 0.0), 0.0, dt)
        if case.stepper == "heun":
            ls = _analytic_ls(mesh, case, 0.0, cfg.normals)
            ops = build_operators(ls, eps, spec, pcfg, method=method)
            for _ in range(nsteps):
                state = step_heun(state, ops)
            phi_nodes = ops.ls.values
        else:
            ls_state = None
            if advect:
                ls_state = LevelSetState.from_values(mesh, case.geometry.value(mesh.nodes, 0.0))
                params = EvolutionParams(dt=dt, eps=eps, lam=cfg.lam_factor * mesh.h)
                law = normal_derivative_law(-case.normal_speed)
                ls = ls_state.level_set()
            else:
                ls = _analytic_ls(mesh, case, 0.0, cfg.normals)
            ops_old = build_operators(ls, eps, spec, pcfg, t=0.0, method=method)
            for n in range(nsteps):
                t_new = (n + 1) * dt
                if advect:
                    v = build_interface_velocity(ls_state, law, eps, method=method)
                    ls_state = evolve_step(ls_state, v, params)
                    ls = ls_state.level_set()
                else:
                    ls = _analytic_ls(mesh, case, t_new, cfg.normals)
                ops_new = build_operators(ls, eps, spec, pcfg, t=t_new, method=method)
                state = step_crank_nicolson(state, ops_old, ops_new)
                ops_old = ops_new
            phi_nodes = ls.values
            if advect:
                r, dev = interface_radius(ls_state, case.geometry.center)
                info.update(radius=r, radius_deviation=dev)
        u, t = state.u, state.t

    err = l2_error(mesh, u, case.exact, lambda x: case.geometry.value(x, t), cfg.eps_ref, t)
    return LevelResult(nx, err, mesh, u, phi_nodes, time.perf_counter() - t_start, info)


def _file_stem(case_name, cfg):
    return f"{case_name}_{cfg.ghost}_{cfg.band}"


def write_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["inv_h", "inv_dt", "l2_error", "eoc"])
        for r in rows:
            w.writerow([r.inv_h, "" if r.inv_dt is None else r.inv_dt, f"{r.l2_error:.6e}",
                        "" if r.eoc is None else f"{r.eoc:.4f}"])


def _write_fields(path, res, case):
    mesh = res.mesh
    H = heaviside_eps(res.phi, 2.0 * mesh.h)
    t = case.T
    write_vtk(path, mesh, {
        "u": res.u,
        "phi": res.phi,
        "H_u": H * res.u,
        "error": H * (res.u - case.exact(mesh.nodes, t)),
    })


def run_case(case, nx_list, cfg=None):
    """Grid convergence study. Returns the table rows and per-level results."""
    cfg = cfg or RunConfig()
    if isinstance(case, str):
        if case not in CASES:
            raise ValueError(f"unknown case {case!r}; choose from {', '.join(CASES)}")
        case = CASES[case]
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
    results, rows = [], []
    for nx in nx_list:
        res = run_level(case, nx, cfg)
        log.info("%s nx=%d error=%.3e (%.1fs)", case.name, nx, res.error, res.seconds)
        results.append(res)
        inv_dt = None if case.stepper == "steady" else int(round(case.T / (case.dt_factor / nx)))
        rows.append(ConvergenceRow(nx, inv_dt, res.error))
        if cfg.out and cfg.vtk:
            _write_fields(os.path.join(cfg.out, f"{_file_stem(case.name, cfg)}_{nx}.vtk"), res, case)
    for row, rate in zip(rows[1:], eoc([r.l2_error for r in rows])):
        row.eoc = rate
    if cfg.out:
        write_csv(os.path.join(cfg.out, _file_stem(case.name, cfg) + ".csv"), rows)
    return rows, results


# circular extension test


def quoted_extension(x):
    """Reference formula ``y (r + y) / r`` for the extension of ``y (1 + y)``."""
    r = np.linalg.norm(x, axis=1)
    return x[:, 1] * (r + x[:, 1]) / r


def constant_extension(x):
    """Value of ``y (1 + y)`` at the closest point of the unit circle."""
    r = np.linalg.norm(x, axis=1)
    return x[:, 1] * (r + x[:, 1]) / r**2


@dataclass
class ExtensionReport:
    nx: int
    band_nodes: int
    linf: float
    l2: float
    linf_constant: float
    l2_constant: float
    field: np.ndarray
    mesh: object


def run_extension_circle(nx, eps_factor=2.0, band=2.0, method="traversal"):
    """Constant extension of ``V = y (1 + y)`` from the unit circle.

    The mesh covers ``(-2, 2)^2``; values are extended to nodes with
    ``|phi| <= band * eps`` and compared with both reference fields.
    """
    mesh = build_mesh(nx, origin=(-2.0, -2.0), extent=4.0)
    eps = eps_factor * mesh.h
    circle = Circle((0.0, 0.0), 1.0)
    ls = LevelSetField.from_analytic(mesh, circle)
    sel = np.flatnonzero(np.abs(ls.values) <= band * eps)
    cp = closest_point(ls, mesh.nodes[sel], eps, method=method, strict=False)
    # nodes without a unique closest point (the centre on coarse meshes) are skipped
    sel, cp = sel[cp.ok], cp.subset(cp.ok)
    x = mesh.nodes[sel]
    xg = cp.x_gamma
    V = xg[:, 1] * (1.0 + xg[:, 1])
    ext = np.zeros(mesh.n_nodes)
    ext[sel] = V
    dq = V - quoted_extension(x)
    dc = V - constant_extension(x)
    area = mesh.h**2
    return ExtensionReport(
        nx, len(sel),
        float(np.abs(dq).max()), float(np.sqrt(area * np.sum(dq**2))),
        float(np.abs(dc).max()), float(np.sqrt(area * np.sum(dc**2))),
        ext, mesh,
    )


# command line


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="diffsbm", description=__doc__)
    p.add_argument("--case", choices=CASE_NAMES, default="elliptic")
    p.add_argument("--levels", default="16,32,64,128", help="comma-separated cells per axis")
    p.add_argument("--ghost", choices=("dirichlet", "neumann"), default="dirichlet")
    p.add_argument("--band", choices=("full", "damped"), default="full")
    p.add_argument("--eps-factor", type=float, default=2.0)
    p.add_argument("--m-damp", type=int, default=M_DAMP)
    p.add_argument("--eps-ref", type=float, default=EPS_REF)
    p.add_argument("--out", default="results")
    p.add_argument("--vtk", action="store_true")
    ls = p.add_mutually_exclusive_group()
    ls.add_argument("--analytic-ls", dest="advect_ls", action="store_false", default=None)
    ls.add_argument("--advect-ls", dest="advect_ls", action="store_true")
    p.add_argument("--search", choices=("traversal", "bisection"), default="traversal")
    p.add_argument("--normals", choices=("analytic", "averaged"), default="analytic",
                   help="normal field for analytic level sets")
    p.add_argument("--config", help="key=value file overriding command-line flags")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


_TYPES = {"eps_factor": float, "eps_ref": float, "m_damp": int, "vtk": _bool,
          "advect_ls": _bool, "verbose": _bool}


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        for key, value in read_config(args.config).items():
            if not hasattr(args, key) or key == "config":
                parser.error(f"unknown config key {key!r}")
            setattr(args, key, _TYPES.get(key, str)(value))
    try:
        args.levels = [int(s) for s in str(args.levels).split(",") if s.strip()]
    except ValueError:
        parser.error(f"bad --levels {args.levels!r}")
    if not args.levels:
        parser.error("no levels given")
    if args.case not in CASE_NAMES:
        parser.error(f"unknown case {args.case!r}")
    return args


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.case == "extension-circle":
            os.makedirs(args.out, exist_ok=True)
            path = os.path.join(args.out, "extension-circle.csv")
            with open(path, "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["inv_h", "band_nodes", "linf", "l2", "linf_constant", "l2_constant"])
                for nx in args.levels:
                    r = run_extension_circle(nx, args.eps_factor, method=args.search)
                    w.writerow([nx, r.band_nodes, f"{r.linf:.6e}", f"{r.l2:.6e}",
                                f"{r.linf_constant:.6e}", f"{r.l2_constant:.6e}"])
                    print(f"nx={nx:5d} band={r.band_nodes:6d} linf={r.linf:.3e} "
                          f"linf_constant={r.linf_constant:.3e}")
                    if args.vtk:
                        write_vtk(os.path.join(args.out, f"extension-circle_{nx}.vtk"), r.mesh,
                                  {"extension": r.field})
            return 0
        cfg = RunConfig(ghost=args.ghost, band=args.band, eps_factor=args.eps_factor,
                        m_damp=args.m_damp, search=args.search, advect_ls=args.advect_ls,
                        eps_ref=args.eps_ref, normals=args.normals, out=args.out,
                        vtk=args.vtk)
        rows, _ = run_case(args.case, args.levels, cfg)
    except (ConvergenceError, ClosestPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{'1/h':>6} {'1/dt':>6} {'L2 error':>12} {'EOC':>6}")
    for r in rows:
        print(f"{r.inv_h:6d} {'' if r.inv_dt is None else r.inv_dt:>6} {r.l2_error:12.3e} "
              f"{'' if r.eoc is None else f'{r.eoc:.2f}':>6}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
