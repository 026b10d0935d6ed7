"""Lie splitting time loop: structure substep, domain update, fluid substep, bookkeeping."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .composite import (StructureModel, StructureState, build_structure_system, interface_operator,
                        solve_structure_substep, structure_dissipation, structure_energy_residual)
from .diagnostics import LipschitzMonitor, subgraph_monitor
from .errors import ConfigurationError, LipschitzViolation, MeshShellError, StateError, SubgraphViolation
from .fluid import (FluidCoupling, FluidGrid, FluidParams, FluidSolver, build_fluid_system,
                    calibrate_pressure_constant, fluid_energy_terms, slab_average, transfer_velocity)
from .geometry import AleSlabMap, BoundaryField, CylinderRef, ale_domain_velocity, reparameterize
from .shell import ShellField

log = logging.getLogger(__name__)

LEDGER_COLUMNS = [
    "n", "t", "E_half", "E_full", "D", "numdiss_fluid", "numdiss_shell", "numdiss_net_k",
    "numdiss_net_z", "kin_mismatch", "P_in", "P_out", "subgraph_margin", "lipschitz_norm",
    # extra bookkeeping
    "numdiss_elastic", "stab_diss", "pressure_work", "bound_rhs", "struct_residual",
    "fluid_residual", "ineq_slack",
]


@dataclass(frozen=True)
class PressureData:
    p_in: Callable[[float], float]
    p_out: Callable[[float], float]

    def averages(self, t0: float, t1: float) -> tuple[float, float]:
        return slab_average(self.p_in, t0, t1), slab_average(self.p_out, t0, t1)


ZERO_PRESSURE = PressureData(lambda t: 0.0, lambda t: 0.0)


@dataclass
class CoupledProblem:
    ref: CylinderRef
    model: StructureModel
    fluid: FluidParams | None
    pressures: PressureData
    T: float
    N: int
    lipschitz_cap: float = np.inf
    tolerance: float = 1e-9

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigurationError("final time T must be positive")
        if self.N < 0:
            raise ConfigurationError("number of steps N must be nonnegative")
        if abs(self.model.basis.R - self.ref.R) > 0 or abs(self.model.basis.L - self.ref.L) > 0:
            raise ConfigurationError("shell basis and fluid domain disagree on R or L")

    @property
    def dt(self) -> float:
        return self.T / max(self.N, 1)


@dataclass(frozen=True)
class CoupledState:
    """Everything carried from one time level to the next."""

    n: int
    t: float
    structure: StructureState
    v_star: np.ndarray
    wall: BoundaryField
    z_pre: np.ndarray
    theta_pre: np.ndarray
    U: np.ndarray | None = None
    p: np.ndarray | None = None
    grid: FluidGrid | None = field(default=None, compare=False, repr=False)


class EnergyLedger:
    """Per-step energy table; the columns are listed in ``LEDGER_COLUMNS``."""

    def __init__(self, E0: float, C: float):
        self.E0 = E0
        self.C = C
        self.rows: list[dict[str, float]] = []

    def append(self, row: dict[str, float]):
        for k, v in row.items():
            if not np.isfinite(v):
                raise StateError(f"ledger entry {k} is not finite")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], float)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(LEDGER_COLUMNS)
            for r in self.rows:
                wr.writerow([int(r["n"])] + [repr(float(r[c])) for c in LEDGER_COLUMNS[1:]])

    def __len__(self):
        return len(self.rows)


def energy_report(ledger: EnergyLedger, dt: float) -> dict:
    """Aggregate the ledger and check the uniform energy statements against K."""
    if not ledger.rows:
        return {"E0": ledger.E0, "K": ledger.E0, "max_E": ledger.E0, "sum_D": 0.0,
                "sum_numdiss": 0.0, "sum_elastic_increments": 0.0, "sum_kin_mismatch_dt": 0.0,
                "pressure_norm2": 0.0, "C": ledger.C, "statements": {}, "ok": True,
                "max_struct_residual": 0.0, "max_ineq_slack": 0.0, "violations": 0}
    col = ledger.column
    Pn2 = float(np.sum(dt * (col("P_in") ** 2 + col("P_out") ** 2)))
    K = ledger.E0 + ledger.C * Pn2
    max_E = float(max(ledger.E0, col("E_full").max(), col("E_half").max()))
    sum_D = float(col("D").sum())
    numdiss = float((col("numdiss_fluid") + col("numdiss_shell") + col("numdiss_net_k")
                     + col("numdiss_net_z") + col("numdiss_elastic")).sum())
    elastic = float(col("numdiss_elastic").sum())
    slack = col("ineq_slack")
    tol = 1e-9
    statements = {
        "energy_bounded": max_E <= K * (1 + tol) + tol * max(ledger.E0, 1e-300),
        "dissipation_bounded": sum_D <= K * (1 + tol),
        "numerical_dissipation_bounded": numdiss <= K * (1 + tol),
        "elastic_increments_bounded": elastic <= K * (1 + tol),
    }
    return {
        "E0": ledger.E0, "C": ledger.C, "pressure_norm2": Pn2, "K": K, "max_E": max_E,
        "sum_D": sum_D, "sum_numdiss": numdiss, "sum_elastic_increments": elastic,
        "sum_kin_mismatch_dt": float(np.sum(col("kin_mismatch")) * dt),
        "max_struct_residual": float(np.abs(col("struct_residual")).max()),
        "max_ineq_slack": float(slack.max()),
        "violations": int(np.sum(slack > tol)),
        "statements": statements,
        "ok": bool(all(statements.values()) and np.all(slack <= tol)),
    }


class Simulation:
    """Owns the time-independent data of a run and advances :class:`CoupledState`."""

    def __init__(self, problem: CoupledProblem):
        self.problem = problem
        self.model = problem.model
        self.basis = problem.model.basis
        self.fluid_on = problem.fluid is not None
        self.solver = FluidSolver() if self.fluid_on else None
        ref = problem.ref
        self.theta_ring = np.tile(ref.theta, ref.N_z + 1)
        self.C = 0.0
        if self.fluid_on:
            ref_grid = FluidGrid(ref, BoundaryField.zeros(ref))
            self.C = calibrate_pressure_constant(ref_grid, problem.fluid.mu_F)
            log.info("pressure-work constant C = %.6e", self.C)
        self.lipschitz = LipschitzMonitor(self.basis, problem.lipschitz_cap)
        self.last_state: CoupledState | None = None
        self.ledger: EnergyLedger | None = None

    # -- energies ----------------------------------------------------------
    def fluid_kinetic(self, state: CoupledState) -> float:
        if not self.fluid_on or state.U is None:
            return 0.0
        W = state.grid.mass_weights
        return float(self.problem.fluid.rho_F * np.sum(W[:, None] * state.U ** 2))

    def total_energy(self, state: CoupledState) -> float:
        return self.fluid_kinetic(state) + self.model.total_energy(state.structure)

    # -- initial data ------------------------------------------------------
    def initial_state(self, structure: StructureState | None = None, U=None, p=None) -> CoupledState:
        ref = self.problem.ref
        s = self.model.zero_state() if structure is None else structure.copy()
        field_, zp, tp = reparameterize(ShellField(self.basis, s.eta), ref.z, ref.theta, ref.R, 0)
        grid = FluidGrid(ref, field_) if self.fluid_on else None
        if self.fluid_on:
            U = np.zeros((grid.n_nodes, 3)) if U is None else np.asarray(U, float).reshape(-1, 3)
            p = np.zeros(grid.n_nodes) if p is None else np.asarray(p, float)
        state = CoupledState(0, 0.0, s, s.v.copy(), field_, zp, tp, U, p, grid)
        self.check_compatibility(state)
        return state

    def check_compatibility(self, state: CoupledState, tol: float = 1e-8):
        """Reject initial data violating the trace, constraint or incompressibility conditions."""
        m, s = self.model, state.structure
        if m.n_w:
            Td = m.T @ s.eta
            if np.linalg.norm(s.d - Td) > tol * (1 + np.linalg.norm(Td)):
                raise StateError("initial data: net displacement is not the shell trace (d = T eta)")
            r = m.constraint_residual(s.eta, s.w)
            if np.linalg.norm(r) > tol * (1 + np.linalg.norm(s.w)):
                raise StateError("initial data: rod inextensibility constraint violated")
        if self.fluid_on:
            g = state.grid
            E = interface_operator(self.basis, state.z_pre.ravel(), state.theta_pre.ravel(),
                                   self.theta_ring, state.wall.radius.ravel())
            ring = state.U[g.wall_nodes].ravel()
            if np.linalg.norm(ring - E @ s.v) > tol * (1 + np.linalg.norm(ring)):
                raise StateError("initial data: fluid wall velocity differs from the shell velocity")
            I, _, _ = g.ijk
            ends = (I == 0) | (I == g.Nz - 1)
            if np.abs(state.U[ends, :2]).max(initial=0.0) > tol:
                raise StateError("initial data: transverse velocity on an end section")
            Bu = g.divergence_matrix @ state.U.ravel()
            Sp = g.stabilization_matrix(self.problem.fluid.c_stab) @ state.p
            if np.linalg.norm(Bu - Sp) > tol * max(np.linalg.norm(Bu) + np.linalg.norm(Sp), 1.0):
                raise StateError("initial data: velocity is not divergence free")

    # -- one step ------------------------------------------------------------
    def step(self, state: CoupledState, observers=()) -> tuple[CoupledState, dict]:
        prob, m = self.problem, self.model
        dt = prob.dt
        t0, t1 = state.t, state.t + dt
        ref = prob.ref
        tol = prob.tolerance

        # structure substep: fluid frozen, initial shell velocity is the fluid trace
        E_n = self.total_energy(state)
        prev = state.structure
        half = solve_structure_substep(build_structure_system(m, dt, prev))
        sdiss = structure_dissipation(m, prev, half)
        sres = structure_energy_residual(m, prev, half)
        E_half = self.fluid_kinetic(state) + m.total_energy(half)
        struct_rel = sres / max(E_n, self._E0, 1e-300)

        # new domain from the half-step displacement
        det_margin, rad_margin = subgraph_monitor(self.basis, half.eta)
        if det_margin <= 0 or rad_margin <= 0:
            raise SubgraphViolation(f"wall is no longer a radial graph (margin {det_margin:.3e}, "
                                    f"min radius {rad_margin:.3e})")
        lip = self.lipschitz.update(half.eta)
        if not self.lipschitz.ok:
            raise LipschitzViolation(f"displacement norm {lip:.3e} exceeds the cap {prob.lipschitz_cap:.3e}")
        wall, zp, tp = reparameterize(ShellField(self.basis, half.eta), ref.z, ref.theta, ref.R, state.n + 1)

        P_in, P_out = prob.pressures.averages(t0, t1)
        row = {"n": state.n + 1, "t": t1, "E_half": E_half, "P_in": P_in, "P_out": P_out,
               "subgraph_margin": min(det_margin, rad_margin / ref.R), "lipschitz_norm": lip,
               "numdiss_shell": sdiss["shell"], "numdiss_net_k": sdiss["net_k"],
               "numdiss_net_z": sdiss["net_z"],
               "numdiss_elastic": sdiss["shell_elastic"] + sdiss["net_elastic"],
               "struct_residual": struct_rel}

        if not self.fluid_on:
            new = CoupledState(state.n + 1, t1, half, half.v.copy(), wall, zp, tp)
            row.update(E_full=E_half, D=0.0, numdiss_fluid=0.0, kin_mismatch=0.0, stab_diss=0.0,
                       pressure_work=0.0, bound_rhs=E_half, fluid_residual=0.0, ineq_slack=0.0)
            for ob in observers:
                ob.observe(t0, t1, m, half)
            return new, row

        # fluid substep on the new domain; structure positions frozen
        grid = FluidGrid(ref, wall)
        slab = AleSlabMap(wall, state.wall, dt)
        u_hat = transfer_velocity(state.U, state.grid, grid, slab)
        I, _, K = grid.ijk
        d_eta = slab.delta_eta()[I, K]
        s_vel = ale_domain_velocity(slab, grid.cylindrical)
        E = interface_operator(self.basis, zp.ravel(), tp.ravel(), self.theta_ring, wall.radius.ravel())
        coupling = FluidCoupling(E, m.M_sh, half.v)
        system = build_fluid_system(grid, prob.fluid, dt, u_hat, d_eta, s_vel, (P_in, P_out), coupling)
        sol = self.solver.solve(system)
        terms = fluid_energy_terms(system, sol)
        structure = half.copy()
        structure.v = sol.V.copy()
        new = CoupledState(state.n + 1, t1, structure, half.v.copy(), wall, zp, tp, sol.U, sol.p, grid)

        E_full = terms["kinetic"] + m.total_energy(structure)
        dv = sol.V - half.v
        kin = float(dv @ (m.G_sh @ dv))
        D = terms["viscous"]
        bound_rhs = E_half + self.C * dt * (P_in ** 2 + P_out ** 2)
        lhs = E_full + terms["numdiss"] + terms["shell_jump"] + D
        identity = (E_half + terms["pressure_work"]
                    - (E_full + terms["numdiss"] + terms["shell_jump"] + 2 * D + terms["stabilization"]))
        scale = max(bound_rhs, self._E0, 1e-300)
        row.update(E_full=E_full, D=D, numdiss_fluid=terms["numdiss"], kin_mismatch=kin,
                   stab_diss=terms["stabilization"], pressure_work=terms["pressure_work"],
                   bound_rhs=bound_rhs, fluid_residual=identity / scale,
                   ineq_slack=(lhs - bound_rhs) / scale)
        row["numdiss_shell"] += terms["shell_jump"]
        if row["ineq_slack"] > tol:
            log.warning("step %d: fluid energy inequality exceeded by %.3e (relative)", state.n + 1,
                        row["ineq_slack"])
        if abs(struct_rel) > tol:
            log.warning("step %d: structure energy equality residual %.3e", state.n + 1, struct_rel)
        for ob in observers:
            ob.observe(t0, t1, m, structure, system, sol)
        return new, row

    # -- time loop -------------------------------------------------------------
    def run(self, state: CoupledState | None = None, observers=(), on_step=None) -> CoupledState:
        state = self.initial_state() if state is None else state
        self._E0 = self.total_energy(state)
        self.ledger = EnergyLedger(self._E0, self.C)
        self.last_state = state
        for ob in observers:
            if hasattr(ob, "initial"):
                ob.initial(state.grid, state.U, state.structure, self.model)
        for _ in range(self.problem.N):
            try:
                state, row = self.step(state, observers)
            except MeshShellError:
                log.error("run aborted at step %d; last valid state kept", self.last_state.n)
                raise
            self.ledger.append(row)
            self.last_state = state
            if on_step is not None:
                on_step(state, row)
        return state

    _E0: float = 0.0


def run(problem: CoupledProblem, state: CoupledState | None = None, observers=(), on_step=None):
    """Convenience wrapper: returns (final state, ledger, report, simulation)."""
    sim = Simulation(problem)
    final = sim.run(state, observers, on_step)
    return final, sim.ledger, energy_report(sim.ledger, problem.dt), sim


def step(sim: Simulation, state: CoupledState, observers=()):
    return sim.step(state, observers)


PRESETS = ("rest", "pluck", "stirred")


def preset_state(sim: Simulation, name: str, amplitude: float = 0.0) -> CoupledState:
    """Initial data by name.

    ``rest``: everything zero.  ``pluck``: radial shell velocity bump with the
    net moving along (structure-only runs).  ``stirred``: a swirling and
    transverse fluid motion away from the wall, projected to be discretely
    incompressible, with the structure at rest.
    """
    from .diagnostics import default_test_modes
    from .fluid import project_divergence_free

    if name == "rest":
        return sim.initial_state()
    basis, m, prob = sim.basis, sim.model, sim.problem
    if name == "pluck":
        if sim.fluid_on:
            raise StateError("preset 'pluck' moves the wall and needs the fluid disabled")
        L = basis.L
        f = ShellField.interpolate(basis, lambda z, t: np.stack([
            0 * z, amplitude * np.sin(np.pi * z / L) ** 2 * (1 + 0.5 * np.cos(2 * t)), 0 * z]))
        s = m.zero_state()
        s.v = f.coeffs
        if m.n_w:
            s.k = m.T @ s.v
        return sim.initial_state(s)
    if name == "stirred":
        if not sim.fluid_on:
            raise StateError("preset 'stirred' needs the fluid enabled")
        ref = prob.ref
        grid = FluidGrid(ref, BoundaryField.zeros(ref))
        modes = {md.name: md for md in default_test_modes(ref.R, ref.L, support=0.9)}
        x = grid.points
        U = amplitude * (modes["swirl"].fluid(x) + modes["transverse_curl"].fluid(x))
        U0, p0 = project_divergence_free(grid, U, prob.fluid.c_stab)
        return sim.initial_state(None, U0, p0)
    raise ConfigurationError(f"unknown initial preset {name!r}; choose from {', '.join(PRESETS)}")
