"""Run driver, built-in verification suites and the time-step refinement study."""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig, build_problem, parse_config
from .diagnostics import WeakResidual, default_test_modes
from .errors import MeshShellError, SubgraphViolation
from .output import load_state_arrays, save_state, structure_from_arrays, write_snapshot
from .splitting import Simulation, energy_report, preset_state


def worker_count(requested: int | None = None) -> int:
    env = os.environ.get("MESHSHELL_THREADS")
    cap = max(1, int(env)) if env and env.strip().isdigit() else 1
    return max(1, min(cap, requested or cap))


def initial_state(sim: Simulation, cfg: RunConfig):
    if cfg.init.startswith("state:"):
        p = Path(cfg.init[6:].strip())
        arrays = load_state_arrays(p if p.is_absolute() else cfg.path.parent / p)
        U = arrays.get("U") if sim.fluid_on else None
        P = arrays.get("p") if sim.fluid_on else None
        return sim.initial_state(structure_from_arrays(arrays), U, P)
    return preset_state(sim, cfg.init, cfg.amplitude)


def run_config(cfg: RunConfig, out_dir: Path | None = None, weak: bool = False, write: bool = True) -> dict:
    """Execute a configured run; returns a JSON-ready summary."""
    t0 = time.time()
    problem = build_problem(cfg)
    sim = Simulation(problem)
    state = initial_state(sim, cfg)
    out = Path(out_dir) if out_dir is not None else cfg.out_dir
    observers = []
    wr = None
    if weak and sim.fluid_on:
        wr = WeakResidual(cfg.T, default_test_modes(cfg.R, cfg.L), rho_F=cfg.rho_F,
                          pressures=(cfg.P_in, cfg.P_out))
        observers.append(wr)

    def on_step(st, row):
        if write and cfg.cadence and st.n % cfg.cadence == 0:
            write_snapshot(out, st)

    summary = {"config": str(cfg.path), "N": cfg.N, "dt": problem.dt, "aborted": None}
    if write:
        out.mkdir(parents=True, exist_ok=True)
        if cfg.cadence:
            write_snapshot(out, state)
    try:
        final = sim.run(state, observers, on_step)
    except MeshShellError as exc:
        summary["aborted"] = f"{type(exc).__name__}: {exc}"
        final = sim.last_state
    report = energy_report(sim.ledger, problem.dt)
    summary.update(report=report, steps=len(sim.ledger), final_step=final.n,
                   runtime_s=time.time() - t0)
    if wr is not None:
        summary["weak_residual"] = wr.report()
    if write:
        sim.ledger.write_csv(out / "ledger.csv")
        save_state(out / "final_state.npz", final, {"config": str(cfg.path)})
        if wr is not None:
            wr.write_csv(out / "weak_residual.csv")
        with open(out / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, default=_jsonable)
    summary["ok"] = bool(summary["aborted"] is None and report["ok"])
    summary["_simulation"] = sim
    return summary


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    return repr(o)


# ---------------------------------------------------------------------------
# refinement study

def _level(args) -> dict:
    path, N = args
    cfg = parse_config(path).with_steps(N)
    res = run_config(cfg, weak=True, write=False)
    rep = res["report"]
    return {"N": N, "dt": res["dt"], "max_E": rep["max_E"], "K": rep["K"], "E0": rep["E0"],
            "C": rep["C"], "sum_kin_mismatch_dt": rep["sum_kin_mismatch_dt"],
            "violations": rep["violations"], "aborted": res["aborted"],
            "weak_residual": res.get("weak_residual", {}), "runtime_s": res["runtime_s"],
            "lipschitz": float(res["_simulation"].lipschitz.value)}


def slope(x, y) -> float:
    x, y = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(x, y, 1)[0])


def convergence_study(path, levels: int = 3, threads: int | None = None) -> dict:
    """Run the configuration at dt, dt/2, ... and tabulate the uniform-bound quantities."""
    cfg = parse_config(path)
    jobs = [(str(path), cfg.N * 2 ** k) for k in range(levels)]
    workers = worker_count(threads)
    if workers > 1 and levels > 1:
        with ProcessPoolExecutor(max_workers=min(workers, levels)) as ex:
            rows = list(ex.map(_level, jobs))
    else:
        rows = [_level(j) for j in jobs]
    maxE = np.array([r["max_E"] for r in rows])
    Ks = np.array([r["K"] for r in rows])
    mism = np.array([r["sum_kin_mismatch_dt"] for r in rows])
    dts = np.array([r["dt"] for r in rows])
    spread = float((maxE.max() - maxE.min()) / max(maxE.max(), 1e-300))
    names = list(rows[0]["weak_residual"])
    monotone = {n: bool(all(rows[k + 1]["weak_residual"][n] < rows[k]["weak_residual"][n]
                            for k in range(levels - 1))) for n in names}
    mslope = slope(dts, mism) if levels > 1 and np.all(mism > 0) else float("nan")
    checks = {
        "bounded_by_K": bool(np.all(maxE <= Ks * (1 + 1e-9))),
        "uniform_within_5pct": spread < 0.05,
        "mismatch_slope_in_range": bool(0.7 <= mslope <= 1.3),
        "weak_residual_monotone": bool(all(monotone.values())) if names else True,
        "no_aborts": all(r["aborted"] is None for r in rows),
    }
    return {"levels": rows, "max_E_spread": spread, "mismatch_slope": mslope,
            "weak_residual_monotone": monotone, "checks": checks, "ok": bool(all(checks.values()))}


# ---------------------------------------------------------------------------
# verification suites

def suite_geometry(n_pairs: int = 100, seed: int = 7) -> dict:
    from .geometry import AleSlabMap, BoundaryField, CylinderRef, ale_jacobian, ale_map

    rng = np.random.default_rng(seed)
    ref = CylinderRef(1.0, 2.0, 31, 4, 32)
    worst_s, worst_inv = 0.0, 0.0
    for _ in range(n_pairs):
        a = BoundaryField(ref.R, ref.z, ref.theta, 0.3 * (rng.random((32, 32)) - 0.5))
        b = BoundaryField(ref.R, ref.z, ref.theta, 0.3 * (rng.random((32, 32)) - 0.5))
        m = AleSlabMap(a, b, 0.1)
        S = ale_jacobian(m)
        worst_s = max(worst_s, float(np.abs(S - (1 - m.delta_eta()) ** 2).max() / np.abs(S).max()))
        Z, T = np.meshgrid(ref.z, ref.theta, indexing="ij")
        r = rng.random(Z.shape) * a.radius
        pts = np.stack([Z, r, T], axis=-1)
        back = ale_map(m.inverse(), ale_map(m, pts))
        worst_inv = max(worst_inv, float(np.abs(back - pts).max() / np.abs(pts).max()))
    ok = worst_s <= 1e-12 and worst_inv <= 1e-12
    return {"ok": ok, "jacobian_identity": worst_s, "inverse_identity": worst_inv}


def suite_shell() -> dict:
    from .shell import ShellBasis, ShellParams, assemble_shell_stiffness

    out = {}
    for i, (h, lam, mu) in enumerate([(0.05, 1.0, 1.0), (0.1, 500.0, 200.0), (0.02, 0.0, 3.0)]):
        basis = ShellBasis(1.0, 3.0, 10, 8)
        K = assemble_shell_stiffness(basis, ShellParams(h=h, lam=lam, mu=mu, rho_K=1.0, R=1.0, L=3.0))
        out[f"set{i}"] = float(np.linalg.eigvalsh(K.toarray()).min())
    return {"ok": all(v > 0 for v in out.values()), "min_eigenvalues": out}


def suite_net(net_path=None) -> dict:
    from .net import (assemble_net_stiffness, constraint_nullity, constraint_operator,
                      load_topology, parse_topology)

    top = load_topology(net_path, 1.0) if net_path else parse_topology(_SQUARE_NET, 1.0)
    K = assemble_net_stiffness(top)
    Bd, Bw = constraint_operator(top, warn=False)
    d = np.tile([0.3, -0.2, 0.5], top.n_nodes)
    w = np.zeros(3 * top.n_nodes)
    a_S = float(w @ (K @ w))
    res = float(np.abs(Bd @ d + Bw @ w).max())
    return {"ok": a_S == 0.0 and res <= 1e-14, "rigid_energy": a_S, "rigid_residual": res,
            "constraint_nullity": constraint_nullity(Bd, Bw)}


_SQUARE_NET = """\
vertex a 0.5 0.0
vertex b 1.5 0.0
vertex c 1.5 1.5707963267948966
vertex d 0.5 1.5707963267948966
edge e0 a b 5 0.01 1 1 1 0.001 0.001 0.001
edge e1 b c 5 0.01 1 1 1 0.001 0.001 0.001
edge e2 c d 5 0.01 1 1 1 0.001 0.001 0.001
edge e3 d a 5 0.01 1 1 1 0.001 0.001 0.001
"""


def suite_structure_energy(config) -> dict:
    cfg = parse_config(config)
    res = run_config(cfg, write=False)
    rep = res["report"]
    ok = res["aborted"] is None and rep["max_struct_residual"] <= 1e-9
    return {"ok": ok, "max_relative_residual": rep["max_struct_residual"], "steps": res["steps"],
            "E0": rep["E0"], "runtime_s": res["runtime_s"]}


def poiseuille_errors(levels=(8, 16, 32), N_z: int = 2, N_theta: int = 8, R=1.0, L=2.0,
                      mu_F=1.0, dP=4.0) -> list[float]:
    """Max-norm error of the steady axial velocity against the parabolic profile."""
    from .fluid import FluidGrid, FluidParams, build_fluid_system, poiseuille_profile, solve_fluid_substep
    from .geometry import BoundaryField, CylinderRef

    errs = []
    for n in levels:
        ref = CylinderRef(R, L, N_z, n, N_theta)
        grid = FluidGrid(ref, BoundaryField.zeros(ref))
        system = build_fluid_system(grid, FluidParams(1.0, mu_F, convection=False), None, pressures=(dP, 0.0))
        sol = solve_fluid_substep(system)
        exact = poiseuille_profile(grid.cylindrical[:, 1], dP, R, mu_F, L)
        errs.append(float(np.abs(sol.U[:, 2] - exact).max()))
    return errs


def suite_fluid_poiseuille() -> dict:
    t0 = time.time()
    levels = (8, 16, 32)
    errs = poiseuille_errors(levels)
    rates = [float(np.log2(errs[k] / errs[k + 1])) for k in range(len(errs) - 1)]
    ok = all(1.6 <= r <= 2.4 for r in rates)
    return {"ok": ok, "errors": errs, "rates": rates, "runtime_s": time.time() - t0}


def suite_coupled_energy(config) -> dict:
    cfg = parse_config(config)
    res = run_config(cfg, write=False)
    rep = res["report"]
    sim = res["_simulation"]
    signs = all(float(sim.ledger.column(c).min(initial=0.0)) >= 0 for c in
                ("numdiss_fluid", "numdiss_shell", "numdiss_net_k", "numdiss_net_z", "numdiss_elastic", "D"))
    ok = res["aborted"] is None and rep["violations"] == 0 and signs
    return {"ok": ok, "violations": rep["violations"], "max_slack": rep["max_ineq_slack"],
            "dissipation_nonnegative": signs, "runtime_s": res["runtime_s"], "C": rep["C"]}


def suite_refinement(config, levels: int = 3) -> dict:
    return convergence_study(config, levels)


SUITES = {
    "geometry": lambda cfg: suite_geometry(),
    "shell": lambda cfg: suite_shell(),
    "net": lambda cfg: suite_net(),
    "structure-energy": lambda cfg: suite_structure_energy(cfg or "configs/structure.ini"),
    "fluid-poiseuille": lambda cfg: suite_fluid_poiseuille(),
    "coupled-energy": lambda cfg: suite_coupled_energy(cfg or "configs/demo.ini"),
    "refinement": lambda cfg: suite_refinement(cfg or "configs/demo.ini"),
}
