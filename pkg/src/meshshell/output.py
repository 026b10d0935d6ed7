"""State files (``.npz``) and snapshot output."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .composite import StructureState
from .errors import StateError
from .fluid import write_vtk

_STRUCT = ("eta", "v", "w", "z", "k", "d", "p")


def save_state(path, state, meta: dict | None = None):
    """Write a :class:`CoupledState` to a compressed ``.npz`` file."""
    arrays = {f"structure_{k}": getattr(state.structure, k) for k in _STRUCT}
    arrays.update(n=np.array(state.n), t=np.array(state.t), v_star=state.v_star,
                  wall=state.wall.values, wall_R=np.array(state.wall.R),
                  wall_z=state.wall.z, wall_theta=state.wall.theta,
                  z_pre=state.z_pre, theta_pre=state.theta_pre)
    if state.U is not None:
        arrays["U"] = state.U
        arrays["p"] = state.p
    for k, v in (meta or {}).items():
        arrays[f"meta_{k}"] = np.array(v)
    np.savez_compressed(path, **arrays)


def load_state_arrays(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise StateError(f"state file {path} not found")
    try:
        with np.load(path, allow_pickle=False) as data:
            return {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise StateError(f"cannot read state file {path}: {exc}") from exc


def structure_from_arrays(arrays: dict) -> StructureState:
    try:
        return StructureState(*(np.asarray(arrays[f"structure_{k}"], float) for k in _STRUCT))
    except KeyError as exc:
        raise StateError(f"state file lacks {exc.args[0]}") from exc


def inspect_state(path) -> dict:
    """Short numeric summary of a state file."""
    a = load_state_arrays(path)
    out = {"n": int(a["n"]), "t": float(a["t"]),
           "shell_dofs": int(a["structure_eta"].size),
           "net_nodes": int(a["structure_w"].size // 3),
           "max_abs_eta": float(np.abs(a["structure_eta"]).max(initial=0.0)),
           "max_abs_v": float(np.abs(a["structure_v"]).max(initial=0.0)),
           "min_wall_radius": float(a["wall_R"] + a["wall"].min())}
    if "U" in a:
        out["fluid_nodes"] = int(a["U"].shape[0])
        out["max_speed"] = float(np.linalg.norm(a["U"], axis=1).max(initial=0.0))
        out["pressure_range"] = [float(a["p"].min()), float(a["p"].max())]
    out["meta"] = {k[5:]: a[k].tolist() for k in a if k.startswith("meta_")}
    return out


def write_snapshot(out_dir, state):
    """One legacy-VTK file for the fluid state at this step."""
    if state.grid is None or state.U is None:
        return None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"fluid_{state.n:06d}.vtk"
    write_vtk(path, state.grid, state.U, state.p, title=f"step {state.n} t={state.t:.6g}")
    return path
