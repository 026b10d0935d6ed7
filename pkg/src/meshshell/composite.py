"""Shell + rod net as one constrained structure, and its backward-Euler substep.

The net displacement is never an unknown: it is the shell trace ``d = T eta``
at the net nodes.  The saddle system is posed in (eta, w, p) where ``p`` holds
the per-element multipliers of the rod constraint (the rods' contact force).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError, StateError
from .net import (NetTopology, angular_unit, assemble_net_mass, assemble_net_stiffness,
                  constraint_operator, radial_unit)
from .shell import (ShellBasis, ShellParams, assemble_shell_mass, assemble_shell_stiffness,
                    l2_gram)

AXIS = np.array([0.0, 0.0, 1.0])


def trace_operator(basis: ShellBasis, top: NetTopology) -> sp.csr_matrix:
    """Sparse map from shell coefficients to Cartesian displacement at every net node.

    The azimuthal shell component is read as an angle increment, so its
    linearised arc displacement is ``R * eta_theta``.
    """
    n = top.n_nodes
    if n == 0:
        return sp.csr_matrix((0, basis.ndof))
    z, th = top.node_z, top.node_theta
    Ez = basis.point_operator(z, th, "z")
    Er = basis.point_operator(z, th, "r")
    Et = basis.point_operator(z, th, "theta")
    er, et = radial_unit(th), angular_unit(th)
    rows = []
    for c in range(3):
        rows.append(sp.diags(np.full(n, AXIS[c])) @ Ez + sp.diags(er[:, c]) @ Er
                    + basis.R * sp.diags(et[:, c]) @ Et)
    # interleave so that row 3*i + c is component c of node i
    T = sp.vstack(rows, format="csr")
    perm = (np.arange(3)[None, :] * n + np.arange(n)[:, None]).ravel()
    return T[perm]


def interface_operator(basis: ShellBasis, z_pre, theta_pre, theta_nodes, radius) -> sp.csr_matrix:
    """Map shell velocity coefficients to Cartesian wall velocity at the fluid wall nodes.

    ``z_pre, theta_pre`` are the material points behind each wall node, which sits
    at angle ``theta_nodes`` and radius ``radius``.  Rows are ordered node-major
    with (x, y, z) components.
    """
    z_pre = np.asarray(z_pre, float).ravel()
    theta_pre = np.asarray(theta_pre, float).ravel()
    th = np.asarray(theta_nodes, float).ravel()
    rad = np.asarray(radius, float).ravel()
    n = z_pre.size
    Ez = basis.point_operator(z_pre, theta_pre, "z")
    Er = basis.point_operator(z_pre, theta_pre, "r")
    Et = basis.point_operator(z_pre, theta_pre, "theta")
    er, et = radial_unit(th), angular_unit(th)
    rows = []
    for c in range(3):
        rows.append(sp.diags(np.full(n, AXIS[c])) @ Ez + sp.diags(er[:, c]) @ Er
                    + sp.diags(rad * et[:, c]) @ Et)
    E = sp.vstack(rows, format="csr")
    perm = (np.arange(3)[None, :] * n + np.arange(n)[:, None]).ravel()
    return E[perm]


def shell_to_interface(basis: ShellBasis, coeffs, z_pre, theta_pre, theta_nodes, radius) -> np.ndarray:
    """Cartesian wall velocity (n_nodes, 3) from shell velocity coefficients."""
    E = interface_operator(basis, z_pre, theta_pre, theta_nodes, radius)
    return (E @ np.asarray(coeffs, float)).reshape(-1, 3)


@dataclass
class StructureState:
    """Shell coefficients and net nodal vectors at one time level."""

    eta: np.ndarray
    v: np.ndarray
    w: np.ndarray
    z: np.ndarray
    k: np.ndarray
    d: np.ndarray
    p: np.ndarray

    def copy(self) -> "StructureState":
        return StructureState(*(np.array(getattr(self, f)) for f in
                                ("eta", "v", "w", "z", "k", "d", "p")))


@dataclass
class StructureModel:
    """All time-independent structure matrices."""

    basis: ShellBasis
    params: ShellParams
    top: NetTopology
    K_sh: sp.csr_matrix = field(init=False)
    M_sh: sp.csr_matrix = field(init=False)
    G_sh: sp.csr_matrix = field(init=False)
    K_net: sp.csr_matrix = field(init=False)
    M_A: sp.csr_matrix = field(init=False)
    M_M: sp.csr_matrix = field(init=False)
    B_d: sp.csr_matrix = field(init=False)
    B_w: sp.csr_matrix = field(init=False)
    T: sp.csr_matrix = field(init=False)

    def __post_init__(self):
        self.K_sh = assemble_shell_stiffness(self.basis, self.params)
        self.M_sh = assemble_shell_mass(self.basis, self.params)
        self.G_sh = l2_gram(self.basis, self.params.R)
        self.K_net = assemble_net_stiffness(self.top)
        self.M_A, self.M_M = assemble_net_mass(self.top)
        self.B_d, self.B_w = constraint_operator(self.top)
        self.T = trace_operator(self.basis, self.top)
        self._factor_cache: dict[float, object] = {}

    @property
    def n_eta(self) -> int:
        return self.basis.ndof

    @property
    def n_w(self) -> int:
        return 3 * self.top.n_nodes

    @property
    def n_p(self) -> int:
        return 3 * self.top.n_elements

    def zero_state(self) -> StructureState:
        return StructureState(np.zeros(self.n_eta), np.zeros(self.n_eta), np.zeros(self.n_w),
                              np.zeros(self.n_w), np.zeros(self.n_w), np.zeros(self.n_w),
                              np.zeros(self.n_p))

    def constraint_residual(self, eta, w) -> np.ndarray:
        if self.n_p == 0:
            return np.zeros(0)
        return self.B_d @ (self.T @ eta) + self.B_w @ w

    def energies(self, s: StructureState) -> dict[str, float]:
        """Doubled energies (no factor one half), matching the discrete ledger."""
        return {
            "shell_kinetic": float(s.v @ (self.M_sh @ s.v)),
            "shell_elastic": float(s.eta @ (self.K_sh @ s.eta)),
            "net_kinetic_d": float(s.k @ (self.M_A @ s.k)) if self.n_w else 0.0,
            "net_kinetic_w": float(s.z @ (self.M_M @ s.z)) if self.n_w else 0.0,
            "net_elastic": float(s.w @ (self.K_net @ s.w)) if self.n_w else 0.0,
        }

    def total_energy(self, s: StructureState) -> float:
        return float(sum(self.energies(s).values()))


@dataclass
class StructureSystem:
    """Assembled saddle system for one backward-Euler structure substep."""

    model: StructureModel
    dt: float
    matrix: sp.csc_matrix
    rhs: np.ndarray
    previous: StructureState


def _saddle_matrix(model: StructureModel, dt: float) -> sp.csc_matrix:
    inv2 = 1.0 / dt ** 2
    T = model.T
    A11 = inv2 * model.M_sh + model.K_sh
    if model.n_w:
        A11 = A11 + inv2 * (T.T @ model.M_A @ T)
        A22 = inv2 * model.M_M + model.K_net
        C1 = model.B_d @ T
        C2 = model.B_w
        blocks = [[A11, None, C1.T], [None, A22, C2.T], [C1, C2, None]]
        return sp.bmat(blocks, format="csc")
    return sp.csc_matrix(A11)


def build_structure_system(model: StructureModel, dt: float, prev: StructureState,
                           load_eta=None, load_w=None, tol: float = 1e-10) -> StructureSystem:
    """Matrix and right-hand side of the structure substep from time level n."""
    if not dt > 0:
        raise StateError("time step must be positive")
    if model.n_w:
        Td = model.T @ prev.eta
        if np.linalg.norm(prev.d - Td) > tol * (1.0 + np.linalg.norm(Td)):
            raise StateError("net displacement differs from the shell trace")
    inv2 = 1.0 / dt ** 2
    b1 = inv2 * (model.M_sh @ (prev.eta + dt * prev.v))
    if load_eta is not None:
        b1 = b1 + load_eta
    parts = [b1]
    if model.n_w:
        parts[0] = b1 + inv2 * (model.T.T @ (model.M_A @ (model.T @ prev.eta + dt * prev.k)))
        b2 = inv2 * (model.M_M @ (prev.w + dt * prev.z))
        if load_w is not None:
            b2 = b2 + load_w
        parts += [b2, np.zeros(model.n_p)]
    key = float(dt)
    if key not in model._factor_cache:
        model._factor_cache.clear()
        model._factor_cache[key] = _saddle_matrix(model, dt)
    return StructureSystem(model, dt, model._factor_cache[key], np.concatenate(parts), prev)


def _factorize(model: StructureModel, dt: float, A: sp.csc_matrix):
    cache = model.__dict__.setdefault("_lu_cache", {})
    key = float(dt)
    if key not in cache:
        cache.clear()
        try:
            cache[key] = spla.splu(A)
        except RuntimeError:
            cache[key] = None
    return cache[key]


def _minres_fallback(A: sp.csc_matrix, b: np.ndarray, n_primal: int) -> np.ndarray:
    diag = np.abs(A.diagonal())
    diag[n_primal:] = 1.0
    diag[diag == 0] = 1.0
    P = sp.diags(1.0 / diag)
    x, info = spla.minres(A, b, M=P, rtol=1e-13, maxiter=20 * A.shape[0])
    if info != 0:
        raise SolverError(f"structure saddle solve did not converge (info={info})")
    return x


def solve_structure_substep(sys: StructureSystem) -> StructureState:
    """Solve the saddle system and recover velocities by difference quotients."""
    model, dt, prev = sys.model, sys.dt, sys.previous
    lu = _factorize(model, dt, sys.matrix)
    if lu is not None:
        x = lu.solve(sys.rhs)
    else:
        warnings.warn("sparse LU failed on the structure system; using MINRES")
        x = _minres_fallback(sys.matrix, sys.rhs, model.n_eta + model.n_w)
    if not np.all(np.isfinite(x)):
        raise SolverError("structure solve returned non-finite values")
    n1, n2 = model.n_eta, model.n_w
    eta = x[:n1]
    w = x[n1:n1 + n2] if n2 else np.zeros(0)
    p = x[n1 + n2:] if n2 else np.zeros(0)
    v = (eta - prev.eta) / dt
    d = model.T @ eta if n2 else np.zeros(0)
    k = (d - prev.d) / dt if n2 else np.zeros(0)
    zr = (w - prev.w) / dt if n2 else np.zeros(0)
    return StructureState(eta, v, w, zr, k, d, p)


def structure_dissipation(model: StructureModel, prev: StructureState, new: StructureState) -> dict[str, float]:
    """Nonnegative numerical dissipation terms produced by one backward-Euler substep."""
    dv = new.v - prev.v
    de = new.eta - prev.eta
    out = {
        "shell": float(dv @ (model.M_sh @ dv)),
        "shell_elastic": float(de @ (model.K_sh @ de)),
        "net_k": 0.0, "net_z": 0.0, "net_elastic": 0.0,
    }
    if model.n_w:
        dk, dz, dw = new.k - prev.k, new.z - prev.z, new.w - prev.w
        out["net_k"] = float(dk @ (model.M_A @ dk))
        out["net_z"] = float(dz @ (model.M_M @ dz))
        out["net_elastic"] = float(dw @ (model.K_net @ dw))
    return out


def structure_energy_residual(model: StructureModel, prev: StructureState, new: StructureState) -> float:
    """E^n - E^{n+1/2} - (sum of dissipation terms); zero for an exact solve."""
    diss = structure_dissipation(model, prev, new)
    return model.total_energy(prev) - model.total_energy(new) - sum(diss.values())
