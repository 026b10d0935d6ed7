"""Incompressible viscous flow on the moving cylinder, one implicit step at a time.

The grid is structured in computational coordinates (z, rho, theta) with
physical radius ``rho * (R + eta_tilde(z, theta))``.  Radial rings sit at
``rho_j = (j + 1/2) / (N_rho - 1/2)`` so the outermost ring lies on the wall
and no node lies on the axis; the innermost ring talks to itself across the
axis through cells that join angle theta to theta + pi.

Difference stencils come from a trilinear variational form with the exact
mapped geometry (2x2x2 Gauss points per cell, split at the axis), and a
nodal-quadrature (lumped) mass.  That choice makes the discrete energy
balance an algebraic identity:

* the lumped node weights scale exactly with ``(R + eta_tilde)**2``, so the
  slab Jacobian cancels node by node;
* the convection block is assembled antisymmetric;
* viscous and pressure-stabilisation blocks are symmetric positive
  semidefinite.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import PchipInterpolator

from .errors import ConfigurationError, DomainError, SolverError, SubgraphViolation
from .geometry import AleSlabMap, BoundaryField, CylinderRef, ale_domain_velocity, ale_map

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class FluidParams:
    rho_F: float
    mu_F: float
    convection: bool = True
    c_stab: float = 0.1

    def __post_init__(self):
        if not self.rho_F > 0:
            raise ConfigurationError("fluid density rho_F must be positive")
        if not self.mu_F > 0:
            raise ConfigurationError("fluid viscosity mu_F must be positive")
        if not self.c_stab > 0:
            raise ConfigurationError("stabilisation coefficient c_stab must be positive")


# ---------------------------------------------------------------------------
# reference element

_CORNERS = np.array([(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)], float)


def _shape(xi: np.ndarray):
    """Trilinear shape values (nq, 8) and reference gradients (nq, 8, 3) on [0,1]^3."""
    xi = np.atleast_2d(xi)
    f = np.where(_CORNERS[None, :, :] == 1, xi[:, None, :], 1 - xi[:, None, :])
    df = np.where(_CORNERS == 1, 1.0, -1.0)[None, :, :]
    N = f.prod(axis=2)
    dN = np.empty(f.shape)
    dN[..., 0] = df[..., 0] * f[..., 1] * f[..., 2]
    dN[..., 1] = f[..., 0] * df[..., 1] * f[..., 2]
    dN[..., 2] = f[..., 0] * f[..., 1] * df[..., 2]
    return N, dN


def _gauss01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1), 0.5 * w


def _tensor_rule(zr, rr, tr):
    (zx, zw), (rx, rw), (tx, tw) = zr, rr, tr
    Z, Rr, T = np.meshgrid(zx, rx, tx, indexing="ij")
    W = np.einsum("i,j,k->ijk", zw, rw, tw)
    return np.column_stack([Z.ravel(), Rr.ravel(), T.ravel()]), W.ravel()


def _split_rule(n: int):
    x, w = _gauss01(n)
    return np.concatenate([0.5 * x, 0.5 + 0.5 * x]), np.concatenate([0.5 * w, 0.5 * w])


REGULAR_RULE = _tensor_rule(_gauss01(2), _gauss01(2), _gauss01(2))
AXIS_RULE = _tensor_rule(_gauss01(2), _split_rule(2), _gauss01(2))


@dataclass
class _CellGroup:
    nodes: np.ndarray      # (nc, 8) global node ids
    z0: np.ndarray
    hz: np.ndarray
    r0: np.ndarray         # signed rho at local coordinate 0
    hr: float
    t0: np.ndarray
    ht: float
    rule: tuple


class FluidGrid:
    """Boundary-fitted structured grid of one fluid domain."""

    def __init__(self, ref: CylinderRef, wall: BoundaryField):
        if ref.N_theta % 2:
            raise ConfigurationError("N_theta must be even so the axis cells pair opposite angles")
        if wall.values.shape != (ref.N_z + 1, ref.N_theta):
            raise ConfigurationError("wall field does not live on the fluid (z, theta) grid")
        if wall.min_radius() <= 0:
            raise SubgraphViolation("wall reached the axis")
        self.ref = ref
        self.wall = wall
        self.Nz, self.Nr, self.Nt = ref.N_z + 1, ref.N_rho, ref.N_theta
        self.z = ref.z
        self.theta = ref.theta
        self.drho = 1.0 / (self.Nr - 0.5)
        self.rho = (np.arange(self.Nr) + 0.5) * self.drho
        self.F = wall.radius
        self.n_nodes = self.Nz * self.Nr * self.Nt

    # -- indexing --------------------------------------------------------
    def node(self, i, j, k):
        return (np.asarray(i) * self.Nr + np.asarray(j)) * self.Nt + np.mod(k, self.Nt)

    @cached_property
    def ijk(self):
        I, J, K = np.meshgrid(np.arange(self.Nz), np.arange(self.Nr), np.arange(self.Nt), indexing="ij")
        return I.ravel(), J.ravel(), K.ravel()

    @cached_property
    def wall_nodes(self) -> np.ndarray:
        I, K = np.meshgrid(np.arange(self.Nz), np.arange(self.Nt), indexing="ij")
        return self.node(I.ravel(), self.Nr - 1, K.ravel())

    @cached_property
    def node_F(self) -> np.ndarray:
        I, J, K = self.ijk
        return self.F[I, K]

    @cached_property
    def cylindrical(self) -> np.ndarray:
        """Node coordinates (z, r, theta)."""
        I, J, K = self.ijk
        return np.column_stack([self.z[I], self.rho[J] * self.F[I, K], self.theta[K]])

    @cached_property
    def points(self) -> np.ndarray:
        c = self.cylindrical
        return np.column_stack([c[:, 1] * np.cos(c[:, 2]), c[:, 1] * np.sin(c[:, 2]), c[:, 0]])

    # -- cells -----------------------------------------------------------
    @cached_property
    def cell_groups(self) -> list[_CellGroup]:
        Nz, Nr, Nt = self.Nz, self.Nr, self.Nt
        dth = TWO_PI / Nt
        groups = []
        if Nr > 1:
            I, J, K = np.meshgrid(np.arange(Nz - 1), np.arange(Nr - 1), np.arange(Nt), indexing="ij")
            I, J, K = I.ravel(), J.ravel(), K.ravel()
            nodes = np.column_stack([self.node(I + a, J + b, K + c) for a, b, c in _CORNERS.astype(int)])
            groups.append(_CellGroup(nodes, self.z[I], self.z[I + 1] - self.z[I], self.rho[J],
                                     self.drho, self.theta[K], dth, REGULAR_RULE))
        I, K = np.meshgrid(np.arange(Nz - 1), np.arange(Nt // 2), indexing="ij")
        I, K = I.ravel(), K.ravel()
        cols = []
        for a, b, c in _CORNERS.astype(int):
            kk = K + c + (Nt // 2 if b == 0 else 0)
            cols.append(self.node(I + a, 0, kk))
        groups.append(_CellGroup(np.column_stack(cols), self.z[I], self.z[I + 1] - self.z[I],
                                 np.full(I.size, -self.rho[0]), 2 * self.rho[0],
                                 self.theta[K], dth, AXIS_RULE))
        return groups

    def _geometry(self, g: _CellGroup, xi: np.ndarray):
        """Shape data and Jacobians at reference points ``xi`` for every cell of group g."""
        N, dN = _shape(xi)
        Fc = self.node_F[g.nodes]                       # (nc, 8)
        Fq = Fc @ N.T                                   # (nc, nq)
        dF = np.einsum("ca,qam->cqm", Fc, dN)           # derivative wrt local coords
        rho = g.r0[:, None] + xi[None, :, 1] * g.hr
        th = g.t0[:, None] + xi[None, :, 2] * g.ht
        cos, sin = np.cos(th), np.sin(th)
        J = np.zeros(Fq.shape + (3, 3))
        J[..., 0, 0] = rho * dF[..., 0] * cos
        J[..., 1, 0] = rho * dF[..., 0] * sin
        J[..., 2, 0] = g.hz[:, None]
        radial = g.hr * Fq + rho * dF[..., 1]
        J[..., 0, 1] = radial * cos
        J[..., 1, 1] = radial * sin
        J[..., 0, 2] = rho * dF[..., 2] * cos - rho * Fq * g.ht * sin
        J[..., 1, 2] = rho * dF[..., 2] * sin + rho * Fq * g.ht * cos
        det = np.linalg.det(J)
        Jinv = np.linalg.inv(J)
        grad = np.einsum("qam,cqmk->cqak", dN, Jinv)    # physical gradients (nc, nq, 8, 3)
        return N, grad, det, J

    @cached_property
    def _quad(self):
        out = []
        for g in self.cell_groups:
            xi, w = g.rule
            N, grad, det, _ = self._geometry(g, xi)
            out.append((g, N, grad, np.abs(det) * w[None, :]))
        return out

    # -- lumped weights ----------------------------------------------------
    @cached_property
    def reference_weights(self) -> np.ndarray:
        """Geometry-free node weights: integral of N_a |rho| over computational cells."""
        wts = np.zeros(self.n_nodes)
        for g in self.cell_groups:
            xi, w = g.rule
            N, _ = _shape(xi)
            rho = g.r0[:, None] + xi[None, :, 1] * g.hr
            vol = np.abs(rho) * (g.hz[:, None] * g.hr * g.ht) * w[None, :]
            np.add.at(wts, g.nodes, np.einsum("cq,qa->ca", vol, N))
        return wts

    @cached_property
    def mass_weights(self) -> np.ndarray:
        """Lumped node volumes, exactly proportional to (R + eta_tilde)^2 along each radial line."""
        return self.reference_weights * self.node_F ** 2

    def volume(self) -> float:
        return float(sum(np.sum(dw) for _, _, _, dw in self._quad))

    # -- operators -----------------------------------------------------------
    def _scatter(self, local: np.ndarray, nodes: np.ndarray, ncomp: int) -> sp.csr_matrix:
        """Assemble (nc, 8*ncomp, 8*ncomp) blocks, node-major component ordering."""
        nc = nodes.shape[0]
        dof = (nodes[:, :, None] * ncomp + np.arange(ncomp)[None, None, :]).reshape(nc, -1)
        rows = np.repeat(dof[:, :, None], dof.shape[1], axis=2)
        cols = np.repeat(dof[:, None, :], dof.shape[1], axis=1)
        n = self.n_nodes * ncomp
        return sp.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()

    @cached_property
    def viscous_matrix(self) -> sp.csr_matrix:
        """Matrix of the form (u, v) -> integral of D(u):D(v) (multiply by 2 mu)."""
        total = None
        for g, N, grad, dw in self._quad:
            gg = np.einsum("cq,cqak,cqbk->cab", dw, grad, grad, optimize=True)
            cross = np.einsum("cq,cqaj,cqbi->caibj", dw, grad, grad, optimize=True)
            local = 0.5 * (np.einsum("cab,ij->caibj", gg, np.eye(3)) + cross)
            nc = local.shape[0]
            M = self._scatter(local.reshape(nc, 24, 24), g.nodes, 3)
            total = M if total is None else total + M
        return (0.5 * (total + total.T)).tocsr()

    @cached_property
    def gradient_gram(self) -> sp.csr_matrix:
        """Matrix of (u, v) -> integral of grad u : grad v, for Korn ratios."""
        total = None
        for g, N, grad, dw in self._quad:
            gg = np.einsum("cq,cqak,cqbk->cab", dw, grad, grad)
            local = np.einsum("cab,ij->caibj", gg, np.eye(3))
            M = self._scatter(local.reshape(local.shape[0], 24, 24), g.nodes, 3)
            total = M if total is None else total + M
        return total.tocsr()

    @cached_property
    def divergence_matrix(self) -> sp.csr_matrix:
        """B with (B u)_q = - integral N_q div u (rows: pressure nodes)."""
        rows, cols, vals = [], [], []
        for g, N, grad, dw in self._quad:
            local = -np.einsum("cq,qp,cqak->cpak", dw, N, grad)       # (nc, 8, 8, 3)
            nc = local.shape[0]
            r = np.repeat(g.nodes[:, :, None], 24, axis=2)
            udof = (g.nodes[:, :, None] * 3 + np.arange(3)).reshape(nc, 24)
            c = np.repeat(udof[:, None, :], 8, axis=1)
            rows.append(r.ravel()); cols.append(c.ravel()); vals.append(local.reshape(nc, 8, 24).ravel())
        return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.n_nodes, 3 * self.n_nodes)).tocsr()

    def stabilization_matrix(self, c_stab: float) -> sp.csr_matrix:
        """Pressure-gradient penalty with the local physical radial spacing as length scale."""
        total = None
        for g, N, grad, dw in self._quad:
            h = g.hr * self.node_F[g.nodes].mean(axis=1)
            local = c_stab * h[:, None, None] ** 2 * np.einsum("cq,cqak,cqbk->cab", dw, grad, grad)
            M = self._scatter(local, g.nodes, 1)
            total = M if total is None else total + M
        return (0.5 * (total + total.T)).tocsr()

    def convection_matrix(self, beta: np.ndarray, rho_F: float) -> sp.csr_matrix:
        """Antisymmetric convection block for the advecting nodal field ``beta`` (n_nodes, 3)."""
        total = None
        for g, N, grad, dw in self._quad:
            bq = np.einsum("qa,cak->cqk", N, beta[g.nodes])
            adv = np.einsum("cqk,cqbk->cqb", bq, grad)                # beta . grad N_b
            K = np.einsum("cq,qa,cqb->cab", dw, N, adv)
            local = 0.5 * rho_F * (K - np.transpose(K, (0, 2, 1)))
            M = self._scatter(local, g.nodes, 1)
            total = M if total is None else total + M
        C = sp.kron(total, sp.identity(3), format="csr")
        return (0.5 * (C - C.T)).tocsr()

    def end_flux_vectors(self) -> tuple[np.ndarray, np.ndarray]:
        """Vectors f with f @ u_z equal to the flux integrals over inlet (z=0) and outlet (z=L)."""
        x, w = _gauss01(2)
        out = []
        for face in (0.0, 1.0):
            vec = np.zeros(self.n_nodes)
            for g in self.cell_groups:
                sel = np.isclose(g.z0 + face * g.hz, self.z[0] if face == 0 else self.z[-1])
                if not np.any(sel):
                    continue
                sub = _CellGroup(g.nodes[sel], g.z0[sel], g.hz[sel], g.r0[sel], g.hr, g.t0[sel], g.ht, g.rule)
                rr = _split_rule(2) if g.rule is AXIS_RULE else _gauss01(2)
                R_, T_ = np.meshgrid(rr[0], x, indexing="ij")
                xi = np.column_stack([np.full(R_.size, face), R_.ravel(), T_.ravel()])
                wq = np.outer(rr[1], w).ravel()
                N, grad, det, J = self._geometry(sub, xi)
                area = np.abs(J[..., 0, 1] * J[..., 1, 2] - J[..., 1, 1] * J[..., 0, 2]) * wq[None, :]
                np.add.at(vec, sub.nodes, np.einsum("cq,qa->ca", area, N))
            out.append(vec)
        return out[0], out[1]

    # -- post-processing ---------------------------------------------------
    def quadrature_gradients(self, U: np.ndarray):
        """Velocity gradient tensors (nq_total, 3, 3) and weights at all Gauss points."""
        U = np.asarray(U, float).reshape(-1, 3)
        grads, wts = [], []
        for g, N, grad, dw in self._quad:
            G = np.einsum("cak,caqj->cqkj", U[g.nodes], np.transpose(grad, (0, 2, 1, 3)))
            grads.append(G.reshape(-1, 3, 3)); wts.append(dw.ravel())
        return np.concatenate(grads), np.concatenate(wts)


def symmetrized_gradient(grid: FluidGrid, U: np.ndarray) -> np.ndarray:
    """Nodal symmetric velocity gradient, a weighted average of exact cell values."""
    U = np.asarray(U, float).reshape(-1, 3)
    acc = np.zeros((grid.n_nodes, 3, 3))
    wsum = np.zeros(grid.n_nodes)
    for g, N, grad, dw in grid._quad:
        G = np.einsum("cak,cqaj->cqkj", U[g.nodes], grad)
        D = 0.5 * (G + np.swapaxes(G, -1, -2))
        wN = dw[:, :, None] * N[None, :, :]                            # (nc, nq, 8)
        np.add.at(acc, g.nodes, np.einsum("cqa,cqkj->cakj", wN, D))
        np.add.at(wsum, g.nodes, wN.sum(axis=1))
    return acc / wsum[:, None, None]


def viscous_dissipation(grid: FluidGrid, U: np.ndarray, mu_F: float) -> float:
    """2 mu times the integral of |D(u)|^2 over the grid's domain."""
    U = np.asarray(U, float).ravel()
    return float(2 * mu_F * U @ (grid.viscous_matrix @ U))


# ---------------------------------------------------------------------------
# velocity transfer and boundary data

def transfer_velocity(U_old: np.ndarray, old: FluidGrid, new: FluidGrid, slab: AleSlabMap) -> np.ndarray:
    """Compose the old velocity with the slab map, by monotone cubic interpolation along radii."""
    U_old = np.asarray(U_old, float).reshape(old.Nz, old.Nr, old.Nt, 3)
    mapped = ale_map(slab, new.cylindrical)
    rho_q = (mapped[:, 1] / old.node_F).reshape(new.Nz, new.Nr, new.Nt)
    # one monotone cubic per radial line, all lines at once; then evaluate the
    # local cubic of each query's interval
    lines = np.moveaxis(U_old, 1, 0).reshape(old.Nr, -1, 3)            # (Nr, Nz*Nt, 3)
    f = PchipInterpolator(old.rho, lines, axis=0, extrapolate=True)
    q = np.moveaxis(rho_q, 1, 0).reshape(new.Nr, -1)                    # (Nr, Nz*Nt)
    idx = np.clip(np.searchsorted(f.x, q, side="right") - 1, 0, f.x.size - 2)
    dx = (q - f.x[idx])[..., None]
    line = np.broadcast_to(np.arange(q.shape[1]), q.shape)
    c = f.c                                                            # (4, Nr-1, Nz*Nt, 3)
    vals = ((c[0][idx, line] * dx + c[1][idx, line]) * dx + c[2][idx, line]) * dx + c[3][idx, line]
    out = np.moveaxis(vals.reshape(new.Nr, new.Nz, new.Nt, 3), 0, 1)
    if not np.all(np.isfinite(out)):
        raise DomainError("velocity transfer produced non-finite values")
    return out.reshape(-1, 3)


def slab_average(func, t0: float, t1: float, n: int = 8) -> float:
    """Time average of ``func`` over [t0, t1] by Gauss-Legendre quadrature."""
    x, w = np.polynomial.legendre.leggauss(n)
    ts = 0.5 * (t0 + t1) + 0.5 * (t1 - t0) * x
    return float(0.5 * np.sum(w * np.array([func(t) for t in ts])))


# ---------------------------------------------------------------------------
# the linear system

@dataclass
class FluidCoupling:
    """Shell data entering the fluid step: wall-trace map, shell mass and old shell velocity."""

    E: sp.csr_matrix
    M_sh: sp.csr_matrix
    v_half: np.ndarray


@dataclass
class FluidSystem:
    grid: FluidGrid
    params: FluidParams
    dt: float | None
    matrix: sp.csc_matrix
    rhs: np.ndarray
    P: sp.csr_matrix
    n_free: int
    n_shell: int
    u_hat: np.ndarray
    delta_eta: np.ndarray
    K_visc: sp.csr_matrix
    S_stab: sp.csr_matrix
    f_in: np.ndarray
    f_out: np.ndarray
    pressures: tuple[float, float]
    coupling: FluidCoupling | None
    convection: sp.csr_matrix | None = None


def velocity_parametrization(grid: FluidGrid, E: sp.spmatrix | None):
    """Sparse P with U = P X, X = (free nodal components, shell coefficients).

    Inlet/outlet nodes keep only their axial component; wall nodes are slaved
    to the shell velocity (or pinned when there is no shell).
    """
    I, J, K = grid.ijk
    on_wall = J == grid.Nr - 1
    on_end = (I == 0) | (I == grid.Nz - 1)
    free = np.ones((grid.n_nodes, 3), bool)
    free[on_end, 0] = False
    free[on_end, 1] = False
    free[on_wall, :] = False
    idx = np.flatnonzero(free.ravel())
    n_free = idx.size
    Pf = sp.coo_matrix((np.ones(n_free), (idx, np.arange(n_free))), shape=(3 * grid.n_nodes, n_free))
    if E is None:
        return Pf.tocsr(), n_free, 0
    wall_dofs = (grid.wall_nodes[:, None] * 3 + np.arange(3)).ravel()
    Ec = E.tocoo()
    Pw = sp.coo_matrix((Ec.data, (wall_dofs[Ec.row], Ec.col)), shape=(3 * grid.n_nodes, E.shape[1]))
    return sp.hstack([Pf, Pw], format="csr"), n_free, E.shape[1]


def build_fluid_system(grid: FluidGrid, params: FluidParams, dt: float | None,
                       u_hat: np.ndarray | None = None, delta_eta: np.ndarray | None = None,
                       domain_velocity: np.ndarray | None = None,
                       pressures: tuple[float, float] = (0.0, 0.0),
                       coupling: FluidCoupling | None = None) -> FluidSystem:
    """Assemble the fluid substep on ``grid``; ``dt=None`` gives the steady Stokes problem."""
    n = grid.n_nodes
    u_hat = np.zeros((n, 3)) if u_hat is None else np.asarray(u_hat, float).reshape(n, 3)
    dEta = np.zeros(n) if delta_eta is None else np.asarray(delta_eta, float).ravel()
    if not np.all(np.isfinite(u_hat)):
        raise DomainError("transferred velocity contains non-finite values")
    K = 2 * params.mu_F * grid.viscous_matrix
    A = K
    rhs_u = np.zeros(3 * n)
    C = None
    if dt is not None:
        if not dt > 0:
            raise ConfigurationError("time step must be positive")
        W = np.repeat(grid.mass_weights, 3)
        A = A + sp.diags(params.rho_F / dt * W)
        rhs_u += params.rho_F / dt * W * ((1.0 - np.repeat(dEta, 3)) * u_hat.ravel())
        if params.convection:
            s = np.zeros((n, 3)) if domain_velocity is None else np.asarray(domain_velocity).reshape(n, 3)
            C = grid.convection_matrix(u_hat - s, params.rho_F)
            A = A + C
    f_in, f_out = grid.end_flux_vectors()
    P_in, P_out = pressures
    rhs_u[2::3] += P_in * f_in - P_out * f_out
    Pm, n_free, n_shell = velocity_parametrization(grid, None if coupling is None else coupling.E)
    Ared = (Pm.T @ A @ Pm).tocsr()
    rhs_x = Pm.T @ rhs_u
    if coupling is not None and dt is not None:
        Ms = coupling.M_sh / dt
        pad = sp.bmat([[sp.csr_matrix((n_free, n_free)), None], [None, Ms]], format="csr")
        Ared = Ared + pad
        rhs_x[n_free:] += Ms @ coupling.v_half
    B = grid.divergence_matrix @ Pm
    S = grid.stabilization_matrix(params.c_stab)
    M = sp.bmat([[Ared, B.T], [B, -S]], format="csc")
    rhs = np.concatenate([rhs_x, np.zeros(n)])
    return FluidSystem(grid, params, dt, M, rhs, Pm, n_free, n_shell, u_hat, dEta, K, S,
                       f_in, f_out, (P_in, P_out), coupling, C)


@dataclass
class FluidSolution:
    U: np.ndarray          # (n_nodes, 3) Cartesian nodal velocity
    p: np.ndarray          # nodal pressure
    V: np.ndarray | None   # shell velocity coefficients read off the wall
    residual: float


def geometric_source(system: FluidSystem) -> np.ndarray:
    """Nodal load of the domain-divergence term, (rho_F/dt) * W * delta_eta * u_hat, shape (n, 3)."""
    if system.dt is None:
        return np.zeros_like(system.u_hat)
    W = system.grid.mass_weights
    return system.params.rho_F / system.dt * (W * system.delta_eta)[:, None] * system.u_hat


def _unpack(system: FluidSystem, x: np.ndarray, residual: float) -> FluidSolution:
    if not np.all(np.isfinite(x)):
        raise SolverError("fluid solve returned non-finite values")
    nx = system.P.shape[1]
    X, p = x[:nx], x[nx:]
    U = (system.P @ X).reshape(-1, 3)
    V = X[system.n_free:] if system.n_shell else None
    return FluidSolution(U, p, V, residual)


def _relres(A, x, b) -> float:
    return float(np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1e-300))


class FluidSolver:
    """Fluid linear solves that reuse a previous factorisation as a GMRES preconditioner.

    The moving geometry and the convection field change a little every step,
    so an LU of an earlier matrix is an excellent preconditioner; it is
    refreshed whenever GMRES needs more than ``refactor_after`` iterations.
    """

    def __init__(self, rtol: float = 1e-13, refactor_after: int = 12, max_iter: int = 60):
        self.rtol = rtol
        self.refactor_after = refactor_after
        self.max_iter = max_iter
        self._lu = None
        self.factorizations = 0
        self.iterations: list[int] = []

    def _factor(self, A):
        try:
            self._lu = spla.splu(A.tocsc())
        except RuntimeError as exc:
            raise SolverError(f"fluid factorisation failed: {exc}") from exc
        self.factorizations += 1

    def solve(self, system: FluidSystem) -> FluidSolution:
        A, b = system.matrix, system.rhs
        if self._lu is None or self._lu.shape != A.shape:
            self._factor(A)
        count = [0]
        prec = spla.LinearOperator(A.shape, self._lu.solve)
        x, info = spla.gmres(A, b, x0=self._lu.solve(b), M=prec, rtol=self.rtol, atol=0.0,
                             restart=self.max_iter, maxiter=1,
                             callback=lambda _: count.__setitem__(0, count[0] + 1),
                             callback_type="pr_norm")
        self.iterations.append(count[0])
        if info != 0 or count[0] > self.refactor_after:
            self._factor(A)
            if info != 0:
                x = self._lu.solve(b)
        return _unpack(system, x, _relres(A, x, b))


def solve_fluid_substep(system: FluidSystem, solver: FluidSolver | None = None) -> FluidSolution:
    """One fluid solve; a sparse direct factorisation unless a reusable solver is given."""
    if solver is not None:
        return solver.solve(system)
    A, b = system.matrix, system.rhs
    try:
        x = spla.splu(A).solve(b)
    except RuntimeError:
        x, info = spla.gmres(A, b, rtol=1e-12, restart=200, maxiter=50)
        if info != 0:
            raise SolverError(f"fluid solve did not converge (info={info})")
    return _unpack(system, x, _relres(A, x, b))


def divergence_residual(system: FluidSystem, sol: FluidSolution) -> float:
    """Residual of the discrete continuity equation relative to the velocity size."""
    r = system.grid.divergence_matrix @ sol.U.ravel() - system.S_stab @ sol.p
    scale = np.linalg.norm(system.grid.divergence_matrix @ sol.U.ravel()) + np.linalg.norm(system.S_stab @ sol.p)
    return float(np.linalg.norm(r) / max(scale, 1e-300))


def fluid_energy_terms(system: FluidSystem, sol: FluidSolution) -> dict[str, float]:
    """Doubled-energy bookkeeping of one fluid step (all terms already multiplied by 2 dt)."""
    g, prm, dt = system.grid, system.params, system.dt
    W = g.mass_weights
    U = sol.U
    out = {"kinetic": float(prm.rho_F * np.sum(W[:, None] * U ** 2))}
    if dt is None:
        return out
    jump = U - (1.0 - system.delta_eta)[:, None] * system.u_hat
    out["numdiss"] = float(prm.rho_F * np.sum(W[:, None] * jump ** 2))
    out["viscous"] = float(dt * U.ravel() @ (system.K_visc @ U.ravel()))
    out["stabilization"] = float(2 * dt * sol.p @ (system.S_stab @ sol.p))
    P_in, P_out = system.pressures
    out["pressure_work"] = float(2 * dt * (P_in * system.f_in @ U[:, 2] - P_out * system.f_out @ U[:, 2]))
    if system.coupling is not None and sol.V is not None:
        M = system.coupling.M_sh
        dv = sol.V - system.coupling.v_half
        out["shell_kinetic"] = float(sol.V @ (M @ sol.V))
        out["shell_kinetic_old"] = float(system.coupling.v_half @ (M @ system.coupling.v_half))
        out["shell_jump"] = float(dv @ (M @ dv))
    return out


def calibrate_pressure_constant(grid: FluidGrid, mu_F: float, safety: float = 2.0) -> float:
    """Constant C with 2 dt |pressure work| <= D + C dt (P_in^2 + P_out^2) on this grid.

    Uses the largest admissible velocity space (wall free except at the clamped
    end circles), so the value bounds every shell-slaved wall velocity too.
    """
    I, J, K = grid.ijk
    on_end = (I == 0) | (I == grid.Nz - 1)
    corner = on_end & (J == grid.Nr - 1)
    free = np.ones((grid.n_nodes, 3), bool)
    free[on_end, :2] = False
    free[corner, :] = False
    idx = np.flatnonzero(free.ravel())
    Kv = (2 * mu_F * grid.viscous_matrix)[idx][:, idx].tocsc()
    f_in, f_out = grid.end_flux_vectors()
    vals = []
    lu = spla.splu(Kv)
    for f in (f_in, f_out):
        full = np.zeros(3 * grid.n_nodes)
        full[2::3] = f
        fr = full[idx]
        vals.append(float(fr @ lu.solve(fr)))
    return safety * 2.0 * max(vals)


def project_divergence_free(grid: FluidGrid, U: np.ndarray, c_stab: float = 0.1):
    """Weighted projection of a nodal field onto the discretely incompressible, wall-pinned space.

    Returns (U0, p0) with B U0 = S p0, zero wall velocity and no transverse
    velocity on the end sections.
    """
    n = grid.n_nodes
    Pm, _, _ = velocity_parametrization(grid, None)
    W = sp.diags(np.repeat(grid.mass_weights, 3))
    A = (Pm.T @ W @ Pm).tocsr()
    B = grid.divergence_matrix @ Pm
    S = grid.stabilization_matrix(c_stab)
    M = sp.bmat([[A, B.T], [B, -S]], format="csc")
    rhs = np.concatenate([Pm.T @ (W @ np.asarray(U, float).ravel()), np.zeros(n)])
    x = spla.splu(M).solve(rhs)
    nx = Pm.shape[1]
    return (Pm @ x[:nx]).reshape(-1, 3), x[nx:]


def poiseuille_profile(r, dP: float, R: float, mu_F: float, L: float):
    return dP * (R ** 2 - np.asarray(r) ** 2) / (4 * mu_F * L)


def write_vtk(path, grid: FluidGrid, U: np.ndarray, p: np.ndarray, title: str = "meshshell fluid"):
    """Legacy ASCII structured-grid file with velocity vectors and pressure scalars."""
    pts = grid.points
    U = np.asarray(U, float).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\nASCII\nDATASET STRUCTURED_GRID\n")
        fh.write(f"DIMENSIONS {grid.Nt} {grid.Nr} {grid.Nz}\n")
        fh.write(f"POINTS {grid.n_nodes} double\n")
        for x, y, z in pts:
            fh.write(f"{x:.10e} {y:.10e} {z:.10e}\n")
        fh.write(f"POINT_DATA {grid.n_nodes}\n")
        fh.write("VECTORS velocity double\n")
        for a, b, c in U:
            fh.write(f"{a:.10e} {b:.10e} {c:.10e}\n")
        fh.write("SCALARS pressure double 1\nLOOKUP_TABLE default\n")
        for v in np.asarray(p, float):
            fh.write(f"{v:.10e}\n")
