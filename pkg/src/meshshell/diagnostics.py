"""Assumption monitors and a weak-form consistency check along a computed trajectory."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigurationError
from .geometry import injectivity_determinant
from .shell import ShellBasis, ShellField


def _sample_grid(basis: ShellBasis, n: int | None = None):
    if n is None:
        zq, tq, _ = basis.quadrature
    else:
        zq = np.linspace(0.0, basis.L, n)
        tq = np.linspace(0.0, 2 * np.pi, 2 * n, endpoint=False)
    return np.meshgrid(zq, tq, indexing="ij")


def subgraph_monitor(basis: ShellBasis, eta, samples: int | None = None) -> tuple[float, float]:
    """(min Jacobian determinant of the in-surface map, min wall radius).

    Both must stay positive for the wall to remain a radial graph over the
    reference surface.
    """
    f = ShellField(basis, eta)
    Z, T = _sample_grid(basis, samples)
    dz = f.evaluate(Z, T, dz=1)
    dt = f.evaluate(Z, T, dth=1)
    det = injectivity_determinant(dz[0], dt[0], dz[2], dt[2])
    radius = basis.R + f.evaluate(Z, T)[1]
    return float(det.min()), float(radius.min())


def lipschitz_norm(basis: ShellBasis, eta, samples: int | None = None) -> float:
    """Max over the sample grid of |eta| and its first parameter derivatives."""
    f = ShellField(basis, eta)
    Z, T = _sample_grid(basis, samples)
    vals = [np.abs(f.evaluate(Z, T, dz=a, dth=b)).max() for a, b in ((0, 0), (1, 0), (0, 1))]
    return float(max(vals))


class LipschitzMonitor:
    """Running maximum of :func:`lipschitz_norm` over the displacements seen so far."""

    def __init__(self, basis: ShellBasis, cap: float = np.inf, samples: int | None = None):
        self.basis = basis
        self.cap = cap
        self.samples = samples
        self.value = 0.0

    def update(self, eta) -> float:
        self.value = max(self.value, lipschitz_norm(self.basis, eta, self.samples))
        return self.value

    @property
    def ok(self) -> bool:
        return self.value <= self.cap


def lipschitz_monitor(basis: ShellBasis, history: Iterable[np.ndarray], samples: int | None = None) -> float:
    """Largest W^{1,inf}-type norm over a displacement history."""
    m = LipschitzMonitor(basis, samples=samples)
    for eta in history:
        m.update(eta)
    return m.value


def korn_ratio(grid, U) -> float:
    """||grad u|| / ||D(u)|| in L2 on the grid's domain."""
    U = np.asarray(U, float).ravel()
    g2 = U @ (grid.gradient_gram @ U)
    d2 = U @ (grid.viscous_matrix @ U)
    if d2 <= 0:
        return float("inf") if g2 > 0 else 1.0
    return float(np.sqrt(g2 / d2))


# ---------------------------------------------------------------------------
# weak residual

def _bump(r, r0):
    s = np.clip(1.0 - (np.asarray(r) / r0) ** 2, 0.0, None)
    return s ** 3


@dataclass(frozen=True)
class TestMode:
    """A smooth spatial test field; fluid part returns Cartesian vectors at points (n, 3)."""

    name: str
    fluid: Callable[[np.ndarray], np.ndarray] | None = None
    net_rotation: Callable[[object], np.ndarray] | None = None


def default_test_modes(R: float, L: float, support: float = 0.8) -> list[TestMode]:
    """Four modes: axial plug, swirl, transverse curl and a rod twist.

    The fluid modes are divergence free, vanish near the wall and have no
    transverse component on the end sections, so they are admissible on every
    configuration that keeps the wall outside ``support * R``.
    """
    r0 = support * R

    def plug(x):
        r = np.hypot(x[:, 0], x[:, 1])
        out = np.zeros_like(x)
        out[:, 2] = _bump(r, r0)
        return out

    def swirl(x):
        r = np.hypot(x[:, 0], x[:, 1])
        f = _bump(r, r0) * np.sin(np.pi * x[:, 2] / L)
        return np.column_stack([-x[:, 1] * f, x[:, 0] * f, np.zeros(len(x))])

    def curl(x):
        # velocity = curl(phi e_z) with phi = b(r) * x * sin(pi z / L), written out
        X, Y, Zc = x[:, 0], x[:, 1], x[:, 2]
        r2 = X ** 2 + Y ** 2
        s = np.clip(r0 ** 2 - r2, 0.0, None)
        b = s ** 3
        db = -3.0 * s ** 2                      # d b / d(r^2)
        sz = np.sin(np.pi * Zc / L)
        phi_x = (b + X * db * 2 * X) * sz
        phi_y = X * db * 2 * Y * sz
        return np.column_stack([phi_y, -phi_x, np.zeros(len(x))]) / r0 ** 6

    def twist(top):
        out = np.zeros((top.n_nodes, 3))
        for ei, nodes in enumerate(top.edge_nodes):
            s = np.linspace(0.0, 1.0, len(nodes))
            for node, sv in zip(nodes, s):
                out[node] += np.sin(np.pi * sv) * top.tangent(ei, sv)
        return out.ravel()

    return [TestMode("axial_plug", fluid=plug), TestMode("swirl", fluid=swirl),
            TestMode("transverse_curl", fluid=curl), TestMode("net_twist", net_rotation=twist)]


def time_polynomials(T: float):
    """Two test time factors vanishing at the final time, with exact antiderivatives."""
    return [
        ("linear", lambda t: 1.0 - t / T, lambda t: t - t ** 2 / (2 * T)),
        ("quadratic", lambda t: (1.0 - t / T) ** 2, lambda t: -T / 3 * (1.0 - t / T) ** 3),
    ]


class WeakResidual:
    """Accumulates the weak-form defect of a trajectory for a fixed test family.

    The time derivative is moved onto the test function (so only the test's
    time factor is differentiated) and the spatial forms are the scheme's own
    operators on the current configuration; the defect then measures only the
    time-splitting consistency error.
    """

    def __init__(self, T: float, modes: list[TestMode], rho_F: float = 1.0, pressures=None,
                 include_interface: bool = True):
        if T <= 0:
            raise ConfigurationError("final time must be positive")
        self.T = T
        self.modes = modes
        self.rho_F = rho_F
        self.pressures = pressures
        self.include_interface = include_interface
        self.times = time_polynomials(T)
        self.names = [f"{m.name}*{tn}" for tn, _, _ in self.times for m in self.modes]
        n = len(self.names)
        self.value = np.zeros(n)
        self.scale = np.zeros(n)
        self._net = {}

    def _add(self, idx, *terms):
        for t in terms:
            self.value[idx] += t
            self.scale[idx] += abs(t)

    def initial(self, grid, U0, structure, model):
        for ti, (_, q, _) in enumerate(self.times):
            for mi, mode in enumerate(self.modes):
                idx = ti * len(self.modes) + mi
                if mode.fluid is not None and grid is not None and U0 is not None:
                    ups = mode.fluid(grid.points)
                    self._add(idx, -self.rho_F * q(0.0) * np.sum(grid.mass_weights[:, None] * U0 * ups))
                if mode.net_rotation is not None and model.n_w:
                    zeta = self._zeta(mode, model)
                    self._add(idx, -q(0.0) * zeta @ (model.M_M @ structure.z))

    def _zeta(self, mode, model):
        if mode.name not in self._net:
            self._net[mode.name] = mode.net_rotation(model.top)
        return self._net[mode.name]

    def observe(self, t0: float, t1: float, model, structure, fluid_system=None, fluid_solution=None):
        """Add the contribution of the slab [t0, t1]."""
        x, w = np.polynomial.legendre.leggauss(6)
        ts = 0.5 * (t0 + t1) + 0.5 * (t1 - t0) * x
        wq = 0.5 * (t1 - t0) * w
        for ti, (_, q, Q) in enumerate(self.times):
            dq = q(t1) - q(t0)
            Qn = Q(t1) - Q(t0)
            for mi, mode in enumerate(self.modes):
                idx = ti * len(self.modes) + mi
                if mode.fluid is not None and fluid_system is not None:
                    s, sol = fluid_system, fluid_solution
                    g = s.grid
                    ups = mode.fluid(g.points)
                    uv = ups.ravel()
                    U = sol.U.ravel()
                    A = s.K_visc if s.convection is None else s.K_visc + s.convection
                    mass = -s.params.rho_F * dq * np.sum(g.mass_weights[:, None] * sol.U * ups)
                    forms = Qn * (uv @ (A @ U) + sol.p @ (g.divergence_matrix @ uv))
                    if self.pressures is not None:
                        pin = np.array([self.pressures[0](t) for t in ts])
                        pout = np.array([self.pressures[1](t) for t in ts])
                        qt = np.array([q(t) for t in ts])
                        load = (np.sum(wq * qt * pin) * (s.f_in @ ups[:, 2])
                                - np.sum(wq * qt * pout) * (s.f_out @ ups[:, 2]))
                    else:
                        load = 0.0
                    iface = 0.0
                    if self.include_interface:
                        iface = Qn * interface_flux_term(s, sol, ups)
                    self._add(idx, mass, forms, -load, -iface)
                if mode.net_rotation is not None and model.n_w:
                    zeta = self._zeta(mode, model)
                    terms = [-dq * zeta @ (model.M_M @ structure.z),
                             Qn * zeta @ (model.K_net @ structure.w)]
                    if model.n_p:
                        terms.append(Qn * structure.p @ (model.B_w @ zeta))
                    self._add(idx, *terms)

    def report(self) -> dict[str, float]:
        return dict(zip(self.names, np.abs(self.value).tolist()))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["test", "residual", "scale"])
            for name, v, s in zip(self.names, self.value, self.scale):
                wr.writerow([name, f"{abs(v):.12e}", f"{s:.12e}"])


def interface_flux_term(system, solution, test_values) -> float:
    """(rho_F/2) * boundary integral of (u.test)(u.n) over the lateral wall, by nodal quadrature.

    The wall is sampled at its ring nodes with area weights from the wall
    parametrisation; the outward normal comes from the same parametrisation.
    """
    g = system.grid
    ring = g.wall_nodes
    u = solution.U[ring]
    ups = np.asarray(test_values)[ring]
    F = g.F
    dz = np.gradient(F, g.z, axis=0)
    dth = (np.roll(F, -1, axis=1) - np.roll(F, 1, axis=1)) / (2 * (2 * np.pi / g.Nt))
    th = g.theta[None, :]
    # tangents of X(z, th) = (F cos, F sin, z)
    tz = np.stack([dz * np.cos(th), dz * np.sin(th), np.ones_like(F)], axis=-1)
    tt = np.stack([dth * np.cos(th) - F * np.sin(th), dth * np.sin(th) + F * np.cos(th), np.zeros_like(F)], axis=-1)
    nrm = np.cross(tt, tz)
    wz = np.full(g.Nz, g.z[1] - g.z[0])
    wz[[0, -1]] *= 0.5
    area_n = (nrm * wz[:, None, None] * (2 * np.pi / g.Nt)).reshape(-1, 3)
    return float(0.5 * system.params.rho_F * np.sum(np.sum(u * ups, axis=1) * np.sum(u * area_n, axis=1)))
