"""Reference cylinder, moving radial boundary and the slab-to-slab ALE maps.

Cartesian vectors are ordered (x, y, z) with the cylinder axis along z.
Cylindrical points are ordered (z, r, theta).  The deformed lateral wall is
stored as a radial offset ``eta_tilde`` on the fixed (z, theta) grid, so the
wall sits at radius ``R + eta_tilde``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import ConfigurationError, DomainError, SubgraphViolation

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class CylinderRef:
    """Reference cylinder of radius ``R`` and length ``L`` with a structured grid.

    ``N_z`` counts axial cells (``N_z + 1`` node planes), ``N_rho`` counts radial
    node rings and ``N_theta`` counts azimuthal nodes (periodic).
    """

    R: float
    L: float
    N_z: int
    N_rho: int
    N_theta: int

    def __post_init__(self):
        if not (self.R > 0 and self.L > 0):
            raise ConfigurationError("cylinder radius and length must be positive")
        for name in ("N_z", "N_rho", "N_theta"):
            if int(getattr(self, name)) < 2:
                raise ConfigurationError(f"{name} must be at least 2")

    @property
    def z(self) -> np.ndarray:
        return np.linspace(0.0, self.L, self.N_z + 1)

    @property
    def theta(self) -> np.ndarray:
        return np.arange(self.N_theta) * (TWO_PI / self.N_theta)

    def surface_point(self, z, theta) -> np.ndarray:
        """Map a parameter point (z, theta) onto the reference lateral surface."""
        z = np.asarray(z, float)
        theta = np.asarray(theta, float)
        return np.stack([self.R * np.cos(theta), self.R * np.sin(theta), z + 0 * theta], axis=-1)


@dataclass
class BoundaryField:
    """Radial wall offset on the (z, theta) grid; ``values`` has shape (len(z), len(theta))."""

    R: float
    z: np.ndarray
    theta: np.ndarray
    values: np.ndarray
    n: int = 0

    def __post_init__(self):
        self.z = np.asarray(self.z, float)
        self.theta = np.asarray(self.theta, float)
        self.values = np.asarray(self.values, float)
        if self.values.shape != (self.z.size, self.theta.size):
            raise ConfigurationError(
                f"boundary values shape {self.values.shape} does not match grid "
                f"({self.z.size}, {self.theta.size})")

    @classmethod
    def zeros(cls, ref: CylinderRef, n: int = 0) -> "BoundaryField":
        return cls(ref.R, ref.z, ref.theta, np.zeros((ref.N_z + 1, ref.N_theta)), n)

    @property
    def radius(self) -> np.ndarray:
        return self.R + self.values

    def min_radius(self) -> float:
        return float(self.radius.min())

    def interpolate(self, z, theta) -> np.ndarray:
        """Bilinear interpolation, periodic in theta, clamped to [0, L] in z."""
        z = np.asarray(z, float)
        theta = np.asarray(theta, float)
        zg, tg = self.z, self.theta
        nt = tg.size
        dth = TWO_PI / nt
        s = np.clip((z - zg[0]) / (zg[-1] - zg[0]), 0.0, 1.0) * (zg.size - 1)
        i0 = np.minimum(np.floor(s).astype(int), zg.size - 2)
        fz = s - i0
        u = np.mod(theta - tg[0], TWO_PI) / dth
        k0 = np.floor(u).astype(int) % nt
        ft = u - np.floor(u)
        k1 = (k0 + 1) % nt
        v = self.values
        return ((1 - fz) * (1 - ft) * v[i0, k0] + fz * (1 - ft) * v[i0 + 1, k0]
                + (1 - fz) * ft * v[i0, k1] + fz * ft * v[i0 + 1, k1])


@dataclass
class AleSlabMap:
    """Radial-scaling map from the new domain (``source``) onto the old one (``target``)."""

    source: BoundaryField
    target: BoundaryField
    dt: float

    def __post_init__(self):
        if self.source.values.shape != self.target.values.shape:
            raise ConfigurationError("slab map fields must share one grid")
        if self.source.R != self.target.R:
            raise ConfigurationError("slab map fields must share the reference radius")

    @property
    def R(self) -> float:
        return self.source.R

    def inverse(self) -> "AleSlabMap":
        return AleSlabMap(self.target, self.source, self.dt)

    def _radii(self, z=None, theta=None):
        if z is None:
            return self.source.radius, self.target.radius
        return (self.R + self.source.interpolate(z, theta),
                self.R + self.target.interpolate(z, theta))

    def delta_eta(self, z=None, theta=None) -> np.ndarray:
        """Wall displacement across the slab, normalised by the new wall radius."""
        new, old = self._radii(z, theta)
        return (new - old) / new


def ale_map(m: AleSlabMap, p, tol: float = 1e-12) -> np.ndarray:
    """Send cylindrical point(s) ``(z, r, theta)`` of the new domain to the old domain."""
    p = np.asarray(p, float)
    z, r, th = p[..., 0], p[..., 1], p[..., 2]
    new, old = m._radii(z, th)
    if np.any(r < 0) or np.any(r > new * (1 + tol)):
        raise DomainError("point lies outside the source domain")
    out = p.copy()
    out[..., 1] = r * (old / new)
    return out


def ale_jacobian(m: AleSlabMap, z=None, theta=None) -> np.ndarray:
    """Volume ratio of the slab map; evaluated on the grid when no point is given."""
    new, old = m._radii(z, theta)
    return (old / new) ** 2


def ale_domain_velocity(m: AleSlabMap, p) -> np.ndarray:
    """Cartesian grid velocity of the moving domain at cylindrical point(s) ``p``."""
    if not m.dt > 0:
        raise ConfigurationError("time step must be positive")
    p = np.asarray(p, float)
    z, r, th = p[..., 0], p[..., 1], p[..., 2]
    new, old = m._radii(z, th)
    if np.any(r < 0) or np.any(r > new * (1 + 1e-12)):
        raise DomainError("point lies outside the source domain")
    radial = (new - old) / (m.dt * new) * r
    return np.stack([radial * np.cos(th), radial * np.sin(th), np.zeros_like(radial)], axis=-1)


# ---------------------------------------------------------------------------
# boundary reparameterisation

class SurfaceDisplacement(Protocol):
    """Anything that evaluates (eta_z, eta_r, eta_theta) and their parameter derivatives."""

    def evaluate(self, z, theta, dz: int = 0, dth: int = 0) -> np.ndarray: ...


def _periodic_dtheta(a: np.ndarray, theta: np.ndarray) -> np.ndarray:
    h = TWO_PI / theta.size
    return (np.roll(a, -1, axis=1) - np.roll(a, 1, axis=1)) / (2 * h)


def injectivity_determinant(dz_ez, dth_ez, dz_eth, dth_eth) -> np.ndarray:
    """Jacobian determinant of g(z, theta) = (z + eta_z, theta + eta_theta)."""
    return (1.0 + dz_ez) * (1.0 + dth_eth) - dth_ez * dz_eth


def check_injectivity(eta_z, eta_theta, z, theta) -> tuple[bool, float]:
    """Grid test of the planar map g from nodal values; returns (ok, min determinant)."""
    eta_z = np.asarray(eta_z, float)
    eta_theta = np.asarray(eta_theta, float)
    z = np.asarray(z, float)
    theta = np.asarray(theta, float)
    edge = 2 if z.size > 2 else 1
    dz_ez = np.gradient(eta_z, z, axis=0, edge_order=edge)
    dz_eth = np.gradient(eta_theta, z, axis=0, edge_order=edge)
    det = injectivity_determinant(dz_ez, _periodic_dtheta(eta_z, theta),
                                  dz_eth, _periodic_dtheta(eta_theta, theta))
    margin = float(det.min())
    return margin > 0.0, margin


def _fallback_inverse(disp: SurfaceDisplacement, z_target, th_target, L, fine=4):
    """Scattered linear inversion of g from a refined sampling of the parameter plane."""
    from scipy.interpolate import griddata

    nz = max(8, fine * int(np.sqrt(z_target.size)))
    zs = np.linspace(0.0, L, nz)
    ts = np.linspace(-np.pi / 2, TWO_PI + np.pi / 2, 2 * nz)
    Z, T = np.meshgrid(zs, ts, indexing="ij")
    e = disp.evaluate(Z, T)
    img = np.column_stack([(Z + e[0]).ravel(), (T + e[2]).ravel()])
    zq = griddata(img, Z.ravel(), (z_target, th_target), method="linear")
    tq = griddata(img, T.ravel(), (z_target, th_target), method="linear")
    return zq, tq


def reparameterize(disp: SurfaceDisplacement, z, theta, R: float, n: int = 0,
                   tol: float = 1e-10, max_iter: int = 50):
    """Express the radial displacement as a function of the deformed parameters.

    Returns ``(field, z_pre, theta_pre)`` where ``field.values[i, k]`` is
    ``eta_r`` at the material point ``(z_pre, theta_pre)[i, k]`` that g sends
    to grid node ``(z[i], theta[k])``.
    """
    z = np.asarray(z, float)
    theta = np.asarray(theta, float)
    L = z[-1]
    Zt, Tt = np.meshgrid(z, theta, indexing="ij")
    dz = disp.evaluate(Zt, Tt, dz=1)
    dt_ = disp.evaluate(Zt, Tt, dth=1)
    det = injectivity_determinant(dz[0], dt_[0], dz[2], dt_[2])
    if det.min() <= 0.0:
        raise SubgraphViolation(f"wall map folds: min Jacobian determinant {det.min():.3e}")

    zp, tp = Zt.copy(), Tt.copy()
    for _ in range(max_iter):
        e = disp.evaluate(zp, tp)
        rz = zp + e[0] - Zt
        rt = tp + e[2] - Tt
        if max(np.abs(rz).max(), np.abs(rt).max()) < tol:
            break
        ez = disp.evaluate(zp, tp, dz=1)
        et = disp.evaluate(zp, tp, dth=1)
        a, b = 1.0 + ez[0], et[0]
        c, d = ez[2], 1.0 + et[2]
        jd = a * d - b * c
        jd = np.where(np.abs(jd) < 1e-14, 1e-14, jd)
        zp = np.clip(zp - (d * rz - b * rt) / jd, 0.0, L)
        tp = tp - (a * rt - c * rz) / jd
    e = disp.evaluate(zp, tp)
    bad = (np.abs(zp + e[0] - Zt) >= tol) | (np.abs(tp + e[2] - Tt) >= tol)
    if np.any(bad):
        zq, tq = _fallback_inverse(disp, Zt[bad], Tt[bad], L)
        if np.any(~np.isfinite(zq)) or np.any(~np.isfinite(tq)):
            raise SubgraphViolation("could not invert the wall map on the grid")
        zp[bad], tp[bad] = zq, tq
        e = disp.evaluate(zp, tp)
    field_ = BoundaryField(R, z, theta, e[1], n)
    if field_.min_radius() <= 0.0:
        raise SubgraphViolation("wall reached the axis")
    return field_, zp, tp
