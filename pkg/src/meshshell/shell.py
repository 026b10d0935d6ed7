"""Linear cylindrical Koiter shell on a C^1 spline space.

Displacements are triples ``(eta_z, eta_r, eta_theta)`` over the parameter
rectangle (0, L) x (0, 2 pi).  Each component is a tensor product of clamped
cubic B-splines in z and uniform periodic cubic B-splines in theta.  Clamping
is built into the basis by dropping the end functions: the first and last
z-function for every component, and additionally the second and penultimate
ones for ``eta_r`` so that its axial slope also vanishes at the ends.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import BSpline

from .errors import ConfigurationError

TWO_PI = 2.0 * np.pi
COMPONENTS = ("z", "r", "theta")


@dataclass(frozen=True)
class ShellParams:
    """Material and geometric constants of the shell."""

    h: float
    lam: float
    mu: float
    rho_K: float
    R: float
    L: float
    eps_K: float | None = None

    def __post_init__(self):
        if not self.h > 0:
            raise ConfigurationError("shell thickness h must be positive")
        if not self.mu > 0:
            raise ConfigurationError("Lame constant mu must be positive")
        if not self.lam + 2 * self.mu > 0:
            raise ConfigurationError("lambda + 2 mu must be positive")
        if not self.rho_K > 0:
            raise ConfigurationError("shell density rho_K must be positive")
        if not (self.R > 0 and self.L > 0):
            raise ConfigurationError("R and L must be positive")
        if self.eps_K is not None and self.eps_K < 0:
            raise ConfigurationError("regularisation eps_K must be nonnegative")

    @property
    def regularization(self) -> float:
        return 1e-6 * self.mu * self.h ** 3 if self.eps_K is None else self.eps_K


def elasticity_matrix(R: float, lam: float, mu: float) -> np.ndarray:
    """3x3 matrix C with (E11, E12, E22) C (F11, F12, F22)^T equal to the elasticity product.

    The off-diagonal strain appears once in the vector, so its weight carries
    the factor 2 of the full tensor contraction.
    """
    a = 4 * lam * mu / (lam + 2 * mu)
    tr = np.array([1.0, 0.0, 1.0 / R ** 2])
    return a * np.outer(tr, tr) + 4 * mu * np.diag([1.0, 2.0 / R ** 2, 1.0 / R ** 4])


def elasticity_apply(E, R: float, lam: float, mu: float) -> np.ndarray:
    """Apply the shell elasticity tensor to symmetric 2x2 tensor(s) ``E``."""
    E = np.asarray(E, float)
    Ac = np.diag([1.0, 1.0 / R ** 2])
    tr = np.einsum("ij,...ij->...", Ac, E)
    return (4 * lam * mu / (lam + 2 * mu)) * tr[..., None, None] * Ac + 4 * mu * (Ac @ E @ Ac)


# ---------------------------------------------------------------------------
# one-dimensional bases

def _cardinal_cubic(u: np.ndarray, nu: int) -> np.ndarray:
    a = np.abs(u)
    inner = a < 1
    outer = (a >= 1) & (a < 2)
    out = np.zeros_like(u)
    if nu == 0:
        out[inner] = 2.0 / 3.0 - a[inner] ** 2 + 0.5 * a[inner] ** 3
        out[outer] = (2 - a[outer]) ** 3 / 6.0
    elif nu == 1:
        out[inner] = -2 * u[inner] + 1.5 * u[inner] * a[inner]
        out[outer] = -np.sign(u[outer]) * (2 - a[outer]) ** 2 / 2.0
    elif nu == 2:
        out[inner] = -2 + 3 * a[inner]
        out[outer] = 2 - a[outer]
    else:
        raise ValueError("derivative order above 2 not supported")
    return out


class PeriodicCubicBasis:
    """Uniform periodic cubic B-splines on [0, 2 pi)."""

    def __init__(self, n: int):
        if n < 4:
            raise ConfigurationError("periodic spline basis needs at least 4 functions")
        self.n = n
        self.step = TWO_PI / n
        self.centers = np.arange(n) * self.step

    def design(self, theta, nu: int = 0) -> np.ndarray:
        theta = np.asarray(theta, float).ravel()
        d = np.mod(theta[:, None] - self.centers[None, :] + np.pi, TWO_PI) - np.pi
        return _cardinal_cubic(d / self.step, nu) / self.step ** nu

    def breakpoints(self) -> np.ndarray:
        return np.append(self.centers, TWO_PI)


class ClampedCubicBasis:
    """Open-uniform cubic B-splines on [0, L]."""

    def __init__(self, n: int, L: float):
        if n < 6:
            raise ConfigurationError("clamped spline basis needs at least 6 functions")
        self.n = n
        self.L = L
        inner = np.linspace(0.0, L, n - 2)
        self.knots = np.concatenate([[0.0] * 3, inner, [L] * 3])
        self._splines = {0: BSpline(self.knots, np.eye(n), 3, extrapolate=False)}

    def _spline(self, nu: int) -> BSpline:
        if nu not in self._splines:
            self._splines[nu] = self._splines[0].derivative(nu)
        return self._splines[nu]

    def design(self, z, nu: int = 0) -> np.ndarray:
        z = np.clip(np.asarray(z, float).ravel(), 0.0, self.L)
        out = self._spline(nu)(z)
        return np.nan_to_num(out)

    def breakpoints(self) -> np.ndarray:
        return np.linspace(0.0, self.L, self.n - 2)


def gauss_points(breaks: np.ndarray, n_gauss: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n_gauss)
    a, b = breaks[:-1, None], breaks[1:, None]
    pts = 0.5 * (a + b) + 0.5 * (b - a) * x[None, :]
    wts = 0.5 * (b - a) * w[None, :]
    return pts.ravel(), wts.ravel()


# ---------------------------------------------------------------------------
# tensor-product space

class ShellBasis:
    """Constrained tensor-product spline space for the three displacement components."""

    def __init__(self, R: float, L: float, n_z: int, n_theta: int, n_gauss: int = 4):
        if 2 * n_gauss - 1 < 3:
            raise ConfigurationError("quadrature degree below spline degree")
        self.R, self.L = float(R), float(L)
        self.n_z, self.n_theta = int(n_z), int(n_theta)
        self.n_gauss = int(n_gauss)
        self.zb = ClampedCubicBasis(self.n_z, self.L)
        self.tb = PeriodicCubicBasis(self.n_theta)
        self.active = {
            "z": np.arange(1, self.n_z - 1),
            "r": np.arange(2, self.n_z - 2),
            "theta": np.arange(1, self.n_z - 1),
        }
        sizes = [self.active[c].size * self.n_theta for c in COMPONENTS]
        self.offsets = dict(zip(COMPONENTS, np.concatenate([[0], np.cumsum(sizes)[:-1]])))
        self.sizes = dict(zip(COMPONENTS, sizes))
        self.ndof = int(sum(sizes))

    def component_slice(self, comp: str) -> slice:
        o = int(self.offsets[comp])
        return slice(o, o + self.sizes[comp])

    def full_coefficients(self, coeffs: np.ndarray, comp: str) -> np.ndarray:
        """Coefficient grid (n_z, n_theta) of one component, zeros on dropped functions."""
        out = np.zeros((self.n_z, self.n_theta))
        out[self.active[comp]] = coeffs[self.component_slice(comp)].reshape(-1, self.n_theta)
        return out

    def point_operator(self, z, theta, comp: str, dz: int = 0, dth: int = 0) -> sp.csr_matrix:
        """Sparse matrix evaluating one component derivative at scattered points."""
        z = np.asarray(z, float).ravel()
        theta = np.asarray(theta, float).ravel()
        Bz = self.zb.design(z, dz)[:, self.active[comp]]
        Bt = self.tb.design(theta, dth)
        local = (Bz[:, :, None] * Bt[:, None, :]).reshape(z.size, -1)
        local[np.abs(local) < 1e-300] = 0.0
        block = sp.csr_matrix(local)
        return self._embed(block, comp)

    def tensor_operator(self, zq, tq, comp: str, dz: int = 0, dth: int = 0) -> sp.csr_matrix:
        """Evaluation on the tensor grid zq x tq (z-major ordering)."""
        Bz = sp.csr_matrix(self.zb.design(zq, dz)[:, self.active[comp]])
        Bt = sp.csr_matrix(self.tb.design(tq, dth))
        return self._embed(sp.kron(Bz, Bt, format="csr"), comp)

    def _embed(self, block: sp.spmatrix, comp: str) -> sp.csr_matrix:
        o = int(self.offsets[comp])
        m = block.shape[0]
        left = sp.csr_matrix((m, o))
        right = sp.csr_matrix((m, self.ndof - o - block.shape[1]))
        return sp.hstack([left, block, right], format="csr")

    @cached_property
    def quadrature(self):
        zq, wz = gauss_points(self.zb.breakpoints(), self.n_gauss)
        tq, wt = gauss_points(self.tb.breakpoints(), self.n_gauss)
        return zq, tq, np.kron(wz, wt)

    def quad_operator(self, comp: str, dz: int = 0, dth: int = 0) -> sp.csr_matrix:
        key = (comp, dz, dth)
        cache = self.__dict__.setdefault("_qcache", {})
        if key not in cache:
            zq, tq, _ = self.quadrature
            cache[key] = self.tensor_operator(zq, tq, comp, dz, dth)
        return cache[key]


class ShellField:
    """A displacement or velocity field given by coefficients in a :class:`ShellBasis`."""

    def __init__(self, basis: ShellBasis, coeffs=None):
        self.basis = basis
        self.coeffs = np.zeros(basis.ndof) if coeffs is None else np.asarray(coeffs, float).copy()
        if self.coeffs.shape != (basis.ndof,):
            raise ConfigurationError("coefficient vector has wrong length")

    def evaluate(self, z, theta, dz: int = 0, dth: int = 0) -> np.ndarray:
        """Return array (3, *shape) holding (eta_z, eta_r, eta_theta) derivatives."""
        z = np.asarray(z, float)
        theta = np.asarray(theta, float)
        shape = np.broadcast(z, theta).shape
        zf = np.broadcast_to(z, shape).ravel()
        tf = np.broadcast_to(theta, shape).ravel()
        b = self.basis
        Bz = b.zb.design(zf, dz)
        Bt = b.tb.design(tf, dth)
        out = np.empty((3, zf.size))
        for i, c in enumerate(COMPONENTS):
            C = b.full_coefficients(self.coeffs, c)
            out[i] = np.einsum("mi,ik,mk->m", Bz, C, Bt)
        return out.reshape((3,) + shape)

    @classmethod
    def interpolate(cls, basis: ShellBasis, func) -> "ShellField":
        """Least-squares fit of ``func(z, theta) -> (3, ...)`` over the quadrature grid."""
        zq, tq, w = basis.quadrature
        Z, T = np.meshgrid(zq, tq, indexing="ij")
        vals = np.asarray(func(Z.ravel(), T.ravel()), float)
        coeffs = np.zeros(basis.ndof)
        W = sp.diags(w)
        for i, c in enumerate(COMPONENTS):
            E = basis.quad_operator(c)[:, basis.component_slice(c)]
            A = (E.T @ W @ E).toarray()
            coeffs[basis.component_slice(c)] = np.linalg.solve(A, E.T @ (w * vals[i]))
        return cls(basis, coeffs)


def change_of_metric(field: ShellField, z, theta) -> np.ndarray:
    """Linearised change of metric at point(s); returns array (..., 2, 2)."""
    R = field.basis.R
    e = field.evaluate(z, theta)
    ez = field.evaluate(z, theta, dz=1)
    et = field.evaluate(z, theta, dth=1)
    g11 = ez[0]
    g12 = 0.5 * (et[0] + R * ez[2])
    g22 = R * et[2] + R * e[1]
    return np.stack([np.stack([g11, g12], -1), np.stack([g12, g22], -1)], -2)


def change_of_curvature(field: ShellField, z, theta) -> np.ndarray:
    """Linearised change of curvature at point(s); returns array (..., 2, 2)."""
    e = field.evaluate(z, theta)
    ez = field.evaluate(z, theta, dz=1)
    et = field.evaluate(z, theta, dth=1)
    ezz = field.evaluate(z, theta, dz=2)
    ezt = field.evaluate(z, theta, dz=1, dth=1)
    ett = field.evaluate(z, theta, dth=2)
    r11 = -ezz[1]
    r12 = -ezt[1] + ez[2]
    r22 = -ett[1] + 2 * et[2] + e[1]
    return np.stack([np.stack([r11, r12], -1), np.stack([r12, r22], -1)], -2)


def strain_operators(basis: ShellBasis):
    """Sparse maps from coefficients to (metric, curvature) Voigt strains at quadrature points."""
    q = basis.quad_operator
    R = basis.R
    metric = [
        q("z", 1, 0),
        0.5 * (q("z", 0, 1) + R * q("theta", 1, 0)),
        R * q("theta", 0, 1) + R * q("r"),
    ]
    curvature = [
        -q("r", 2, 0),
        -q("r", 1, 1) + q("theta", 1, 0),
        -q("r", 0, 2) + 2 * q("theta", 0, 1) + q("r"),
    ]
    return metric, curvature


def _weighted_form(C: np.ndarray, ops, w: np.ndarray) -> sp.csr_matrix:
    W = sp.diags(w)
    out = None
    for a in range(3):
        for b in range(3):
            if C[a, b] == 0.0:
                continue
            term = C[a, b] * (ops[a].T @ W @ ops[b])
            out = term if out is None else out + term
    return out.tocsr()


def assemble_shell_stiffness(basis: ShellBasis, params: ShellParams) -> sp.csr_matrix:
    """Matrix of the shell bilinear form: membrane + bending + tangential regularisation."""
    zq, tq, w = basis.quadrature
    wR = w * params.R
    C = elasticity_matrix(params.R, params.lam, params.mu)
    metric, curvature = strain_operators(basis)
    K = params.h * _weighted_form(C, metric, wR)
    K = K + (params.h ** 3 / 12.0) * _weighted_form(C, curvature, wR)
    eps = params.regularization
    if eps > 0:
        W = sp.diags(wR)
        for comp in ("z", "theta"):
            lap = basis.quad_operator(comp, 2, 0) + basis.quad_operator(comp, 0, 2)
            K = K + eps * (lap.T @ W @ lap)
    K = 0.5 * (K + K.T)
    return K.tocsr()


def assemble_shell_mass(basis: ShellBasis, params: ShellParams) -> sp.csr_matrix:
    """Weighted L2 mass matrix, density times thickness times radius."""
    zq, tq, w = basis.quadrature
    W = sp.diags(w * params.R * params.rho_K * params.h)
    M = None
    for comp in COMPONENTS:
        E = basis.quad_operator(comp)
        term = E.T @ W @ E
        M = term if M is None else M + term
    return (0.5 * (M + M.T)).tocsr()


def l2_gram(basis: ShellBasis, R: float) -> sp.csr_matrix:
    """Plain L2(R; omega) Gram matrix (no density), used for kinematic-mismatch norms."""
    zq, tq, w = basis.quadrature
    W = sp.diags(w * R)
    M = None
    for comp in COMPONENTS:
        E = basis.quad_operator(comp)
        term = E.T @ W @ E
        M = term if M is None else M + term
    return (0.5 * (M + M.T)).tocsr()


def h2_gram(basis: ShellBasis) -> sp.csr_matrix:
    """Unweighted H^2 Gram matrix of the constrained space, for coercivity ratios."""
    zq, tq, w = basis.quadrature
    W = sp.diags(w)
    G = None
    for comp in COMPONENTS:
        for dz, dth in ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)):
            E = basis.quad_operator(comp, dz, dth)
            term = E.T @ W @ E
            G = term if G is None else G + term
    return (0.5 * (G + G.T)).tocsr()
