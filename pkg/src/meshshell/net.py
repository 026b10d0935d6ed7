"""Net of thin rods glued to the cylinder wall, discretised edge by edge.

Each edge is a straight segment in the (z, R theta) parameter plane, hence a
helix (or line, or circle) on the reference surface.  Rotations ``w`` and
displacements ``d`` are continuous piecewise-linear vectors in Cartesian
components; vertex values are single shared unknowns, so the kinematic
vertex coupling is exact.  The inextensibility/unshearability constraint is
collocated at element midpoints and enforced with one multiplier 3-vector
per element.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import ConfigurationError

TWO_PI = 2.0 * np.pi


def radial_unit(theta):
    theta = np.asarray(theta, float)
    return np.stack([np.cos(theta), np.sin(theta), np.zeros_like(theta)], -1)


def angular_unit(theta):
    theta = np.asarray(theta, float)
    return np.stack([-np.sin(theta), np.cos(theta), np.zeros_like(theta)], -1)


AXIAL_UNIT = np.array([0.0, 0.0, 1.0])


def cross_matrix(t: np.ndarray) -> np.ndarray:
    """Matrix X with X @ w == np.cross(t, w)."""
    return np.array([[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]])


@dataclass
class Edge:
    id: str
    v0: str
    v1: str
    n_nodes: int
    A: float
    H: np.ndarray
    M: np.ndarray


@dataclass
class NetTopology:
    """Vertices in parameter coordinates (z, theta) and the rods joining them."""

    R: float
    vertices: dict[str, tuple[float, float]]
    edges: list[Edge]
    rho_S: float = 1.0

    # filled by __post_init__
    node_z: np.ndarray = field(init=False, repr=False)
    node_theta: np.ndarray = field(init=False, repr=False)
    elements: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.rho_S > 0:
            raise ConfigurationError("rod density rho_S must be positive")
        self._validate()
        self._build_nodes()

    # -- construction -----------------------------------------------------
    def _validate(self):
        for e in self.edges:
            for v in (e.v0, e.v1):
                if v not in self.vertices:
                    raise ConfigurationError(f"edge {e.id} references unknown vertex {v}")
            if e.v0 == e.v1:
                raise ConfigurationError(f"edge {e.id} is a loop")
            if e.n_nodes < 2:
                raise ConfigurationError(f"edge {e.id} needs at least 2 nodes")
            if not e.A > 0:
                raise ConfigurationError(f"edge {e.id} has non-positive cross-section")
            for name, mat in (("H", e.H), ("M", e.M)):
                if not np.allclose(mat, mat.T) or np.linalg.eigvalsh(mat).min() <= 0:
                    raise ConfigurationError(f"edge {e.id}: {name} must be symmetric positive definite")
        if self.edges:
            ids = {v: i for i, v in enumerate(self.vertices)}
            rows = [ids[e.v0] for e in self.edges]
            cols = [ids[e.v1] for e in self.edges]
            adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(ids), len(ids)))
            ncomp, _ = connected_components(adj, directed=False)
            if ncomp != 1:
                raise ConfigurationError(f"net graph is disconnected ({ncomp} components)")

    def edge_geometry(self, e: Edge):
        z0, t0 = self.vertices[e.v0]
        z1, t1 = self.vertices[e.v1]
        dth = np.mod(t1 - t0 + np.pi, TWO_PI) - np.pi
        dz = z1 - z0
        length = float(np.hypot(dz, self.R * dth))
        if not length > 0:
            raise ConfigurationError(f"edge {e.id} has zero length")
        return z0, t0, dz, dth, length

    def _build_nodes(self):
        vids = list(self.vertices)
        zs = [self.vertices[v][0] for v in vids]
        ts = [self.vertices[v][1] for v in vids]
        index = {v: i for i, v in enumerate(vids)}
        elements = []
        self.edge_nodes = []
        for ei, e in enumerate(self.edges):
            z0, t0, dz, dth, length = self.edge_geometry(e)
            nodes = [index[e.v0]]
            for m in range(1, e.n_nodes - 1):
                s = m / (e.n_nodes - 1)
                zs.append(z0 + s * dz)
                ts.append(t0 + s * dth)
                nodes.append(len(zs) - 1)
            nodes.append(index[e.v1])
            self.edge_nodes.append(np.array(nodes))
            h = length / (e.n_nodes - 1)
            for m in range(e.n_nodes - 1):
                smid = (m + 0.5) / (e.n_nodes - 1)
                elements.append((nodes[m], nodes[m + 1], ei, smid, h))
        self.node_z = np.array(zs, float)
        self.node_theta = np.mod(np.array(ts, float), TWO_PI)
        self.elements = np.array(elements, dtype=object).reshape(-1, 5)
        self.vertex_index = index

    # -- queries ----------------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return self.node_z.size

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def frame(self, ei: int, s: float) -> np.ndarray:
        """Rotation whose columns are (tangent, outward normal, tangent x normal) at fraction s."""
        e = self.edges[ei]
        z0, t0, dz, dth, length = self.edge_geometry(e)
        th = t0 + s * dth
        t = (dz * AXIAL_UNIT + self.R * dth * angular_unit(th)) / length
        n = radial_unit(th)
        return np.column_stack([t, n, np.cross(t, n)])

    def tangent(self, ei: int, s: float) -> np.ndarray:
        return self.frame(ei, s)[:, 0]

    def element_data(self):
        """Yield (node a, node b, edge index, Q at midpoint, element length)."""
        for a, b, ei, smid, h in self.elements:
            yield int(a), int(b), int(ei), self.frame(int(ei), float(smid)), float(h)


def _read_matrix(tokens, where):
    vals = [float(x) for x in tokens]
    if len(vals) == 3:
        return np.diag(vals)
    if len(vals) == 9:
        return np.array(vals).reshape(3, 3)
    raise ConfigurationError(f"{where}: expected 3 or 9 matrix entries")


def parse_topology(text: str, R: float, rho_S: float = 1.0, source: str = "<net>") -> NetTopology:
    """Parse the vertex/edge text format; ``#`` starts a comment."""
    vertices: dict[str, tuple[float, float]] = {}
    edges: list[Edge] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        where = f"{source}:{lineno}"
        try:
            if tok[0] == "vertex" and len(tok) == 4:
                if tok[1] in vertices:
                    raise ConfigurationError(f"{where}: duplicate vertex {tok[1]}")
                vertices[tok[1]] = (float(tok[2]), float(tok[3]))
            elif tok[0] == "edge" and len(tok) in (12, 24):
                half = (len(tok) - 6) // 2
                H = _read_matrix(tok[6:6 + half], where)
                M = _read_matrix(tok[6 + half:], where)
                edges.append(Edge(tok[1], tok[2], tok[3], int(tok[4]), float(tok[5]), H, M))
            else:
                raise ConfigurationError(f"{where}: cannot parse line '{raw.strip()}'")
        except ValueError as exc:
            raise ConfigurationError(f"{where}: {exc}") from exc
    return NetTopology(R, vertices, edges, rho_S)


def load_topology(path, R: float, rho_S: float = 1.0) -> NetTopology:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"net topology file not found: {path}")
    return parse_topology(path.read_text(), R, rho_S, source=str(path))


def empty_topology(R: float, rho_S: float = 1.0) -> NetTopology:
    return NetTopology(R, {}, [], rho_S)


# ---------------------------------------------------------------------------
# discrete operators

def assemble_net_stiffness(top: NetTopology) -> sp.csr_matrix:
    """Matrix of the rod elastic form acting on nodal rotations (3 per node)."""
    rows, cols, vals = [], [], []
    for a, b, ei, Q, h in top.element_data():
        e = top.edges[ei]
        Kloc = Q @ e.H @ Q.T / h
        for i, ni in ((0, a), (1, b)):
            for j, nj in ((0, a), (1, b)):
                sign = 1.0 if i == j else -1.0
                r, c = np.meshgrid(3 * ni + np.arange(3), 3 * nj + np.arange(3), indexing="ij")
                rows.append(r.ravel()); cols.append(c.ravel()); vals.append((sign * Kloc).ravel())
    n = 3 * top.n_nodes
    if not rows:
        return sp.csr_matrix((n, n))
    K = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    return (0.5 * (K + K.T)).tocsr()


def assemble_net_mass(top: NetTopology, include_density: bool = True):
    """Consistent P1 mass matrices (translational weighted by A, rotational by M)."""
    ref = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    out = []
    for which in ("A", "M"):
        rows, cols, vals = [], [], []
        for a, b, ei, Q, h in top.element_data():
            e = top.edges[ei]
            W = e.A * np.eye(3) if which == "A" else Q @ e.M @ Q.T
            if include_density:
                W = top.rho_S * W
            for i, ni in ((0, a), (1, b)):
                for j, nj in ((0, a), (1, b)):
                    r, c = np.meshgrid(3 * ni + np.arange(3), 3 * nj + np.arange(3), indexing="ij")
                    rows.append(r.ravel()); cols.append(c.ravel()); vals.append((h * ref[i, j] * W).ravel())
        n = 3 * top.n_nodes
        if not rows:
            out.append(sp.csr_matrix((n, n)))
            continue
        Mx = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
        out.append((0.5 * (Mx + Mx.T)).tocsr())
    return out[0], out[1]


def constraint_operator(top: NetTopology, warn: bool = True):
    """Return (B_d, B_w) so that B_d d + B_w w is the midpoint value of d' + t x w per element."""
    rows_d, cols_d, vals_d = [], [], []
    rows_w, cols_w, vals_w = [], [], []
    for k, (a, b, ei, Q, h) in enumerate(top.element_data()):
        r = 3 * k + np.arange(3)
        for node, sgn in ((a, -1.0), (b, 1.0)):
            rows_d.append(r); cols_d.append(3 * node + np.arange(3)); vals_d.append(np.full(3, sgn / h))
        X = 0.5 * cross_matrix(Q[:, 0])
        for node in (a, b):
            rr, cc = np.meshgrid(r, 3 * node + np.arange(3), indexing="ij")
            rows_w.append(rr.ravel()); cols_w.append(cc.ravel()); vals_w.append(X.ravel())
    m, n = 3 * top.n_elements, 3 * top.n_nodes
    if m == 0:
        return sp.csr_matrix((0, n)), sp.csr_matrix((0, n))
    Bd = sp.coo_matrix((np.concatenate(vals_d), (np.concatenate(rows_d), np.concatenate(cols_d))), shape=(m, n)).tocsr()
    Bw = sp.coo_matrix((np.concatenate(vals_w), (np.concatenate(rows_w), np.concatenate(cols_w))), shape=(m, n)).tocsr()
    if warn and m <= 3000:
        null = constraint_nullity(Bd, Bw)
        if null > 0:
            warnings.warn(f"net constraint operator is rank deficient (null-space dimension {null})")
    return Bd, Bw


def constraint_nullity(Bd: sp.spmatrix, Bw: sp.spmatrix, tol: float = 1e-10) -> int:
    """Number of dependent constraint rows of [B_d B_w]."""
    B = sp.hstack([Bd, Bw]).toarray()
    if B.shape[0] == 0:
        return 0
    s = np.linalg.svd(B, compute_uv=False)
    return int(B.shape[0] - np.sum(s > tol * s.max()))


def recover_contact_moment(top: NetTopology, w: np.ndarray) -> np.ndarray:
    """Per-element contact moment Q H Q^T w' (array of shape (n_elements, 3))."""
    w = np.asarray(w, float).reshape(-1, 3)
    out = np.zeros((top.n_elements, 3))
    for k, (a, b, ei, Q, h) in enumerate(top.element_data()):
        out[k] = Q @ top.edges[ei].H @ Q.T @ ((w[b] - w[a]) / h)
    return out


@dataclass
class NetState:
    """Nodal rotation, displacement and their velocities plus element multipliers."""

    w: np.ndarray
    d: np.ndarray
    k: np.ndarray
    z: np.ndarray
    p: np.ndarray

    @classmethod
    def zeros(cls, top: NetTopology) -> "NetState":
        n = 3 * top.n_nodes
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(3 * top.n_elements))
