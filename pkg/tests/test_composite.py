import numpy as np
import pytest
import scipy.sparse as sp

from meshshell.composite import (StructureModel, build_structure_system, interface_operator,
                                 shell_to_interface, solve_structure_substep, structure_energy_residual,
                                 trace_operator)
from meshshell.errors import StateError
from meshshell.net import empty_topology, parse_topology
from meshshell.shell import ShellBasis, ShellField, ShellParams

R, L = 1.0, 3.0
BASIS = ShellBasis(R, L, 10, 8)
PARAMS = ShellParams(h=0.1, lam=5.0, mu=3.0, rho_K=1.0, R=R, L=L)
ROD = "vertex a 1.0 0.3\nvertex b 2.0 1.1\nedge e a b 5 0.05 1 2 1 0.01 0.01 0.02\n"


@pytest.fixture(scope="module")
def rod_model():
    return StructureModel(BASIS, PARAMS, parse_topology(ROD, R))


@pytest.fixture(scope="module")
def shell_model():
    return StructureModel(BASIS, PARAMS, empty_topology(R))


def moving_state(model, seed):
    rng = np.random.default_rng(seed)
    s = model.zero_state()
    s.v = rng.standard_normal(model.n_eta)
    if model.n_w:
        s.k = model.T @ s.v
    return s


def test_zero_data_zero_step(rod_model):
    s = rod_model.zero_state()
    new = solve_structure_substep(build_structure_system(rod_model, 0.01, s))
    for name in ("eta", "v", "w", "z", "k", "d", "p"):
        np.testing.assert_array_equal(getattr(new, name), 0.0)


def test_without_net_reduces_to_shell_system(shell_model):
    s = moving_state(shell_model, 1)
    s.eta = 0.01 * np.random.default_rng(2).standard_normal(shell_model.n_eta)
    dt = 0.02
    new = solve_structure_substep(build_structure_system(shell_model, dt, s))
    A = (shell_model.M_sh / dt ** 2 + shell_model.K_sh).toarray()
    b = shell_model.M_sh @ (s.eta + dt * s.v) / dt ** 2
    np.testing.assert_allclose(new.eta, np.linalg.solve(A, b), rtol=1e-10, atol=1e-14)
    assert new.w.size == 0 and new.p.size == 0


def test_rod_system_matches_dense_solve(rod_model):
    s = moving_state(rod_model, 3)
    sys_ = build_structure_system(rod_model, 0.01, s)
    x = np.linalg.solve(sys_.matrix.toarray(), sys_.rhs)
    new = solve_structure_substep(sys_)
    n1 = rod_model.n_eta
    np.testing.assert_allclose(new.eta, x[:n1], rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(new.w, x[n1:n1 + rod_model.n_w], rtol=1e-9, atol=1e-12)


def test_system_symmetric(rod_model):
    A = build_structure_system(rod_model, 0.01, rod_model.zero_state()).matrix
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((2, A.shape[0]))
    assert abs(a @ (A @ b) - b @ (A @ a)) <= 1e-12 * abs(a @ (A @ b))


@pytest.mark.parametrize("dt", [0.05, 0.005])
def test_energy_equality_and_constraint(rod_model, dt):
    s = moving_state(rod_model, 5)
    E0 = rod_model.total_energy(s)
    for _ in range(10):
        new = solve_structure_substep(build_structure_system(rod_model, dt, s))
        assert abs(structure_energy_residual(rod_model, s, new)) <= 1e-9 * E0
        r = rod_model.constraint_residual(new.eta, new.w)
        assert np.abs(r).max() <= 1e-9 * (1 + np.abs(new.w).max())
        np.testing.assert_array_equal(new.d, rod_model.T @ new.eta)
        s = new


def test_inconsistent_state_rejected(rod_model):
    s = rod_model.zero_state()
    s.d = np.ones_like(s.d)
    with pytest.raises(StateError):
        build_structure_system(rod_model, 0.01, s)


def test_manufactured_solution_first_order(shell_model):
    # eta*(t) = cos(t) phi, forced so that it solves M eta'' + K eta = f
    phi = ShellField.interpolate(BASIS, lambda z, t: np.stack([
        0.01 * np.sin(np.pi * z / L), 0.02 * np.sin(np.pi * z / L) ** 2 * np.cos(t), 0 * z])).coeffs
    M, K = shell_model.M_sh, shell_model.K_sh
    Mphi, Kphi = M @ phi, K @ phi
    errs = []
    for N in (20, 40, 80):
        dt = 1.0 / N
        s = shell_model.zero_state()
        s.eta, s.v = phi.copy(), 0 * phi
        for n in range(N):
            t1 = (n + 1) * dt
            load = np.cos(t1) * (Kphi - Mphi)
            s = solve_structure_substep(build_structure_system(shell_model, dt, s, load_eta=load))
        e = s.eta - np.cos(1.0) * phi
        errs.append(np.sqrt(e @ (M @ e)))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all((rates > 0.8) & (rates < 1.3)), rates


# -- trace and interface maps ---------------------------------------------------------

def test_trace_reproduces_pointwise_values(rod_model):
    top = rod_model.top
    f = ShellField(BASIS, np.random.default_rng(7).standard_normal(BASIS.ndof))
    T = trace_operator(BASIS, top)
    d = (T @ f.coeffs).reshape(-1, 3)
    e = f.evaluate(top.node_z, top.node_theta)
    th = top.node_theta
    expected = (e[0][:, None] * [0, 0, 1.0]
                + e[1][:, None] * np.column_stack([np.cos(th), np.sin(th), 0 * th])
                + R * e[2][:, None] * np.column_stack([-np.sin(th), np.cos(th), 0 * th]))
    np.testing.assert_allclose(d, expected, atol=1e-13)


def test_interface_of_zero_velocity():
    th = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    z = np.full_like(th, 1.5)
    out = shell_to_interface(BASIS, np.zeros(BASIS.ndof), z, th, th, np.full_like(th, R))
    np.testing.assert_array_equal(out, 0.0)


def test_interface_of_radial_velocity():
    c = 0.3
    coeffs = np.zeros(BASIS.ndof)
    coeffs[BASIS.component_slice("r")] = c
    th = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    z = np.full_like(th, 1.5)
    out = shell_to_interface(BASIS, coeffs, z, th, th, np.full_like(th, 1.1))
    np.testing.assert_allclose(out, c * np.column_stack([np.cos(th), np.sin(th), 0 * th]), atol=1e-13)


def test_interface_angular_component_scales_with_radius():
    coeffs = np.zeros(BASIS.ndof)
    coeffs[BASIS.component_slice("theta")] = 1.0
    th = np.array([0.0, np.pi / 2])
    z = np.full_like(th, 1.5)
    out = shell_to_interface(BASIS, coeffs, z, th, th, np.array([1.2, 0.9]))
    np.testing.assert_allclose(out, [[0, 1.2, 0], [-0.9, 0, 0]], atol=1e-13)


def test_interface_operator_is_sparse_and_shaped():
    th = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    E = interface_operator(BASIS, np.full_like(th, 1.0), th, th, np.ones_like(th))
    assert sp.issparse(E) and E.shape == (3 * th.size, BASIS.ndof)
