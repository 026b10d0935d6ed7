import numpy as np
import pytest
from scipy.interpolate import PchipInterpolator

from meshshell.diagnostics import korn_ratio
from meshshell.errors import ConfigurationError
from meshshell.fluid import (FluidGrid, FluidParams, FluidSolver, build_fluid_system,
                             divergence_residual, fluid_energy_terms, geometric_source,
                             poiseuille_profile, project_divergence_free, solve_fluid_substep,
                             symmetrized_gradient, transfer_velocity, viscous_dissipation, write_vtk)
from meshshell.geometry import AleSlabMap, BoundaryField, CylinderRef

L = 2.0


def wavy_wall(ref, amp=0.1):
    Z, T = np.meshgrid(ref.z, ref.theta, indexing="ij")
    return BoundaryField(ref.R, ref.z, ref.theta, amp * np.sin(np.pi * Z / ref.L) * (1 + 0.4 * np.cos(T)))


def grid_of(Nz=4, Nr=4, Nt=8, amp=0.1):
    ref = CylinderRef(1.0, L, Nz, Nr, Nt)
    return FluidGrid(ref, wavy_wall(ref, amp))


def test_params_validation():
    for bad in ((0.0, 1.0), (1.0, 0.0)):
        with pytest.raises(ConfigurationError):
            FluidParams(*bad)
    with pytest.raises(ConfigurationError):
        FluidParams(1.0, 1.0, c_stab=0.0)


def test_odd_theta_count_rejected():
    ref = CylinderRef(1.0, L, 4, 4, 7)
    with pytest.raises(ConfigurationError):
        FluidGrid(ref, BoundaryField.zeros(ref))


def test_volume_of_reference_cylinder():
    ref = CylinderRef(1.0, L, 3, 5, 16)
    g = FluidGrid(ref, BoundaryField.zeros(ref))
    # cells are mapped with the true angular coordinate, so the cylinder is not faceted
    assert g.volume() == pytest.approx(np.pi * L, rel=1e-12)


def test_convection_is_skew():
    g = grid_of()
    rng = np.random.default_rng(0)
    C = g.convection_matrix(rng.standard_normal((g.n_nodes, 3)), 1.3)
    for _ in range(20):
        u = rng.standard_normal(3 * g.n_nodes)
        assert abs(u @ (C @ u)) / (u @ u) <= 1e-12


def test_geometric_source_nodewise():
    g = grid_of()
    rng = np.random.default_rng(1)
    u_hat = rng.standard_normal((g.n_nodes, 3))
    d_eta = 0.05 * rng.standard_normal(g.n_nodes)
    prm = FluidParams(1.7, 0.3, convection=False)
    dt = 0.02
    with_geo = build_fluid_system(g, prm, dt, u_hat, d_eta)
    without = build_fluid_system(g, prm, dt, u_hat, None)
    src = geometric_source(with_geo)
    # (rho/2) (div s) (u_hat . test) with div s = 2 delta_eta / dt, tested against nodal masses
    expected = 0.5 * prm.rho_F * (2 * d_eta / dt)[:, None] * g.mass_weights[:, None] * u_hat
    np.testing.assert_allclose(src, expected, rtol=1e-14)
    diff = without.rhs - with_geo.rhs
    np.testing.assert_allclose(diff[:with_geo.P.shape[1]], with_geo.P.T @ src.ravel(), atol=1e-12)


def test_zero_data_zero_solution():
    g = grid_of()
    system = build_fluid_system(g, FluidParams(1.0, 0.1), 0.01)
    sol = solve_fluid_substep(system)
    np.testing.assert_array_equal(sol.U, 0.0)
    np.testing.assert_array_equal(sol.p, 0.0)


def test_steady_poiseuille_profile():
    ref = CylinderRef(1.0, L, 2, 16, 8)
    g = FluidGrid(ref, BoundaryField.zeros(ref))
    dP, mu = 4.0, 1.0
    sol = solve_fluid_substep(build_fluid_system(g, FluidParams(1.0, mu, convection=False), None,
                                                 pressures=(dP, 0.0)))
    exact = poiseuille_profile(g.cylindrical[:, 1], dP, 1.0, mu, L)
    assert np.abs(sol.U[:, 2] - exact).max() < 5e-3 * exact.max()
    assert np.abs(sol.U[:, :2]).max() < 1e-3 * exact.max()


def test_divergence_residual_small():
    g = grid_of()
    rng = np.random.default_rng(2)
    U0, _ = project_divergence_free(g, rng.standard_normal((g.n_nodes, 3)))
    system = build_fluid_system(g, FluidParams(1.0, 0.1), 0.01, U0, pressures=(1.0, 0.0))
    sol = solve_fluid_substep(system)
    assert divergence_residual(system, sol) <= 1e-8


def test_reused_factorisation_matches_direct():
    g = grid_of()
    rng = np.random.default_rng(3)
    solver = FluidSolver()
    U = np.zeros((g.n_nodes, 3))
    for k in range(4):
        system = build_fluid_system(g, FluidParams(1.0, 0.1), 0.01, U, pressures=(np.sin(k), 0.0))
        direct = solve_fluid_substep(system)
        reused = solver.solve(system)
        np.testing.assert_allclose(reused.U, direct.U, atol=1e-10 * (1 + np.abs(direct.U).max()))
        U = direct.U
    assert solver.factorizations <= 2


def test_one_step_energy_identity():
    g = grid_of()
    rng = np.random.default_rng(4)
    U0, _ = project_divergence_free(g, rng.standard_normal((g.n_nodes, 3)))
    prm = FluidParams(1.0, 0.2)
    dt = 0.05
    system = build_fluid_system(g, prm, dt, U0, None, None, (0.7, -0.2))
    sol = solve_fluid_substep(system)
    t = fluid_energy_terms(system, sol)
    E_old = prm.rho_F * np.sum(g.mass_weights[:, None] * U0 ** 2)
    lhs = t["kinetic"] + t["numdiss"] + 2 * t["viscous"] + t["stabilization"]
    assert lhs == pytest.approx(E_old + t["pressure_work"], rel=1e-10)
    assert min(t["numdiss"], t["viscous"], t["stabilization"]) >= 0


# -- symmetrised gradient and dissipation -------------------------------------------

def test_symmetrized_gradient_of_constant():
    g = grid_of()
    D = symmetrized_gradient(g, np.tile([0.3, -1.0, 2.0], (g.n_nodes, 1)))
    assert np.abs(D).max() <= 1e-13


def test_symmetrized_gradient_linear_fields():
    g = grid_of()
    z = g.points[:, 2]
    U = np.zeros((g.n_nodes, 3)); U[:, 0] = z
    D = symmetrized_gradient(g, U)
    np.testing.assert_allclose(D, np.broadcast_to([[0, 0, 0.5], [0, 0, 0], [0.5, 0, 0]], D.shape), atol=1e-12)
    U = np.zeros((g.n_nodes, 3)); U[:, 2] = z
    D = symmetrized_gradient(g, U)
    np.testing.assert_allclose(D, np.broadcast_to(np.diag([0, 0, 1.0]), D.shape), atol=1e-12)


def rotation(g):
    x = g.points
    return np.column_stack([-x[:, 1], x[:, 0], 0 * x[:, 0]])


def test_rigid_rotation_dissipation_vanishes_under_refinement():
    vals = []
    for Nt in (8, 16, 32):
        ref = CylinderRef(1.0, L, 2, 4, Nt)
        g = FluidGrid(ref, BoundaryField.zeros(ref))
        vals.append(viscous_dissipation(g, rotation(g), 1.0))
        assert np.abs(symmetrized_gradient(g, rotation(g))).max() < 2.0 * (2 * np.pi / Nt) ** 2
    assert vals[0] > vals[1] > vals[2]
    assert vals[1] / vals[2] > 3.0


def test_zero_velocity_zero_dissipation():
    g = grid_of()
    assert viscous_dissipation(g, np.zeros((g.n_nodes, 3)), 1.0) == 0.0


def test_poiseuille_dissipation_against_analytic():
    dP, mu, R = 4.0, 0.5, 1.0
    analytic = np.pi * dP ** 2 * R ** 4 / (8 * mu * L)
    errs = []
    for Nr, Nt in ((8, 16), (16, 32), (32, 64)):
        ref = CylinderRef(R, L, 2, Nr, Nt)
        g = FluidGrid(ref, BoundaryField.zeros(ref))
        U = np.zeros((g.n_nodes, 3))
        U[:, 2] = poiseuille_profile(g.cylindrical[:, 1], dP, R, mu, L)
        errs.append(abs(viscous_dissipation(g, U, mu) - analytic) / analytic)
    assert errs[-1] < 1e-2
    assert errs[0] > errs[1] > errs[2]


def test_korn_ratio_bounded_on_deformed_sequence():
    rng = np.random.default_rng(5)
    ratios = []
    for n in (4, 8):
        g = grid_of(Nz=n, Nr=n, Nt=2 * n, amp=0.15)
        U, _ = project_divergence_free(g, rng.standard_normal((g.n_nodes, 3)))
        ratios.append(korn_ratio(g, U))
    assert all(1.0 <= r < 10.0 for r in ratios)


# -- velocity transfer -------------------------------------------------------------------

def test_transfer_identity_for_static_wall():
    g = grid_of()
    U = np.random.default_rng(6).standard_normal((g.n_nodes, 3))
    out = transfer_velocity(U, g, g, AleSlabMap(g.wall, g.wall, 0.1))
    np.testing.assert_allclose(out, U, atol=1e-13)


def test_transfer_is_nodal_identity_under_radial_scaling():
    # the slab map sends each new node onto the old node of the same (i, j, k)
    ref = CylinderRef(1.0, L, 3, 5, 8)
    old = FluidGrid(ref, wavy_wall(ref, 0.05))
    new = FluidGrid(ref, wavy_wall(ref, 0.12))
    U = np.random.default_rng(7).standard_normal((old.n_nodes, 3))
    out = transfer_velocity(U, old, new, AleSlabMap(new.wall, old.wall, 0.1))
    np.testing.assert_allclose(out, U, atol=1e-12)


def test_pchip_line_transfer_off_nodes():
    # a slab whose old wall is 0.95 of the grid's wall sends ring j to rho_j * 0.95, between rings
    ref = CylinderRef(1.0, L, 3, 5, 8)
    old = FluidGrid(ref, wavy_wall(ref, 0.05))
    new = FluidGrid(ref, wavy_wall(ref, 0.12))
    target = BoundaryField(1.0, ref.z, ref.theta, 0.95 * old.wall.radius - 1.0)
    U = np.random.default_rng(8).standard_normal((old.n_nodes, 3))
    out = transfer_velocity(U, old, new, AleSlabMap(new.wall, target, 0.1)).reshape(old.Nz, old.Nr, old.Nt, 3)
    Uo = U.reshape(old.Nz, old.Nr, old.Nt, 3)
    for i in range(old.Nz):
        for k in range(old.Nt):
            f = PchipInterpolator(old.rho, Uo[i, :, k], axis=0, extrapolate=True)
            np.testing.assert_allclose(out[i, :, k], f(0.95 * old.rho), atol=1e-12)


# -- output ---------------------------------------------------------------------------------

def test_vtk_file_layout(tmp_path):
    g = grid_of()
    path = tmp_path / "f.vtk"
    write_vtk(path, g, np.zeros((g.n_nodes, 3)), np.arange(g.n_nodes, dtype=float))
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# vtk DataFile")
    assert f"DIMENSIONS {g.Nt} {g.Nr} {g.Nz}" in lines
    assert f"POINTS {g.n_nodes} double" in lines
    assert len(lines) == 6 + g.n_nodes + 2 + g.n_nodes + 2 + g.n_nodes
