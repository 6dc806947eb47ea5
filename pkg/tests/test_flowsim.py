"""Flow simulator unit tests: transmissibilities, fluxes, residual
identities, Jacobian consistency, and Newton behavior on small grids."""

import numpy as np
import numpy.testing as npt
import pytest

from gstw.flowsim import (
    BoundarySpec,
    FlowGrid,
    FlowState,
    LinearCache,
    NewtonFailure,
    PorosityLaw,
    SolverOptions,
    WellSpec,
    assemble_residual,
    compute_transmissibilities,
    phase_flux,
    solve_timestep,
    well_source_vector,
)
from gstw.fluidrock import CoreyParams, FluidProps, VanGenuchtenParams

COREY = CoreyParams()
INCOMPRESSIBLE = FluidProps()  # c_a = c_g = 0 by default


def unit_cube_grid(nx, ny, nz, perm, poro=0.2):
    ones = np.ones
    return FlowGrid(ones(nx), ones(ny), ones(nz), perm, np.full(nx * ny * nz, poro))


def no_bc(grid):
    return grid.boundary_faces(BoundarySpec(top=None))


class TestTransmissibility:
    def test_unit_cubes_unit_perm(self):
        # half-trans k*A/(d/2) = 2 each side, harmonic -> 1.0
        g = unit_cube_grid(2, 1, 1, np.array([1.0, 1.0]))
        tx, ty, tz = compute_transmissibilities(g)
        npt.assert_allclose(tx, [1.0], rtol=1e-15)
        assert ty.size == 0 and tz.size == 0

    def test_harmonic_mean_heterogeneous(self):
        g = unit_cube_grid(2, 1, 1, np.array([1.0, 3.0]))
        tx = compute_transmissibilities(g)[0]
        npt.assert_allclose(tx, [1.5], rtol=1e-15)

    def test_zero_perm_blocks_face(self):
        g = unit_cube_grid(2, 1, 1, np.array([0.0, 3.0]))
        assert compute_transmissibilities(g)[0][0] == 0.0

    def test_anisotropic_geometry(self):
        # dx=2, dy=3, dz=4: x-face area 12, half-trans k*12/1
        g = FlowGrid([2.0, 2.0], [3.0], [4.0], np.array([1.0, 1.0]), [0.2, 0.2])
        npt.assert_allclose(compute_transmissibilities(g)[0], [6.0], rtol=1e-15)

    def test_boundary_half_transmissibility(self):
        g = unit_cube_grid(1, 1, 1, np.array([2.0]))
        bnd = g.boundary_faces(BoundarySpec(top=None, xmin=1e5))
        # k*A/(dx/2) = 2*1/0.5
        npt.assert_allclose(bnd.trans, [4.0], rtol=1e-15)
        assert bnd.dz[0] == 0.0

    def test_degenerate_geometry_rejected(self):
        with pytest.raises(ValueError):
            FlowGrid([1.0, -1.0], [1.0], [1.0], np.ones(2), np.full(2, 0.2))


class TestPhaseFlux:
    def test_hand_value_no_gravity(self):
        # T=1 m^3, dp=1e5, upstream S=0.45: kr_g=0.25, kr_a=0.0625
        f_a, f_g = phase_flux(
            1.0, 2e5, 1e5, 0.45, 0.2, 0.0, 0.0, INCOMPRESSIBLE, COREY
        )
        npt.assert_allclose(f_g, 3.457142857142857e11, rtol=1e-12)
        npt.assert_allclose(f_a, 1.433139534883721e10, rtol=1e-12)

    def test_antisymmetry_under_orientation_flip(self):
        rng = np.random.default_rng(7)
        n = 64
        t = rng.uniform(1e-12, 1e-10, n)
        pl = rng.uniform(1e7, 3e7, n)
        pr = rng.uniform(1e7, 3e7, n)
        sl = rng.uniform(0.0, 0.9, n)
        sr = rng.uniform(0.0, 0.9, n)
        zl = rng.uniform(0, 2000, n)
        zr = rng.uniform(0, 2000, n)
        pcm = VanGenuchtenParams(p0=1e4, p_max=5e6)
        fluids = FluidProps(c_a=4.5e-10, c_g=8e-9)
        f_a, f_g = phase_flux(t, pl, pr, sl, sr, zl, zr, fluids, COREY, pcm)
        b_a, b_g = phase_flux(t, pr, pl, sr, sl, zr, zl, fluids, COREY, pcm)
        npt.assert_allclose(f_a, -b_a, rtol=1e-13)
        npt.assert_allclose(f_g, -b_g, rtol=1e-13)

    def test_zero_at_equal_potential(self):
        f_a, f_g = phase_flux(1e-11, 2e7, 2e7, 0.5, 0.3, 100.0, 100.0,
                              INCOMPRESSIBLE, COREY)
        assert f_a == 0.0 and f_g == 0.0

    def test_no_gas_flux_from_gas_free_upstream(self):
        # left cell has S_g = 0 and is upstream: kr_g(0) = 0
        f_a, f_g = phase_flux(1e-11, 3e7, 1e7, 0.0, 0.6, 0.0, 0.0,
                              INCOMPRESSIBLE, COREY)
        assert f_g == 0.0 and f_a > 0.0

    def test_gravity_segregation_direction(self):
        # water-hydrostatic column: water is static, buoyant gas rises
        p_top, dz = 2e7, 10.0
        p_bot = p_top + 986.0 * 9.81 * dz
        fa, fg = phase_flux(1e-11, p_top, p_bot, 0.5, 0.5, 100.0, 110.0,
                            INCOMPRESSIBLE, COREY)
        assert fg < 0.0  # gas flows upward (deep -> shallow)
        assert abs(fa) < 1e-10 * abs(fg)  # water static up to roundoff


class TestWells:
    def test_kh_allocation(self):
        g = FlowGrid([10.0], [10.0], [10.0, 10.0],
                     np.array([2e-13, 1e-13]), np.full(2, 0.2))
        q = well_source_vector(g, [WellSpec(0, 0, 0, 1, 30.0)])
        npt.assert_allclose(q, [20.0, 10.0], rtol=1e-15)

    def test_zero_kh_rejected(self):
        g = unit_cube_grid(1, 1, 1, np.zeros(1))
        with pytest.raises(ValueError):
            well_source_vector(g, [WellSpec(0, 0, 0, 0, 30.0)])

    def test_negative_rate_rejected(self):
        with pytest.raises(ValueError):
            WellSpec(0, 0, 0, 0, -1.0)


class TestResidual:
    def test_single_cell_injection_identity(self):
        # q*dt mass into a fixed-rho, fixed-phi cell: the gas equation
        # vanishes exactly at dS = q*dt/(phi*V*rho_g)
        g = FlowGrid([10.0], [10.0], [10.0], np.array([1e-13]), [0.2])
        law = PorosityLaw.frozen(np.array([0.2]))
        q, dt = 5.0, 1000.0
        ds = q * dt / (0.2 * 1000.0 * 484.0)
        old = FlowState(p=np.array([2e7]), s=np.array([0.3]))
        new = FlowState(p=np.array([2e7]), s=np.array([0.3 + ds]))
        r, _ = assemble_residual(
            g, old, new, dt, law, np.array([0.2]), np.array([q]),
            no_bc(g), INCOMPRESSIBLE, COREY, None,
        )
        assert abs(r[0]) < 1e-7
        # displaced water mass shows up in the aqueous equation
        npt.assert_allclose(r[1], -10185.950413223141, rtol=1e-12)

    def test_two_cell_antisymmetric_transfer(self):
        # no wells: whatever leaves one cell enters the other exactly
        g = unit_cube_grid(2, 1, 1, np.full(2, 1e-13))
        law = PorosityLaw.frozen(np.full(2, 0.2))
        old = FlowState(p=np.array([2e7, 2e7]), s=np.array([0.4, 0.1]))
        new = FlowState(p=np.array([2.1e7, 1.9e7]), s=np.array([0.35, 0.15]))
        r, _ = assemble_residual(
            g, old, new, 100.0, law, np.full(2, 0.2), np.zeros(2),
            no_bc(g), INCOMPRESSIBLE, COREY, None,
        )
        assert abs(r[0] + r[2]) < 1e-9 * max(abs(r[0]), 1.0)
        assert abs(r[1] + r[3]) < 1e-9 * max(abs(r[1]), 1.0)

    def test_out_of_bounds_state_rejected(self):
        g = unit_cube_grid(1, 1, 1, np.array([1e-13]))
        law = PorosityLaw.frozen(np.array([0.2]))
        bad = FlowState(p=np.array([2e7]), s=np.array([1.2]))
        with pytest.raises(ValueError):
            assemble_residual(
                g, bad, bad, 1.0, law, np.array([0.2]), np.zeros(1),
                no_bc(g), INCOMPRESSIBLE, COREY, None,
            )


class TestJacobian:
    def test_matches_finite_differences(self):
        # full physics: gravity, capillarity, compressibility, wells,
        # top + lateral pressure boundaries
        rng = np.random.default_rng(42)
        g = FlowGrid([50.0, 60.0, 70.0], [40.0, 45.0], [10.0, 12.0],
                     rng.uniform(1e-13, 5e-13, 12), np.full(12, 0.2))
        pcm = VanGenuchtenParams(p0=1e4, p_max=5e6)
        fluids = FluidProps(c_a=4.5e-10, c_g=8e-9, p_ref=2e7)
        law = PorosityLaw(
            phi_ref=np.full(12, 0.2),
            pe_ref=np.full(12, 2e7),
            slope=np.full(12, 3e-11),
        )
        bnd = g.boundary_faces(BoundarySpec(top=1e5, xmax=2.2e7))
        wells_q = well_source_vector(g, [WellSpec(0, 0, 0, 1, 3.0)])
        p0 = 2e7 + 9000.0 * g.z_center + rng.uniform(-1e4, 1e4, 12)
        s0 = rng.uniform(0.12, 0.38, 12)
        old = FlowState(p=p0 - 5e4, s=np.clip(s0 - 0.02, 0, 1))
        phi_old = np.full(12, 0.2)
        dt = 1e4

        def resid(x):
            st = FlowState(p=x[0::2].copy(), s=x[1::2].copy())
            r, _ = assemble_residual(
                g, old, st, dt, law, phi_old, wells_q, bnd,
                fluids, COREY, pcm,
            )
            return r

        x0 = np.empty(24)
        x0[0::2], x0[1::2] = p0, s0
        _, jac = assemble_residual(
            g, old, FlowState(p=p0, s=s0), dt, law, phi_old, wells_q, bnd,
            fluids, COREY, pcm, want_jac=True,
        )
        jd = jac.toarray()
        # h small enough that no face potential changes sign inside the
        # stencil (upwinding is only piecewise smooth)
        for j in range(24):
            h = 1.0 if j % 2 == 0 else 1e-6
            xp, xm = x0.copy(), x0.copy()
            xp[j] += h
            xm[j] -= h
            col_fd = (resid(xp) - resid(xm)) / (2 * h)
            denom = max(np.abs(jd[:, j]).max(), 1e-30)
            assert np.abs(jd[:, j] - col_fd).max() < 3e-5 * denom, f"col {j}"


class TestSolveTimestep:
    def test_single_phase_linear_pressure_profile(self):
        # fixed-pressure ends, uniform k: cell pressures interpolate the
        # boundary drop linearly at cell centers
        nx = 20
        g = FlowGrid(np.ones(nx), [1.0], [1.0], np.full(nx, 2e-13),
                     np.full(nx, 0.2))
        law = PorosityLaw.frozen(np.full(nx, 0.2))
        bnd = g.boundary_faces(BoundarySpec(top=None, xmin=2e6, xmax=1e6))
        old = FlowState(p=np.full(nx, 1.5e6), s=np.zeros(nx))
        st, stats = solve_timestep(
            g, old, np.full(nx, 0.2), 1e4, law, np.zeros(nx), bnd,
            INCOMPRESSIBLE, COREY,
        )
        p_exact = 2e6 - 5e4 * (np.arange(nx) + 0.5)
        npt.assert_allclose(st.p, p_exact, rtol=1e-10)
        assert st.s.max() < 1e-12  # no spurious gas, up to LU roundoff
        assert stats.iterations <= 2

    def test_hydrostatic_equilibrium_is_fixed_point(self):
        nz = 6
        g = FlowGrid([10.0], [10.0], np.full(nz, 10.0),
                     np.full(nz, 2e-13), np.full(nz, 0.2))
        law = PorosityLaw.frozen(np.full(nz, 0.2))
        bnd = g.boundary_faces(BoundarySpec())  # top at atmospheric
        p0 = 101325.0 + 986.0 * 9.81 * g.z_center
        old = FlowState(p=p0, s=np.zeros(nz))
        st, stats = solve_timestep(
            g, old, np.full(nz, 0.2), 1e6, law, np.zeros(nz), bnd,
            INCOMPRESSIBLE, COREY, VanGenuchtenParams(),
        )
        npt.assert_array_equal(st.p, p0)
        assert stats.iterations == 0

    def test_injection_front_monotone_and_conservative(self):
        # 1D horizontal displacement: upwinding keeps the profile
        # monotone and saturations in bounds; closed inlet means total
        # gas in place equals injected mass
        nx = 40
        g = FlowGrid(np.full(nx, 5.0), [10.0], [10.0],
                     np.full(nx, 3e-13), np.full(nx, 0.25))
        law = PorosityLaw.frozen(np.full(nx, 0.25))
        bnd = g.boundary_faces(BoundarySpec(top=None, xmax=1.5e7))
        wells_q = well_source_vector(g, [WellSpec(0, 0, 0, 0, 0.2)])
        state = FlowState(p=np.full(nx, 1.5e7), s=np.zeros(nx))
        phi = np.full(nx, 0.25)
        cache = LinearCache()
        dt, n_steps = 2e5, 10  # front stays well inside the domain
        for _ in range(n_steps):
            state, stats = solve_timestep(
                g, state, phi, dt, law, wells_q, bnd,
                INCOMPRESSIBLE, COREY, cache=cache,
            )
        assert np.all(state.s >= 0.0) and np.all(state.s <= 1.0)
        assert np.all(np.diff(state.s) <= 1e-10)
        assert state.s[-5:].max() < 1e-20  # no breakthrough
        m_gas = float(np.sum(g.volume * phi * 484.0 * state.s))
        m_inj = 0.2 * dt * n_steps
        npt.assert_allclose(m_gas, m_inj, rtol=1e-8)

    def test_lu_reuse_on_warm_restart(self):
        # re-solving the same step from its own solution with a slightly
        # perturbed source (the coupling-loop pattern) must reuse the
        # cached factorization instead of refactoring
        nx = 40
        g = FlowGrid(np.full(nx, 5.0), [10.0], [10.0],
                     np.full(nx, 3e-13), np.full(nx, 0.25))
        law = PorosityLaw.frozen(np.full(nx, 0.25))
        bnd = g.boundary_faces(BoundarySpec(top=None, xmax=1.5e7))
        wells_q = well_source_vector(g, [WellSpec(0, 0, 0, 0, 0.2)])
        old = FlowState(p=np.full(nx, 1.5e7), s=np.zeros(nx))
        phi = np.full(nx, 0.25)
        cache = LinearCache()
        st1, _ = solve_timestep(
            g, old, phi, 2e5, law, wells_q, bnd,
            INCOMPRESSIBLE, COREY, cache=cache,
        )
        st2, stats = solve_timestep(
            g, old, phi, 2e5, law, wells_q * 1.001, bnd,
            INCOMPRESSIBLE, COREY, cache=cache, state_init=st1,
        )
        assert stats.refactorizations == 0
        assert stats.iterations <= 4
        npt.assert_allclose(st2.s[0], st1.s[0], rtol=2e-3)

    def test_impossible_closed_cell_raises(self):
        # incompressible fluids, sealed single cell, nonzero injection:
        # no solution exists, Newton must give up cleanly
        g = FlowGrid([10.0], [10.0], [10.0], np.array([1e-13]), [0.2])
        law = PorosityLaw.frozen(np.array([0.2]))
        cache = LinearCache()
        with pytest.raises(NewtonFailure):
            solve_timestep(
                g, FlowState(p=np.array([2e7]), s=np.array([0.1])),
                np.array([0.2]), 1e4, law, np.array([1.0]), no_bc(g),
                INCOMPRESSIBLE, COREY, cache=cache,
            )
        assert cache.lu is None  # cache dropped on failure

    def test_nonpositive_dt_rejected(self):
        g = unit_cube_grid(1, 1, 1, np.array([1e-13]))
        law = PorosityLaw.frozen(np.array([0.2]))
        with pytest.raises(ValueError):
            solve_timestep(
                g, FlowState(p=np.array([2e7]), s=np.array([0.1])),
                np.array([0.2]), 0.0, law, np.zeros(1), no_bc(g),
                INCOMPRESSIBLE, COREY,
            )


class TestPorosityLaw:
    def test_frozen_is_constant(self):
        law = PorosityLaw.frozen(np.array([0.25]))
        npt.assert_array_equal(law.phi(np.array([5e7])), [0.25])

    def test_affine_slope(self):
        law = PorosityLaw(
            phi_ref=np.array([0.2]), pe_ref=np.array([1e7]),
            slope=np.array([1e-10]),
        )
        npt.assert_allclose(law.phi(np.array([2e7])), [0.2 + 1e-10 * 1e7])
