"""Fixed-stress sequential coupling of flow and mechanics.

The forward map: embed an aquifer geomodel into the full simulation
domain (overburden above, bedrock below, coarsening surround laterally),
march the two-phase flow and linear poroelasticity in time with
fixed-stress splitting, and sample aquifer pressure/saturation plus
surface uplift at the report times.

Within a time step the loop is: solve flow with porosity an affine
function of equivalent pore pressure at frozen volumetric stress, solve
mechanics for total displacement since t=0, update the volumetric
stress, repeat until the porosity update is consistent between the two
solvers.  The porosity stored for the next step is the one the flow
solve actually used, which keeps step-to-step mass accounting exact;
the coupling tolerance bounds its mismatch with the mechanics-updated
value.

Everything is deterministic: identical inputs give bit-identical
results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flowsim import (
    MD_TO_M2,
    BoundarySpec,
    FlowGrid,
    FlowState,
    LinearCache,
    NewtonFailure,
    PorosityLaw,
    SimulationError,
    SolverOptions,
    WellSpec,
    solve_timestep,
    well_source_vector,
)
from .fluidrock import (
    CoreyParams,
    FluidProps,
    VanGenuchtenParams,
    composite_density,
    equivalent_pore_pressure,
)
from .geomech import (
    ElasticProps,
    MechMesh,
    assemble_loads,
    assemble_system,
    solve_displacement,
    surface_vertical_displacement,
    volumetric_stress,
)
from .geomodel import GeoModel

DAY_SECONDS = 86_400.0
YEAR_SECONDS = 365.25 * DAY_SECONDS


class CouplingFailure(Exception):
    """Fixed-stress loop did not converge; signals a time-step cut."""


@dataclass(frozen=True)
class RegionProps:
    """Fixed rock properties for a non-aquifer region."""

    perm_md: float
    poro: float
    e_mod: float


@dataclass(frozen=True)
class DomainSpec:
    """Full-domain geometry and region properties.

    The aquifer block sits laterally centered between surround rings
    (sizes listed nearest-aquifer first) with overburden layers above
    (listed top-down) and bedrock below.
    """

    aquifer_shape: tuple[int, int, int] = (16, 16, 4)
    aquifer_cell: tuple[float, float, float] = (500.0, 500.0, 30.0)
    surround_sizes: tuple[float, ...] = (400.0, 800.0, 1600.0, 3200.0)
    overburden_sizes: tuple[float, ...] = (736.0, 368.0, 184.0, 92.0)
    bedrock_sizes: tuple[float, ...] = (200.0, 300.0)
    overburden: RegionProps = RegionProps(1e-7, 0.3, 1e9)
    surround: RegionProps = RegionProps(300.0, 0.3, 5e9)
    bedrock: RegionProps = RegionProps(1e-7, 0.3, 50e9)
    aquifer_e_mod: float = 5e9
    nu: float = 0.2
    biot: float = 1.0
    rho_rock: float = 2650.0
    p_atm: float = 101_325.0

    def axis_sizes(self):
        nx, ny, nz = self.aquifer_shape
        ring = tuple(reversed(self.surround_sizes))
        dxs = ring + (self.aquifer_cell[0],) * nx + self.surround_sizes
        dys = ring + (self.aquifer_cell[1],) * ny + self.surround_sizes
        dzs = (
            self.overburden_sizes
            + (self.aquifer_cell[2],) * nz
            + self.bedrock_sizes
        )
        return np.array(dxs), np.array(dys), np.array(dzs)

    @property
    def aquifer_offsets(self):
        return (
            len(self.surround_sizes),
            len(self.surround_sizes),
            len(self.overburden_sizes),
        )

    def full_shape(self):
        dxs, dys, dzs = self.axis_sizes()
        return len(dxs), len(dys), len(dzs)


# region codes in the full-domain map
AQUIFER, OVERBURDEN, SURROUND, BEDROCK = 0, 1, 2, 3


@dataclass(frozen=True)
class CoupledConfig:
    """Schedule, wells, and coupling controls for one forward run."""

    domain: DomainSpec = DomainSpec()
    report_times_years: tuple[float, ...] = (
        0.5, 2.0, 5.0, 8.0, 11.0, 15.0, 19.0, 23.0, 27.0, 30.0,
    )
    wells_aquifer_ij: tuple[tuple[int, int], ...] = (
        (4, 4), (4, 11), (11, 4), (11, 11),
    )
    well_rate_kg_s: float = 30.0
    dt_init: float = 5.0 * DAY_SECONDS
    dt_max: float = YEAR_SECONDS
    dt_min: float = 0.01 * DAY_SECONDS
    dt_growth: float = 1.5
    coupling_tol: float = 1e-6
    max_coupling_iters: int = 25
    coupling: bool = True
    g: float = 9.81
    fluids: FluidProps = FluidProps()
    corey: CoreyParams = CoreyParams()
    pc_model: VanGenuchtenParams | None = VanGenuchtenParams()

    def __post_init__(self):
        rt = self.report_times_years
        if len(rt) == 0:
            raise ValueError("report times must be non-empty")
        if any(b <= a for a, b in zip(rt, rt[1:])) or rt[0] <= 0:
            raise ValueError("report times must be positive and increasing")
        if self.coupling_tol <= 0 or self.max_coupling_iters < 1:
            raise ValueError("bad coupling controls")

    @property
    def report_seconds(self):
        return tuple(t * YEAR_SECONDS for t in self.report_times_years)


@dataclass(frozen=True)
class SimulationResult:
    """Report-time samples: aquifer pressure/saturation and uplift."""

    p_s: np.ndarray  # (n_s, n_t) Pa
    s_s: np.ndarray  # (n_s, n_t)
    d_gb: np.ndarray  # (n_gb, n_t) m, uplift positive
    report_seconds: tuple[float, ...]
    aquifer_shape: tuple[int, int, int]
    footprint_shape: tuple[int, int]

    def validate(self):
        n_t = len(self.report_seconds)
        n_s = int(np.prod(self.aquifer_shape))
        n_gb = int(np.prod(self.footprint_shape))
        if self.p_s.shape != (n_s, n_t) or self.s_s.shape != (n_s, n_t):
            raise ValueError("aquifer sample shape mismatch")
        if self.d_gb.shape != (n_gb, n_t):
            raise ValueError("uplift sample shape mismatch")
        if np.any((self.s_s < 0) | (self.s_s > 1)):
            raise ValueError("saturation out of [0,1]")


@dataclass
class StepDiagnostics:
    t: float
    dt: float
    coupling_iters: int
    dphi_seq: list[float]
    newton_iters: int
    refactorizations: int
    balance_gas: float
    balance_aqueous: float
    injected_kg: float
    clamp_events: int


@dataclass
class RunDiagnostics:
    steps: list[StepDiagnostics] = field(default_factory=list)
    dt_cuts: int = 0

    @property
    def max_coupling_iters(self):
        return max((s.coupling_iters for s in self.steps), default=0)

    @property
    def worst_gas_balance(self):
        # balance relative to per-step injected (or stored) mass
        worst = 0.0
        for s in self.steps:
            scale = max(s.injected_kg, 1.0)
            worst = max(worst, abs(s.balance_gas) / scale,
                        abs(s.balance_aqueous) / scale)
        return worst


@dataclass
class CoupledCase:
    """Fully assembled forward problem (grid, mech, wells, initial state)."""

    grid: FlowGrid
    mech_mesh: MechMesh | None
    mech_system: object | None  # MechSystem; None when coupling is off
    aquifer_idx: np.ndarray
    aquifer_shape: tuple[int, int, int]
    footprint: tuple[int, int, int, int]
    wells_q: np.ndarray
    bnd: object  # boundary faces
    fluids: FluidProps
    corey: CoreyParams
    pc_model: VanGenuchtenParams | None
    phi0: np.ndarray
    p0: np.ndarray
    s0: np.ndarray
    e_mod: np.ndarray
    nu: float
    biot: float
    rho_rock: float
    g_flow: float
    g_mech: float
    top_load: float
    coupling: bool

    @property
    def k_dr(self):
        return self.e_mod / (3.0 * (1.0 - 2.0 * self.nu))


@dataclass
class CoupledState:
    """Converged state after a time step (t in seconds)."""

    t: float
    flow: FlowState
    phi: np.ndarray
    p_e: np.ndarray
    sigma_v: np.ndarray
    d: np.ndarray  # (n_nodes, 3) total displacement since t=0


@dataclass
class StepRecord:
    t: float
    p_s: np.ndarray
    s_s: np.ndarray
    d_gb: np.ndarray


def build_region_map(spec: DomainSpec) -> np.ndarray:
    nx, ny, nz = spec.full_shape()
    oi, oj, ok = spec.aquifer_offsets
    ax, ay, az = spec.aquifer_shape
    region = np.empty((nx, ny, nz), dtype=int)
    region[:, :, :ok] = OVERBURDEN
    region[:, :, ok + az :] = BEDROCK
    region[:, :, ok : ok + az] = SURROUND
    region[oi : oi + ax, oj : oj + ay, ok : ok + az] = AQUIFER
    return region


def build_desk_case(
    geomodel: GeoModel,
    config: CoupledConfig,
    mech_system=None,
) -> CoupledCase:
    """Embed a realization into the full domain described by the config.

    mech_system, which is realization-independent, can be passed in to
    reuse its cached factorization across an ensemble.
    """
    spec = config.domain
    if geomodel.grid.shape != spec.aquifer_shape:
        raise ValueError(
            f"geomodel shape {geomodel.grid.shape} != aquifer {spec.aquifer_shape}"
        )
    dxs, dys, dzs = spec.axis_sizes()
    region = build_region_map(spec)
    flat = region.ravel()

    perm_md = np.empty(flat.shape)
    poro = np.empty(flat.shape)
    e_mod = np.empty(flat.shape)
    for code, props in (
        (OVERBURDEN, spec.overburden),
        (SURROUND, spec.surround),
        (BEDROCK, spec.bedrock),
    ):
        perm_md[flat == code] = props.perm_md
        poro[flat == code] = props.poro
        e_mod[flat == code] = props.e_mod
    aq = flat == AQUIFER
    perm_md[aq] = geomodel.k_md.ravel()
    poro[aq] = geomodel.phi.ravel()
    e_mod[aq] = spec.aquifer_e_mod

    grid = FlowGrid(dxs, dys, dzs, perm_md * MD_TO_M2, poro, region=flat)
    bnd = grid.boundary_faces(BoundarySpec(top=spec.p_atm))

    oi, oj, ok = spec.aquifer_offsets
    ax, ay, az = spec.aquifer_shape
    wells = [
        WellSpec(oi + i, oj + j, ok, ok + az - 1, config.well_rate_kg_s)
        for i, j in config.wells_aquifer_ij
    ]
    if any(not (0 <= i < ax and 0 <= j < ay) for i, j in config.wells_aquifer_ij):
        raise ValueError("well outside aquifer footprint")
    wells_q = well_source_vector(grid, wells)

    aquifer_idx = np.where(aq)[0]
    p0 = spec.p_atm + config.fluids.rho_a * config.g * grid.z_center

    if config.coupling and mech_system is None:
        mesh = MechMesh.from_cell_sizes(dxs, dys, dzs)
        props = ElasticProps(e_mod=e_mod, nu=spec.nu, b=spec.biot,
                             rho_rock=spec.rho_rock)
        mech_system = assemble_system(mesh, props)
    mesh = mech_system.mesh if config.coupling else None

    return CoupledCase(
        grid=grid,
        mech_mesh=mesh,
        mech_system=mech_system if config.coupling else None,
        aquifer_idx=aquifer_idx,
        aquifer_shape=spec.aquifer_shape,
        footprint=(oi, oj, ax, ay),
        wells_q=wells_q,
        bnd=bnd,
        fluids=config.fluids,
        corey=config.corey,
        pc_model=config.pc_model,
        phi0=poro.copy(),
        p0=p0,
        s0=np.zeros(grid.n),
        e_mod=e_mod,
        nu=spec.nu,
        biot=spec.biot,
        rho_rock=spec.rho_rock,
        g_flow=config.g,
        g_mech=config.g,
        top_load=0.0,
        coupling=config.coupling,
    )


def build_terzaghi_case(
    n_cells: int = 40,
    height: float = 100.0,
    width: float = 10.0,
    e_mod: float = 5e9,
    nu: float = 0.2,
    perm_md: float = 100.0,
    phi: float = 0.2,
    load: float = 5e4,
    p_base: float = 1e5,
) -> CoupledCase:
    """1D consolidation column: sudden top load, drainage at the top,
    gravity off, single phase.  Pressure is offset by p_base so the
    solver's positive-pressure invariant holds; the analytic series
    applies to p - p_base."""
    dzs = np.full(n_cells, height / n_cells)
    grid = FlowGrid([width], [width], dzs,
                    np.full(n_cells, perm_md * MD_TO_M2),
                    np.full(n_cells, phi))
    fluids = FluidProps()  # incompressible constituents
    bnd = grid.boundary_faces(BoundarySpec(top=p_base))
    mesh = MechMesh.from_cell_sizes([width], [width], dzs)
    props = ElasticProps(e_mod=np.full(n_cells, e_mod), nu=nu, b=1.0,
                         rho_rock=2650.0)
    system = assemble_system(mesh, props)
    return CoupledCase(
        grid=grid,
        mech_mesh=mesh,
        mech_system=system,
        aquifer_idx=np.arange(n_cells),
        aquifer_shape=(1, 1, n_cells),
        footprint=(0, 0, 1, 1),
        wells_q=np.zeros(n_cells),
        bnd=bnd,
        fluids=fluids,
        corey=CoreyParams(),
        pc_model=None,
        phi0=np.full(n_cells, phi),
        p0=np.full(n_cells, p_base),
        s0=np.zeros(n_cells),
        e_mod=np.full(n_cells, e_mod),
        nu=nu,
        biot=1.0,
        rho_rock=2650.0,
        g_flow=0.0,
        g_mech=0.0,
        top_load=load,
        coupling=True,
    )


def porosity_update(phi_n, delta_p_e, delta_sigma_v, b, k_dr):
    """Fixed-stress porosity increment:
    phi = phi_n + ((b - phi_n)/K_dr)*(dp_e + dsigma_v)."""
    phi_n = np.asarray(phi_n, dtype=float)
    return phi_n + (b - phi_n) / np.asarray(k_dr, dtype=float) * (
        np.asarray(delta_p_e) + np.asarray(delta_sigma_v)
    )


class CoupledDriver:
    """Owns the per-run solver state (linear caches, initial fields)."""

    def __init__(self, case: CoupledCase, config: CoupledConfig):
        self.case = case
        self.config = config
        self.lin_cache = LinearCache()
        self.opts = SolverOptions(g=case.g_flow)
        self.p_e0 = equivalent_pore_pressure(case.p0, case.s0, case.pc_model)
        self.rho_m0 = composite_density(
            case.phi0, case.s0, case.fluids, case.rho_rock
        )

    def initial_state(self) -> CoupledState:
        case = self.case
        n_nodes = case.mech_mesh.n_nodes if case.coupling else 0
        return CoupledState(
            t=0.0,
            flow=FlowState(p=case.p0.copy(), s=case.s0.copy()),
            phi=case.phi0.copy(),
            p_e=self.p_e0.copy(),
            sigma_v=np.zeros(case.grid.n),
            d=np.zeros((n_nodes, 3)),
        )

    def _mech_response(self, p_e_new, phi_used, s_new):
        """Total displacement and volumetric stress change since t=0."""
        case = self.case
        dpe = p_e_new - self.p_e0
        drho = (
            composite_density(phi_used, s_new, case.fluids, case.rho_rock)
            - self.rho_m0
        )
        if (
            case.top_load == 0.0
            and not dpe.any()
            and (case.g_mech == 0.0 or not drho.any())
        ):
            d = np.zeros((case.mech_mesh.n_nodes, 3))
            return d, np.zeros(case.grid.n)
        f = assemble_loads(
            case.mech_system, p_e=dpe, rho_m=drho, g=case.g_mech,
            top_load=case.top_load,
        )
        d = solve_displacement(case.mech_system, f)
        sigma_v = volumetric_stress(case.mech_system, d, dpe)
        return d, sigma_v

    def fixed_stress_step(self, state: CoupledState, dt: float):
        """One backward-Euler step with fixed-stress iteration.

        Returns (new_state, StepDiagnostics); raises NewtonFailure or
        CouplingFailure to request a time-step cut.
        """
        case, cfg = self.case, self.config
        slope = (
            (case.biot - state.phi) / case.k_dr
            if case.coupling
            else np.zeros(case.grid.n)
        )
        sigma_frozen = state.sigma_v
        flow_prev = state.flow
        dphi_seq: list[float] = []
        newton_total = 0
        refac_total = 0
        clamps = 0
        max_iters = cfg.max_coupling_iters if case.coupling else 1

        for _ in range(max_iters):
            law = PorosityLaw(
                phi_ref=state.phi + slope * (sigma_frozen - state.sigma_v),
                pe_ref=state.p_e,
                slope=slope,
            )
            flow_new, stats = solve_timestep(
                case.grid, state.flow, state.phi, dt, law, case.wells_q,
                case.bnd, case.fluids, case.corey, case.pc_model,
                opts=self.opts, cache=self.lin_cache, state_init=flow_prev,
            )
            newton_total += stats.iterations
            refac_total += stats.refactorizations
            clamps += stats.clamp_events
            p_e_new = equivalent_pore_pressure(
                flow_new.p, flow_new.s, case.pc_model
            )
            phi_used = law.phi(p_e_new)

            if not case.coupling:
                new_state = CoupledState(
                    t=state.t, flow=flow_new, phi=phi_used, p_e=p_e_new,
                    sigma_v=state.sigma_v, d=state.d,
                )
                diag = StepDiagnostics(
                    t=state.t, dt=dt, coupling_iters=1, dphi_seq=[0.0],
                    newton_iters=newton_total, refactorizations=refac_total,
                    balance_gas=stats.balance_gas,
                    balance_aqueous=stats.balance_aqueous,
                    injected_kg=stats.injected_kg, clamp_events=clamps,
                )
                return new_state, diag

            d, sigma_new = self._mech_response(p_e_new, phi_used, flow_new.s)
            phi_target = porosity_update(
                state.phi, p_e_new - state.p_e, sigma_new - state.sigma_v,
                case.biot, case.k_dr,
            )
            dphi = float(
                np.max(np.abs(phi_target - phi_used) / np.maximum(phi_used, 1e-12))
            )
            dphi_seq.append(dphi)
            flow_prev = flow_new
            if dphi < cfg.coupling_tol:
                new_state = CoupledState(
                    t=state.t, flow=flow_new, phi=phi_used, p_e=p_e_new,
                    sigma_v=sigma_new, d=d,
                )
                diag = StepDiagnostics(
                    t=state.t, dt=dt, coupling_iters=len(dphi_seq),
                    dphi_seq=dphi_seq, newton_iters=newton_total,
                    refactorizations=refac_total,
                    balance_gas=stats.balance_gas,
                    balance_aqueous=stats.balance_aqueous,
                    injected_kg=stats.injected_kg, clamp_events=clamps,
                )
                return new_state, diag
            sigma_frozen = sigma_new

        raise CouplingFailure(
            f"fixed-stress loop: {max_iters} iterations, last dphi {dphi_seq[-1]:.3e}"
        )

    def record(self, state: CoupledState) -> StepRecord:
        case = self.case
        if case.coupling:
            d_gb = surface_vertical_displacement(
                case.mech_mesh, state.d, case.footprint
            ).ravel()
        else:
            i0, j0, ni, nj = case.footprint
            d_gb = np.zeros(ni * nj)
        return StepRecord(
            t=state.t,
            p_s=state.flow.p[case.aquifer_idx].copy(),
            s_s=state.flow.s[case.aquifer_idx].copy(),
            d_gb=d_gb,
        )

    def run(self, report_seconds=None):
        """March to the last report time; returns (history, diagnostics)
        where history holds a StepRecord per internal step."""
        cfg = self.config
        reports = tuple(report_seconds or cfg.report_seconds)
        state = self.initial_state()
        history: list[StepRecord] = []
        diag = RunDiagnostics()
        dt_base = cfg.dt_init

        for target in reports:
            while state.t < target:
                dt_try = min(dt_base, target - state.t)
                lands = dt_try >= target - state.t
                try:
                    new_state, sdiag = self.fixed_stress_step(state, dt_try)
                except (NewtonFailure, CouplingFailure) as err:
                    diag.dt_cuts += 1
                    dt_base = dt_try * 0.5
                    if dt_base < cfg.dt_min:
                        raise SimulationError(
                            f"dt {dt_base:.3e}s under dt_min at t={state.t:.6e}s "
                            f"after {diag.dt_cuts} cuts: {err}"
                        ) from err
                    continue
                new_state.t = target if lands else state.t + dt_try
                state = new_state
                sdiag.t = state.t
                diag.steps.append(sdiag)
                history.append(self.record(state))
                dt_base = min(dt_base * cfg.dt_growth, cfg.dt_max)
        return history, diag


def extract_report_steps(history, report_seconds, aquifer_shape,
                         footprint_shape) -> SimulationResult:
    """Exact-time sampling of the internal-step history (no interpolation)."""
    reports = tuple(report_seconds)
    if len(reports) == 0:
        raise ValueError("empty report list")
    by_t = {rec.t: rec for rec in history}
    rows = []
    for rt in reports:
        if rt not in by_t:
            raise SimulationError(f"no internal step landed on t={rt!r}s")
        rows.append(by_t[rt])
    result = SimulationResult(
        p_s=np.column_stack([r.p_s for r in rows]),
        s_s=np.column_stack([r.s_s for r in rows]),
        d_gb=np.column_stack([r.d_gb for r in rows]),
        report_seconds=reports,
        aquifer_shape=tuple(aquifer_shape),
        footprint_shape=tuple(footprint_shape),
    )
    result.validate()
    return result


def run_case(case: CoupledCase, config: CoupledConfig, report_seconds=None):
    """Run a prepared case; returns (SimulationResult, RunDiagnostics)."""
    driver = CoupledDriver(case, config)
    reports = tuple(report_seconds or config.report_seconds)
    history, diag = driver.run(reports)
    ni, nj = case.footprint[2], case.footprint[3]
    result = extract_report_steps(history, reports, case.aquifer_shape, (ni, nj))
    return result, diag


def run_hfs(geomodel: GeoModel, config: CoupledConfig, mech_system=None,
            with_diagnostics: bool = False):
    """Full forward simulation of one realization."""
    case = build_desk_case(geomodel, config, mech_system=mech_system)
    result, diag = run_case(case, config)
    return (result, diag) if with_diagnostics else result
