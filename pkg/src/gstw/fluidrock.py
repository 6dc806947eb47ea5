"""Constitutive closures: Corey relative permeability, Van Genuchten
capillary pressure, constant fluid properties, composite density.

All functions are elementwise over numpy arrays (scalars work too) and
each closure comes with its saturation derivative, which the fully
implicit flow solver needs for its analytic Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CoreyParams:
    """Corey relative-permeability parameters (unit endpoint scaling)."""

    s_ar: float = 0.11  # irreducible aqueous saturation
    s_gr: float = 0.01  # residual gas saturation
    n_a: float = 4.0
    n_g: float = 2.0

    def __post_init__(self):
        if self.s_ar < 0 or self.s_gr < 0 or self.s_ar + self.s_gr >= 1:
            raise ValueError(f"bad residual saturations {self.s_ar}, {self.s_gr}")
        if self.n_a < 1 or self.n_g < 1:
            raise ValueError("Corey exponents must be >= 1")


@dataclass(frozen=True)
class VanGenuchtenParams:
    """Van Genuchten capillary pressure p_c(S_g), capped at p_max.

    eps_s floors the effective wetting saturation to avoid the
    S_e -> 0 singularity; p0 sets the curve strength.
    """

    lam: float = 0.254
    s_ar: float = 0.11
    p_max: float = 12_500.0  # Pa
    p0: float = 125.0  # Pa
    eps_s: float = 1e-3

    def __post_init__(self):
        if not 0 < self.lam < 1:
            raise ValueError(f"lambda must be in (0,1), got {self.lam}")
        if self.p_max <= 0 or self.p0 <= 0:
            raise ValueError("p_max and p0 must be positive")


@dataclass(frozen=True)
class FluidProps:
    """Constant-property immiscible fluids (values at in-situ conditions).

    Densities follow the linearized law rho(p) = rho_ref*(1 + c*(p - p_ref));
    the default compressibilities are zero (incompressible).
    """

    rho_a: float = 986.0  # kg/m3 (aqueous)
    rho_g: float = 484.0  # kg/m3 (gaseous CO2 at ~136 bar)
    mu_a: float = 0.43e-3  # Pa s
    mu_g: float = 0.035e-3  # Pa s
    c_a: float = 0.0  # 1/Pa
    c_g: float = 0.0  # 1/Pa
    p_ref: float = 136e5  # Pa

    def __post_init__(self):
        if min(self.rho_a, self.rho_g, self.mu_a, self.mu_g) <= 0:
            raise ValueError("densities and viscosities must be positive")
        if self.c_a < 0 or self.c_g < 0:
            raise ValueError("compressibilities must be >= 0")

    def density(self, phase: str, p):
        rho0 = self.rho_a if phase == "a" else self.rho_g
        c = self.c_a if phase == "a" else self.c_g
        if c == 0.0:
            return rho0 * np.ones_like(np.asarray(p, dtype=float))
        return rho0 * (1.0 + c * (np.asarray(p, dtype=float) - self.p_ref))

    def ddensity_dp(self, phase: str, p):
        rho0 = self.rho_a if phase == "a" else self.rho_g
        c = self.c_a if phase == "a" else self.c_g
        return rho0 * c * np.ones_like(np.asarray(p, dtype=float))


def relperm(s_g, p: CoreyParams):
    """Return (kr_a, kr_g) for gas saturation s_g."""
    s_g = np.asarray(s_g, dtype=float)
    span = 1.0 - p.s_ar - p.s_gr
    se_a = np.clip((1.0 - s_g - p.s_ar) / span, 0.0, 1.0)
    se_g = np.clip((s_g - p.s_gr) / span, 0.0, 1.0)
    return se_a**p.n_a, se_g**p.n_g


def relperm_deriv(s_g, p: CoreyParams):
    """Return (dkr_a/dS_g, dkr_g/dS_g); zero where the clamp is active."""
    s_g = np.asarray(s_g, dtype=float)
    span = 1.0 - p.s_ar - p.s_gr
    raw_a = (1.0 - s_g - p.s_ar) / span
    raw_g = (s_g - p.s_gr) / span
    se_a = np.clip(raw_a, 0.0, 1.0)
    se_g = np.clip(raw_g, 0.0, 1.0)
    in_a = (raw_a > 0.0) & (raw_a < 1.0)
    in_g = (raw_g > 0.0) & (raw_g < 1.0)
    dkr_a = np.where(in_a, -p.n_a * se_a ** (p.n_a - 1.0) / span, 0.0)
    dkr_g = np.where(in_g, p.n_g * se_g ** (p.n_g - 1.0) / span, 0.0)
    return dkr_a, dkr_g


def _effective_wetting(s_g, p: VanGenuchtenParams):
    return np.clip((1.0 - s_g - p.s_ar) / (1.0 - p.s_ar), p.eps_s, 1.0)


def capillary_pressure(s_g, p: VanGenuchtenParams):
    """p_c = min(p_max, p0*(S_e^(-1/lam) - 1)^(1-lam)), S_e floored."""
    se = _effective_wetting(np.asarray(s_g, dtype=float), p)
    inner = np.maximum(se ** (-1.0 / p.lam) - 1.0, 0.0)
    return np.minimum(p.p_max, p.p0 * inner ** (1.0 - p.lam))


def capillary_pressure_deriv(s_g, p: VanGenuchtenParams):
    """dp_c/dS_g; zero on the p_max cap and where the S_e clamp binds."""
    s_g = np.asarray(s_g, dtype=float)
    raw = (1.0 - s_g - p.s_ar) / (1.0 - p.s_ar)
    se = np.clip(raw, p.eps_s, 1.0)
    inner = se ** (-1.0 / p.lam) - 1.0
    interior = (raw > p.eps_s) & (raw < 1.0) & (inner > 0.0)
    inner_s = np.where(inner > 0.0, inner, 1.0)  # avoid 0**negative
    dpc_dse = (
        p.p0
        * (1.0 - p.lam)
        * inner_s ** (-p.lam)
        * (-1.0 / p.lam)
        * se ** (-1.0 / p.lam - 1.0)
    )
    capped = p.p0 * inner_s ** (1.0 - p.lam) >= p.p_max
    dse_dsg = -1.0 / (1.0 - p.s_ar)
    return np.where(interior & ~capped, dpc_dse * dse_dsg, 0.0)


def composite_density(phi, s_g, fluids: FluidProps, rho_rock: float):
    """Bulk density: rho_m = phi*(S_a*rho_a + S_g*rho_g) + (1-phi)*rho_rock."""
    phi = np.asarray(phi, dtype=float)
    s_g = np.asarray(s_g, dtype=float)
    fluid = (1.0 - s_g) * fluids.rho_a + s_g * fluids.rho_g
    return phi * fluid + (1.0 - phi) * rho_rock


def equivalent_pore_pressure(p_g, s_g, pc_model: VanGenuchtenParams | None = None):
    """Saturation-weighted pore pressure p_e = S_g*p_g + (1-S_g)*p_a.

    With p_a = p_g - p_c(S_g) this is p_g - (1-S_g)*p_c(S_g); a None
    capillary model means p_c = 0 and p_e = p_g.
    """
    p_g = np.asarray(p_g, dtype=float)
    s_g = np.asarray(s_g, dtype=float)
    if pc_model is None:
        return p_g.copy()
    return p_g - (1.0 - s_g) * capillary_pressure(s_g, pc_model)
