"""Single-cell electrochemical model: two representative spherical particles,
a three-region 1-D electrolyte, kinetic/ohmic overpotentials, and terminal
voltage.

The same finite-volume kernels drive both this per-cell API and the stacked
module simulation; cells of a module are batched along the first array axis.
Current sign convention: discharge positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import _kernels as K
from .constants import FARADAY
from .params import CellParameters, ConfigError

__all__ = [
    "Discretization",
    "DEFAULT_DISCRETIZATION",
    "FAST_DISCRETIZATION",
    "CellState",
    "VoltageBreakdown",
    "StackedParams",
    "build_stacked_params",
    "initial_cell_state",
    "step_cell",
    "cell_voltage",
    "soc_of",
    "total_solid_moles",
    "electrolyte_moles",
    "StepError",
]


class StepError(RuntimeError):
    """Raised when a state update produces non-finite values after retries."""


@dataclass(frozen=True)
class Discretization:
    """Grid resolution: radial shells per particle and electrolyte volumes."""

    n_r: int = 10
    n_x_anode: int = 10
    n_x_sep: int = 5
    n_x_cathode: int = 10

    def __post_init__(self):
        for name in ("n_r", "n_x_anode", "n_x_sep", "n_x_cathode"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 2:
                raise ConfigError(f"{name} must be an integer >= 2, got {v!r}")

    @property
    def n_x(self) -> int:
        return self.n_x_anode + self.n_x_sep + self.n_x_cathode


DEFAULT_DISCRETIZATION = Discretization()
FAST_DISCRETIZATION = Discretization(n_r=5, n_x_anode=5, n_x_sep=3, n_x_cathode=5)


@dataclass(frozen=True)
class CellState:
    """Evolving state of one cell: shell/electrolyte concentrations [mol/m^3],
    surface temperature [K], SEI film resistance [ohm], and bookkeeping SOC."""

    c_s_n: np.ndarray
    c_s_p: np.ndarray
    c_e: np.ndarray
    t_cell: float
    r_sei: float
    soc: float

    def __post_init__(self):
        for name in ("c_s_n", "c_s_p", "c_e"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=float))
            if arr.ndim != 1 or arr.size < 2:
                raise ConfigError(f"{name} must be a 1-D array with >= 2 entries")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class VoltageBreakdown:
    """Terminal-voltage decomposition; the identity
    v_cell = u_p + eta_p - u_n - eta_n + dphi_e - ohmic holds by construction."""

    u_p: float
    u_n: float
    eta_p: float
    eta_n: float
    dphi_e: float
    ohmic: float
    v_cell: float

    def __post_init__(self):
        ident = self.u_p + self.eta_p - self.u_n - self.eta_n + self.dphi_e - self.ohmic
        if not math.isclose(ident, self.v_cell, rel_tol=0.0, abs_tol=1e-12):
            raise AssertionError(
                f"voltage breakdown identity violated: {ident} != {self.v_cell}"
            )


class StackedParams:
    """Read-only per-cell parameter arrays batched for the kernels."""

    def __init__(self, cells: Sequence[CellParameters], disc: Discretization):
        cells = tuple(cells)
        if not cells:
            raise ConfigError("need at least one cell")
        first = cells[0]
        for i, c in enumerate(cells):
            if c.ocp_n != first.ocp_n or c.ocp_p != first.ocp_p:
                raise ConfigError(
                    f"cells[{i}] uses different OCP tables; modules are single-chemistry"
                )
        self.cells = cells
        self.disc = disc
        n = len(cells)
        p = np.zeros((n, K.N_PARAM_SLOTS))
        for b, c in enumerate(cells):
            p[b, K.P_EPS_N] = c.eps_s_n
            p[b, K.P_EPS_P] = c.eps_s_p
            p[b, K.P_CSMAX_N] = c.c_s_max_n
            p[b, K.P_CSMAX_P] = c.c_s_max_p
            p[b, K.P_RCELL] = c.r_cell
            p[b, K.P_AREA] = c.area
            p[b, K.P_L_N] = c.l_n
            p[b, K.P_L_SEP] = c.l_sep
            p[b, K.P_L_P] = c.l_p
            p[b, K.P_AS_N] = c.specific_area("n")
            p[b, K.P_AS_P] = c.specific_area("p")
            p[b, K.P_TPLUS] = c.t_plus
            p[b, K.P_DSN_REF] = c.d_s_n
            p[b, K.P_DSP_REF] = c.d_s_p
            p[b, K.P_DE_REF] = c.d_e
            p[b, K.P_KN_REF] = c.k_n
            p[b, K.P_KP_REF] = c.k_p
            p[b, K.P_EA_DSN] = c.ea_d_s_n
            p[b, K.P_EA_DSP] = c.ea_d_s_p
            p[b, K.P_EA_DE] = c.ea_d_e
            p[b, K.P_EA_KN] = c.ea_k_n
            p[b, K.P_EA_KP] = c.ea_k_p
            p[b, K.P_TREF] = c.t_ref
            p[b, K.P_EPSE_N] = c.eps_e_n
            p[b, K.P_EPSE_S] = c.eps_e_sep
            p[b, K.P_EPSE_P] = c.eps_e_p
            p[b, K.P_BRUG] = c.bruggeman
            p[b, K.P_KAP_LIN] = c.kappa_lin
            p[b, K.P_KAP_15] = c.kappa_pow15
            p[b, K.P_KAP_3] = c.kappa_cube
            p[b, K.P_THN0] = c.theta_n_0
            p[b, K.P_THN100] = c.theta_n_100
            p[b, K.P_THP0] = c.theta_p_0
            p[b, K.P_THP100] = c.theta_p_100
            p[b, K.P_RU] = c.r_u
            p[b, K.P_CS] = c.heat_capacity
            p[b, K.P_I0SEI] = c.i0_sei
            p[b, K.P_ALPHASEI] = c.alpha_sei
            p[b, K.P_USEI] = c.u_sei
            p[b, K.P_MSEI] = c.m_sei
            p[b, K.P_RHOSEI] = c.rho_sei
            p[b, K.P_KAPSEI] = c.kappa_sei
            p[b, K.P_EASEI] = c.ea_sei
        self.p = p

        n_r = disc.n_r
        self.dr_n = np.array([c.radius_n / n_r for c in cells])
        self.dr_p = np.array([c.radius_p / n_r for c in cells])
        self.vol_n = np.empty((n, n_r))
        self.vol_p = np.empty((n, n_r))
        self.face_w_n = np.empty((n, n_r - 1))
        self.face_w_p = np.empty((n, n_r - 1))
        self.a_out_n = np.empty(n)
        self.a_out_p = np.empty(n)
        self.vsum_n = np.empty(n)
        self.vsum_p = np.empty(n)
        for b, c in enumerate(cells):
            for radius, vol, face_w, a_out, vsum in (
                (c.radius_n, self.vol_n, self.face_w_n, self.a_out_n, self.vsum_n),
                (c.radius_p, self.vol_p, self.face_w_p, self.a_out_p, self.vsum_p),
            ):
                dr = radius / n_r
                faces = np.arange(n_r + 1) * dr
                vol[b] = (faces[1:] ** 3 - faces[:-1] ** 3) / 3.0
                face_w[b] = faces[1:-1] ** 2 / dr
                a_out[b] = radius**2
                vsum[b] = radius**3 / 3.0

        # Electrolyte grid: anode | separator | cathode, uniform dx per region.
        self.n_anode = disc.n_x_anode
        self.n_sep = disc.n_x_sep
        n_x = disc.n_x
        self.cap_e = np.empty((n, n_x))
        self.face_g_e = np.empty((n, n_x - 1))
        self.src_w_e = np.empty((n, n_x))
        for b, c in enumerate(cells):
            dx = np.concatenate([
                np.full(disc.n_x_anode, c.l_n / disc.n_x_anode),
                np.full(disc.n_x_sep, c.l_sep / disc.n_x_sep),
                np.full(disc.n_x_cathode, c.l_p / disc.n_x_cathode),
            ])
            eps = np.concatenate([
                np.full(disc.n_x_anode, c.eps_e_n),
                np.full(disc.n_x_sep, c.eps_e_sep),
                np.full(disc.n_x_cathode, c.eps_e_p),
            ])
            mult = eps**c.bruggeman
            self.cap_e[b] = eps * dx
            self.face_g_e[b] = 1.0 / (
                0.5 * dx[:-1] / mult[:-1] + 0.5 * dx[1:] / mult[1:]
            )
            src = np.zeros(n_x)
            pref = (1.0 - c.t_plus) / (FARADAY * c.area)
            src[: disc.n_x_anode] = pref / disc.n_x_anode
            src[disc.n_x_anode + disc.n_x_sep:] = -pref / disc.n_x_cathode
            self.src_w_e[b] = src

        ocp_n, ocp_p = first.ocp_n, first.ocp_p
        self.ocpn_breaks = ocp_n.stoichiometry
        self.ocpn_coefs = ocp_n._pot_coeffs
        self.ocpp_breaks = ocp_p.stoichiometry
        self.ocpp_coefs = ocp_p._pot_coeffs
        self.entn_breaks = ocp_n.stoichiometry
        self.entn_coefs = ocp_n._ent_coeffs
        self.entp_breaks = ocp_p.stoichiometry
        self.entp_coefs = ocp_p._ent_coeffs

        self.r_u = np.array([c.r_u for c in cells])
        self.c_s_heat = np.array([c.heat_capacity for c in cells])

        for arr in self.__dict__.values():
            if isinstance(arr, np.ndarray):
                arr.flags.writeable = False

    @property
    def n_cells(self) -> int:
        return len(self.cells)


def build_stacked_params(
    cells: Sequence[CellParameters],
    disc: Discretization = DEFAULT_DISCRETIZATION,
) -> StackedParams:
    return StackedParams(cells, disc)


@lru_cache(maxsize=64)
def _single_cell_pack(params: CellParameters, disc: Discretization) -> StackedParams:
    return StackedParams((params,), disc)


def _disc_for_state(state: CellState, params: CellParameters) -> Discretization:
    n_r = state.c_s_n.size
    if state.c_s_p.size != n_r:
        raise ConfigError("c_s_n and c_s_p must share the radial grid size")
    n_x = state.c_e.size
    default = DEFAULT_DISCRETIZATION
    if n_x == default.n_x and n_r == default.n_r:
        return default
    if (n_x == FAST_DISCRETIZATION.n_x and n_r == FAST_DISCRETIZATION.n_r):
        return FAST_DISCRETIZATION
    # Generic split: proportional to layer thicknesses, at least 2 per region.
    weights = np.array([params.l_n, params.l_sep, params.l_p])
    counts = np.maximum(2, np.round(weights / weights.sum() * n_x).astype(int))
    while counts.sum() > n_x:
        counts[np.argmax(counts)] -= 1
    while counts.sum() < n_x:
        counts[np.argmin(counts)] += 1
    return Discretization(n_r=n_r, n_x_anode=int(counts[0]),
                          n_x_sep=int(counts[1]), n_x_cathode=int(counts[2]))


def theta_from_soc(params: CellParameters, soc: float, electrode: str) -> float:
    """Stoichiometry at a given SOC through the affine electrode window."""
    if electrode == "n":
        return params.theta_n_0 + soc * (params.theta_n_100 - params.theta_n_0)
    return params.theta_p_0 + soc * (params.theta_p_100 - params.theta_p_0)


def initial_cell_state(
    params: CellParameters,
    *,
    soc: float = 0.0,
    t_cell: float = 298.15,
    disc: Discretization = DEFAULT_DISCRETIZATION,
) -> CellState:
    """Uniform-concentration state at the given SOC and temperature."""
    if not (0.0 <= soc <= 1.0):
        raise ConfigError(f"soc must lie in [0, 1], got {soc!r}")
    c_n = np.full(disc.n_r, theta_from_soc(params, soc, "n") * params.c_s_max_n)
    c_p = np.full(disc.n_r, theta_from_soc(params, soc, "p") * params.c_s_max_p)
    c_e = np.full(disc.n_x, params.c_e0)
    r_sei = params.delta_sei0 / (
        params.kappa_sei * params.specific_area("n") * params.l_n * params.area
    )
    return CellState(c_s_n=c_n, c_s_p=c_p, c_e=c_e, t_cell=float(t_cell),
                     r_sei=float(r_sei), soc=float(soc))


def _frozen_for(state: CellState, params: CellParameters, pack: StackedParams):
    c_s_n = state.c_s_n[None, :].copy()
    c_s_p = state.c_s_p[None, :].copy()
    c_e = state.c_e[None, :].copy()
    temps = np.array([state.t_cell])
    frozen = np.empty((1, K.N_FROZEN_COLS))
    K.prepare_step(pack.p, c_s_n, c_s_p, c_e, temps,
                   pack.dr_n, pack.dr_p, pack.n_anode, pack.n_sep, frozen)
    return c_s_n, c_s_p, c_e, temps, frozen


def soc_of(state: CellState, params: CellParameters,
           disc: Optional[Discretization] = None) -> float:
    """Volume-averaged anode stoichiometry mapped affinely to [0, 1]."""
    disc = disc or _disc_for_state(state, params)
    pack = _single_cell_pack(params, disc)
    theta = float(
        np.sum(pack.vol_n[0] * state.c_s_n) / (pack.vsum_n[0] * params.c_s_max_n)
    )
    return (theta - params.theta_n_0) / (params.theta_n_100 - params.theta_n_0)


def cell_voltage(state: CellState, i_cell: float, params: CellParameters,
                 disc: Optional[Discretization] = None) -> VoltageBreakdown:
    """Terminal-voltage decomposition at the given current [A] (discharge > 0)."""
    disc = disc or _disc_for_state(state, params)
    pack = _single_cell_pack(params, disc)
    c_s_n, c_s_p, c_e, temps, frozen = _frozen_for(state, params, pack)
    r_sei = np.array([state.r_sei])
    v, _dv, u_p, eta_p, u_n, eta_n, dphi, ohm, _cl = K.cell_voltage_kernel(
        0, float(i_cell), pack.p, c_s_n, c_s_p, temps, r_sei, frozen,
        pack.ocpn_breaks, pack.ocpn_coefs, pack.ocpp_breaks, pack.ocpp_coefs,
    )
    return VoltageBreakdown(u_p=u_p, u_n=u_n, eta_p=eta_p, eta_n=eta_n,
                            dphi_e=dphi, ohmic=ohm, v_cell=v)


def step_cell(
    state: CellState,
    i_cell: float,
    dt: float,
    params: CellParameters,
    *,
    disc: Optional[Discretization] = None,
    _depth: int = 0,
) -> CellState:
    """Advance solid and electrolyte concentrations by one implicit step.

    Temperature and SEI state are advanced by their own layers.  On a
    non-finite result the step is retried as two half steps (up to 4 levels)
    before raising StepError.
    """
    if not (dt > 0.0):
        raise ConfigError(f"dt must be positive, got {dt!r}")
    disc = disc or _disc_for_state(state, params)
    pack = _single_cell_pack(params, disc)
    c_s_n, c_s_p, c_e, temps, frozen = _frozen_for(state, params, pack)

    current = np.array([float(i_cell)])
    flux_n = current / (FARADAY * pack.p[0, K.P_AS_N] * params.l_n * params.area)
    flux_p = -current / (FARADAY * pack.p[0, K.P_AS_P] * params.l_p * params.area)
    d_s_n = frozen[:, K.F_DSN].copy()
    d_s_p = frozen[:, K.F_DSP].copy()
    d_e = frozen[:, K.F_DE].copy()

    K.step_solid_diffusion(c_s_n, d_s_n, pack.vol_n, pack.face_w_n,
                           pack.a_out_n, dt, flux_n)
    K.step_solid_diffusion(c_s_p, d_s_p, pack.vol_p, pack.face_w_p,
                           pack.a_out_p, dt, flux_p)
    K.step_electrolyte(c_e, d_e, pack.cap_e, pack.face_g_e, pack.src_w_e,
                       current, dt)

    finite = (
        np.all(np.isfinite(c_s_n))
        and np.all(np.isfinite(c_s_p))
        and np.all(np.isfinite(c_e))
    )
    if not finite:
        if _depth >= 4:
            raise StepError(
                f"cell state update failed to produce finite values at dt={dt}"
            )
        half = step_cell(state, i_cell, dt / 2.0, params, disc=disc,
                         _depth=_depth + 1)
        return step_cell(half, i_cell, dt / 2.0, params, disc=disc,
                         _depth=_depth + 1)

    new = CellState(
        c_s_n=c_s_n[0], c_s_p=c_s_p[0], c_e=c_e[0],
        t_cell=state.t_cell, r_sei=state.r_sei, soc=state.soc,
    )
    return CellState(
        c_s_n=new.c_s_n, c_s_p=new.c_s_p, c_e=new.c_e,
        t_cell=new.t_cell, r_sei=new.r_sei, soc=soc_of(new, params, disc),
    )


def total_solid_moles(state: CellState, params: CellParameters,
                      disc: Optional[Discretization] = None) -> tuple:
    """Cyclable lithium [mol] held in the (negative, positive) electrodes."""
    disc = disc or _disc_for_state(state, params)
    pack = _single_cell_pack(params, disc)
    mean_n = float(np.sum(pack.vol_n[0] * state.c_s_n) / pack.vsum_n[0])
    mean_p = float(np.sum(pack.vol_p[0] * state.c_s_p) / pack.vsum_p[0])
    moles_n = params.eps_s_n * params.l_n * params.area * mean_n
    moles_p = params.eps_s_p * params.l_p * params.area * mean_p
    return moles_n, moles_p


def electrolyte_moles(state: CellState, params: CellParameters,
                      disc: Optional[Discretization] = None) -> float:
    """Total lithium [mol] dissolved in the electrolyte."""
    disc = disc or _disc_for_state(state, params)
    pack = _single_cell_pack(params, disc)
    return float(np.sum(pack.cap_e[0] * state.c_e) * params.area)
