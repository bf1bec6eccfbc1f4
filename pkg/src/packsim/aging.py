"""SEI-layer growth on the negative electrode.

Kinetics-limited Tafel side reaction with an Arrhenius-activated exchange
current density: the film thickens, its ohmic resistance grows, and cyclable
lithium is consumed.  The reaction is gated on thermodynamic favorability,
so it runs predominantly during charging.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .espm import CellState, _frozen_for, _single_cell_pack, _disc_for_state
from .params import CellParameters, ConfigError

__all__ = ["SeiState", "initial_sei_state", "step_sei", "sei_resistance"]


@dataclass(frozen=True)
class SeiState:
    """Film thickness [m], film resistance [ohm], and lithium consumed [mol].

    All three are non-negative and non-decreasing over simulation time.
    """

    delta_sei: float
    r_sei: float
    n_li_lost: float

    def __post_init__(self):
        for name in ("delta_sei", "r_sei", "n_li_lost"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be non-negative")


def sei_resistance(delta: float, params: CellParameters) -> float:
    """Film resistance [ohm] of an SEI layer of thickness delta [m]."""
    film_area = params.specific_area("n") * params.l_n * params.area
    return delta / (params.kappa_sei * film_area)


def initial_sei_state(params: CellParameters) -> SeiState:
    return SeiState(
        delta_sei=params.delta_sei0,
        r_sei=sei_resistance(params.delta_sei0, params),
        n_li_lost=0.0,
    )


def step_sei(
    state: SeiState,
    cell: CellState,
    i_cell: float,
    dt: float,
    params: CellParameters,
) -> SeiState:
    """Advance the SEI state over dt at the given cell current [A].

    The side-reaction overpotential is evaluated from the anode solid-phase
    potential (surface OCP plus kinetic overpotential) minus the reaction
    reference potential and the film ohmic shift.
    """
    if not (dt > 0.0):
        raise ConfigError(f"dt must be positive, got {dt!r}")
    disc = _disc_for_state(cell, params)
    pack = _single_cell_pack(params, disc)
    c_s_n, c_s_p, c_e, temps, frozen = _frozen_for(cell, params, pack)
    r_sei_arr = np.array([state.r_sei])
    _v, _dv, _up, _etap, u_n, eta_n, _dphi, _ohm, _cl = K.cell_voltage_kernel(
        0, float(i_cell), pack.p, c_s_n, c_s_p, temps, r_sei_arr, frozen,
        pack.ocpn_breaks, pack.ocpn_coefs, pack.ocpp_breaks, pack.ocpp_coefs,
    )
    delta = np.array([state.delta_sei])
    r_sei = np.array([state.r_sei])
    n_lost = np.array([state.n_li_lost])
    n_cycle = np.array([0.0])
    K.step_sei_kernel(
        pack.p,
        np.array([float(i_cell)]),
        temps,
        np.array([u_n]),
        np.array([eta_n]),
        delta,
        r_sei,
        n_lost,
        n_cycle,
        dt,
    )
    return SeiState(delta_sei=float(delta[0]), r_sei=float(r_sei[0]),
                    n_li_lost=float(n_lost[0]))
