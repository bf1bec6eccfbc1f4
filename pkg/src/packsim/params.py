"""Parameter definitions, validation, serialization, and module sampling.

All physics layers read their inputs from the types in this module, so a
user can substitute a different cell by editing a config file only.  The
shipped defaults describe an LG-M50-like NMC811/graphite 21700 cell.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

__all__ = [
    "ConfigError",
    "OcpTable",
    "CellParameters",
    "ProtocolPhase",
    "ProtocolSpec",
    "ModuleConfig",
    "SamplingRanges",
    "eps_from_capacity",
    "capacity_from_eps",
    "sample_module",
    "load_config",
    "save_config",
    "default_cell",
    "default_protocol",
    "reference_module_config",
]

Electrode = Literal["n", "p"]

# Linear maps between cell capacity [Ah] and active material volume fraction,
# identified on a 19-cell LG M50T batch (R^2 = 0.993 negative / 0.967 positive).
_EPS_CAP_COEFFS = {
    "n": (0.0091055, 0.16312),
    "p": (0.011719, 0.14208),
}

# Nominal fresh-cell capacity used for C-rate scaling and sampling.
NOMINAL_CAPACITY_AH = 4.85


class ConfigError(ValueError):
    """Raised for malformed or invariant-violating configuration data."""


def eps_from_capacity(q_cell: float, electrode: Electrode) -> float:
    """Map cell capacity [Ah] to the electrode active material volume fraction."""
    if electrode not in _EPS_CAP_COEFFS:
        raise ConfigError(f"electrode must be 'n' or 'p', got {electrode!r}")
    if not (q_cell > 0.0) or not math.isfinite(q_cell):
        raise ConfigError(f"q_cell must be a positive finite capacity in Ah, got {q_cell!r}")
    a, b = _EPS_CAP_COEFFS[electrode]
    return a + b * q_cell


def capacity_from_eps(eps: float, electrode: Electrode) -> float:
    """Exact inverse of :func:`eps_from_capacity`."""
    if electrode not in _EPS_CAP_COEFFS:
        raise ConfigError(f"electrode must be 'n' or 'p', got {electrode!r}")
    a, b = _EPS_CAP_COEFFS[electrode]
    q = (eps - a) / b
    if not (q > 0.0) or not math.isfinite(q):
        raise ConfigError(
            f"eps_s_{electrode}={eps!r} maps to non-positive capacity {q!r} Ah"
        )
    return q


def _as_float_array(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ConfigError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


class OcpTable:
    """Tabulated electrode open-circuit potential and its entropic coefficient.

    Queries use monotone cubic (PCHIP) interpolation inside the grid and clamp
    at the endpoints; extrapolation is never performed.  Instances are
    immutable and safe to share between threads/processes.
    """

    __slots__ = (
        "stoichiometry",
        "potential",
        "entropic_coeff",
        "_pot_coeffs",
        "_ent_coeffs",
    )

    def __init__(self, stoichiometry, potential, entropic_coeff):
        x = _as_float_array(stoichiometry, "stoichiometry")
        u = _as_float_array(potential, "potential")
        dudt = _as_float_array(entropic_coeff, "entropic_coeff")
        if x.size < 10:
            raise ConfigError(f"OCP grid needs >= 10 points, got {x.size}")
        if not (u.size == x.size == dudt.size):
            raise ConfigError("OCP table columns must have equal length")
        if np.any(np.diff(x) <= 0):
            raise ConfigError("stoichiometry grid must be strictly increasing")
        object.__setattr__(self, "stoichiometry", x)
        object.__setattr__(self, "potential", u)
        object.__setattr__(self, "entropic_coeff", dudt)
        object.__setattr__(self, "_pot_coeffs", self._pchip_coeffs(x, u))
        object.__setattr__(self, "_ent_coeffs", self._pchip_coeffs(x, dudt))

    def __setattr__(self, name, value):  # pragma: no cover - immutability guard
        raise AttributeError("OcpTable is immutable")

    def __reduce__(self):
        return (
            OcpTable,
            (
                np.array(self.stoichiometry),
                np.array(self.potential),
                np.array(self.entropic_coeff),
            ),
        )

    @staticmethod
    def _pchip_coeffs(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        # Rows: cubic..constant local coefficients on (x - x_i), numba-friendly.
        interp = PchipInterpolator(x, y, extrapolate=False)
        coeffs = np.ascontiguousarray(interp.c, dtype=float)
        coeffs.flags.writeable = False
        return coeffs

    @property
    def theta_min(self) -> float:
        return float(self.stoichiometry[0])

    @property
    def theta_max(self) -> float:
        return float(self.stoichiometry[-1])

    def contains(self, theta) -> np.ndarray:
        t = np.asarray(theta, dtype=float)
        return (t >= self.theta_min) & (t <= self.theta_max)

    def _eval(self, coeffs: np.ndarray, theta, derivative: bool):
        x = self.stoichiometry
        t = np.clip(np.asarray(theta, dtype=float), x[0], x[-1])
        idx = np.clip(np.searchsorted(x, t, side="right") - 1, 0, x.size - 2)
        dx = t - x[idx]
        c3, c2, c1, c0 = coeffs[0, idx], coeffs[1, idx], coeffs[2, idx], coeffs[3, idx]
        if derivative:
            out = (3.0 * c3 * dx + 2.0 * c2) * dx + c1
        else:
            out = ((c3 * dx + c2) * dx + c1) * dx + c0
        if np.isscalar(theta):
            return float(out)
        return out

    def ocp(self, theta):
        """Open-circuit potential [V] at the given stoichiometry (clamped)."""
        return self._eval(self._pot_coeffs, theta, derivative=False)

    def ocp_derivative(self, theta):
        """dU/d(theta) [V] of the interpolant (clamped)."""
        return self._eval(self._pot_coeffs, theta, derivative=True)

    def entropic(self, theta):
        """Entropic coefficient dU/dT [V/K] at the given stoichiometry."""
        return self._eval(self._ent_coeffs, theta, derivative=False)

    def __eq__(self, other):
        if not isinstance(other, OcpTable):
            return NotImplemented
        return (
            np.array_equal(self.stoichiometry, other.stoichiometry)
            and np.array_equal(self.potential, other.potential)
            and np.array_equal(self.entropic_coeff, other.entropic_coeff)
        )

    def __hash__(self):
        return hash((self.stoichiometry.tobytes(), self.potential.tobytes()))

    def to_dict(self) -> dict:
        return {
            "stoichiometry": self.stoichiometry.tolist(),
            "potential": self.potential.tolist(),
            "entropic_coeff": self.entropic_coeff.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OcpTable":
        try:
            return cls(data["stoichiometry"], data["potential"], data["entropic_coeff"])
        except KeyError as exc:
            raise ConfigError(f"OCP table missing field {exc}") from exc


def _require_positive(name: str, value: float) -> None:
    if not isinstance(value, (int, float)) or not math.isfinite(value) or value <= 0:
        raise ConfigError(f"{name} must be a positive finite number, got {value!r}")


def _require_unit_interval(name: str, value: float, open_interval: bool = False) -> None:
    if not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"{name} must be finite, got {value!r}")
    if open_interval and not (0.0 < value < 1.0):
        raise ConfigError(f"{name} must lie strictly inside (0, 1), got {value!r}")
    if not open_interval and not (0.0 <= value <= 1.0):
        raise ConfigError(f"{name} must lie in [0, 1], got {value!r}")


@dataclass(frozen=True, eq=True)
class CellParameters:
    """Full physical parameter set of one cell.

    Units are SI throughout (m, m^2, m^3, mol, A, V, K, J, S) except where a
    field name says otherwise.  Instances are immutable; heterogeneous cells
    are built with :func:`dataclasses.replace`.
    """

    # Electrode composition
    eps_s_n: float
    eps_s_p: float
    # Layer thicknesses [m]
    l_n: float
    l_sep: float
    l_p: float
    # Representative particle radii [m]
    radius_n: float
    radius_p: float
    # Electrode plate area [m^2]
    area: float
    # Solid-phase diffusivities [m^2/s]
    d_s_n: float
    d_s_p: float
    # Electrolyte transport
    d_e: float
    t_plus: float
    c_e0: float
    eps_e_n: float
    eps_e_sep: float
    eps_e_p: float
    bruggeman: float
    # Electrolyte conductivity fit kappa(x) = k1*x + k15*x^1.5 + k3*x^3, x = c_e/1000 [S/m]
    kappa_lin: float
    kappa_pow15: float
    kappa_cube: float
    # Saturation concentrations [mol/m^3]
    c_s_max_n: float
    c_s_max_p: float
    # Reaction rate constants [m^2.5 mol^-0.5 s^-1]
    k_n: float
    k_p: float
    # Lumped ohmic resistance [ohm]
    r_cell: float
    # Open-circuit potential tables
    ocp_n: OcpTable
    ocp_p: OcpTable
    # Stoichiometry windows
    theta_n_0: float
    theta_n_100: float
    theta_p_0: float
    theta_p_100: float
    # Thermal lumped parameters
    heat_capacity: float  # J/K
    r_u: float  # K/W cell-to-ambient convective resistance
    diameter: float  # m
    height: float  # m
    k_air: float  # W/(m K)
    k_tabs: float  # W/(m K)
    tab_area: float  # m^2 conduction cross-section of the interconnection tabs
    # SEI side reaction
    i0_sei: float  # A/m^2 exchange current density at t_ref
    alpha_sei: float
    u_sei: float  # V reference potential
    m_sei: float  # kg/mol
    rho_sei: float  # kg/m^3
    kappa_sei: float  # S/m film conductivity
    delta_sei0: float  # m initial film thickness
    ea_sei: float  # J/mol activation energy of i0_sei
    # Arrhenius activation energies [J/mol] and reference temperature [K]
    ea_d_s_n: float
    ea_d_s_p: float
    ea_k_n: float
    ea_k_p: float
    ea_d_e: float
    t_ref: float

    def __post_init__(self):
        _require_unit_interval("eps_s_n", self.eps_s_n, open_interval=True)
        _require_unit_interval("eps_s_p", self.eps_s_p, open_interval=True)
        for name in (
            "l_n", "l_sep", "l_p", "radius_n", "radius_p", "area",
            "d_s_n", "d_s_p", "d_e", "c_e0", "c_s_max_n", "c_s_max_p",
            "k_n", "k_p", "heat_capacity", "r_u", "diameter", "height",
            "k_air", "k_tabs", "tab_area", "alpha_sei", "u_sei", "m_sei",
            "rho_sei", "kappa_sei", "t_ref", "bruggeman",
        ):
            _require_positive(name, getattr(self, name))
        for name in ("eps_e_n", "eps_e_sep", "eps_e_p", "t_plus"):
            _require_unit_interval(name, getattr(self, name), open_interval=True)
        for name in ("r_cell", "i0_sei", "delta_sei0", "ea_sei",
                     "ea_d_s_n", "ea_d_s_p", "ea_k_n", "ea_k_p", "ea_d_e"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be non-negative and finite, got {value!r}")
        for name in ("theta_n_0", "theta_n_100", "theta_p_0", "theta_p_100"):
            _require_unit_interval(name, getattr(self, name))
        if not self.theta_n_0 < self.theta_n_100:
            raise ConfigError("negative electrode window requires theta_n_0 < theta_n_100")
        if not self.theta_p_100 < self.theta_p_0:
            raise ConfigError("positive electrode window requires theta_p_100 < theta_p_0")
        if not isinstance(self.ocp_n, OcpTable) or not isinstance(self.ocp_p, OcpTable):
            raise ConfigError("ocp_n/ocp_p must be OcpTable instances")

    # -- derived quantities -------------------------------------------------

    def specific_area(self, electrode: Electrode) -> float:
        """Interfacial area per unit electrode volume, 3*eps_s/R [1/m]."""
        if electrode == "n":
            return 3.0 * self.eps_s_n / self.radius_n
        return 3.0 * self.eps_s_p / self.radius_p

    def capacity_ah(self) -> float:
        """Cell capacity [Ah] implied by the limiting electrode's eps."""
        return min(
            capacity_from_eps(self.eps_s_n, "n"),
            capacity_from_eps(self.eps_s_p, "p"),
        )

    def with_capacity(self, q_cell: float) -> "CellParameters":
        """Copy with both electrodes set from one capacity draw [Ah]."""
        return dataclasses.replace(
            self,
            eps_s_n=eps_from_capacity(q_cell, "n"),
            eps_s_p=eps_from_capacity(q_cell, "p"),
        )

    def to_dict(self) -> dict:
        data = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            data[f.name] = value.to_dict() if isinstance(value, OcpTable) else value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "CellParameters":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in data:
                raise ConfigError(f"cell parameters missing field '{f.name}'")
            value = data[f.name]
            if f.name in ("ocp_n", "ocp_p"):
                value = OcpTable.from_dict(value)
            kwargs[f.name] = value
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Cycling protocol
# ---------------------------------------------------------------------------

_PHASE_KINDS = ("cc_charge", "cc_discharge", "cv_hold", "rest")
_VOLTAGE_WINDOW = (2.5, 4.2)


@dataclass(frozen=True, eq=True)
class ProtocolPhase:
    """One phase of a cycling protocol.

    kind: cc_charge | cc_discharge | cv_hold | rest
    rate: C-rate (> 0) for CC phases
    cutoff_voltage: V terminating a CC phase
    voltage: V held during cv_hold
    cutoff_current: A terminating cv_hold (module-level magnitude)
    duration: s for rest
    """

    kind: str
    rate: Optional[float] = None
    cutoff_voltage: Optional[float] = None
    voltage: Optional[float] = None
    cutoff_current: Optional[float] = None
    duration: Optional[float] = None

    def __post_init__(self):
        if self.kind not in _PHASE_KINDS:
            raise ConfigError(f"unknown protocol phase kind {self.kind!r}")
        lo, hi = _VOLTAGE_WINDOW
        if self.kind in ("cc_charge", "cc_discharge"):
            _require_positive("rate", self.rate)
            if self.cutoff_voltage is None or not (lo <= self.cutoff_voltage <= hi):
                raise ConfigError(
                    f"cutoff_voltage must lie in [{lo}, {hi}] V, got {self.cutoff_voltage!r}"
                )
        elif self.kind == "cv_hold":
            if self.voltage is None or not (lo <= self.voltage <= hi):
                raise ConfigError(f"cv_hold voltage must lie in [{lo}, {hi}] V")
            _require_positive("cutoff_current", self.cutoff_current)
        elif self.kind == "rest":
            _require_positive("duration", self.duration)

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, data: dict) -> "ProtocolPhase":
        if "kind" not in data:
            raise ConfigError("protocol phase missing field 'kind'")
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"protocol phase has unknown fields {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True, eq=True)
class ProtocolSpec:
    """Ordered phase list constituting one cycle, plus a default loop count."""

    phases: tuple
    loops: int = 1

    def __post_init__(self):
        if not self.phases:
            raise ConfigError("protocol needs at least one phase")
        phases = tuple(
            p if isinstance(p, ProtocolPhase) else ProtocolPhase.from_dict(p)
            for p in self.phases
        )
        object.__setattr__(self, "phases", phases)
        if not isinstance(self.loops, int) or self.loops < 1:
            raise ConfigError(f"protocol loops must be an integer >= 1, got {self.loops!r}")

    def to_dict(self) -> dict:
        return {"phases": [p.to_dict() for p in self.phases], "loops": self.loops}

    @classmethod
    def from_dict(cls, data: dict) -> "ProtocolSpec":
        if "phases" not in data:
            raise ConfigError("protocol missing field 'phases'")
        return cls(phases=tuple(data["phases"]), loops=data.get("loops", 1))


def default_protocol(n_p: int = 4) -> ProtocolSpec:
    """CCCV charge at C/3, 30 min rest, 1C CC discharge, 30 min rest."""
    return ProtocolSpec(
        phases=(
            ProtocolPhase(kind="cc_charge", rate=1.0 / 3.0, cutoff_voltage=4.2),
            ProtocolPhase(kind="cv_hold", voltage=4.2, cutoff_current=0.05 * n_p),
            ProtocolPhase(kind="rest", duration=1800.0),
            ProtocolPhase(kind="cc_discharge", rate=1.0, cutoff_voltage=2.5),
            ProtocolPhase(kind="rest", duration=1800.0),
        )
    )


# ---------------------------------------------------------------------------
# Module configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=True)
class ModuleConfig:
    """One parallel-connected module: cells, wiring, environment, protocol.

    Cell position index 1 is nearest the module terminals.  ``eps_bounds_*``
    record the sampling interval that generated the cells; they provide the
    normalization domain for location/combined predictors and round-trip
    through config files.
    """

    n_p: int
    cells: tuple
    r_int: float  # ohm, per ladder segment (applied to both rails as 2*r_int)
    spacing: float  # m
    t_amb: float  # K
    protocol: ProtocolSpec
    n_cycles: int
    seed: int
    q_nominal_ah: float = NOMINAL_CAPACITY_AH
    eps_bounds_n: Optional[tuple] = None
    eps_bounds_p: Optional[tuple] = None

    def __post_init__(self):
        if not isinstance(self.n_p, int) or self.n_p < 2:
            raise ConfigError(f"n_p must be an integer >= 2, got {self.n_p!r}")
        cells = tuple(self.cells)
        object.__setattr__(self, "cells", cells)
        if len(cells) != self.n_p:
            raise ConfigError(
                f"cell list length {len(cells)} does not match n_p={self.n_p}"
            )
        for i, cell in enumerate(cells):
            if not isinstance(cell, CellParameters):
                raise ConfigError(f"cells[{i}] is not a CellParameters instance")
        if not math.isfinite(self.r_int) or self.r_int < 0:
            raise ConfigError(f"r_int must be >= 0, got {self.r_int!r}")
        _require_positive("spacing", self.spacing)
        _require_positive("t_amb", self.t_amb)
        _require_positive("q_nominal_ah", self.q_nominal_ah)
        if not isinstance(self.protocol, ProtocolSpec):
            raise ConfigError("protocol must be a ProtocolSpec")
        if not isinstance(self.n_cycles, int) or self.n_cycles < 1:
            raise ConfigError(f"n_cycles must be an integer >= 1, got {self.n_cycles!r}")
        if not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        for name in ("eps_bounds_n", "eps_bounds_p"):
            bounds = getattr(self, name)
            if bounds is None:
                continue
            bounds = tuple(float(b) for b in bounds)
            if len(bounds) != 2 or not bounds[0] <= bounds[1]:
                raise ConfigError(f"{name} must be (lo, hi) with lo <= hi")
            object.__setattr__(self, name, bounds)

    def reordered(self, permutation: Sequence[int]) -> "ModuleConfig":
        """Copy with cells rearranged; permutation holds 0-based original indices."""
        perm = list(permutation)
        if sorted(perm) != list(range(self.n_p)):
            raise ConfigError(f"not a valid permutation of {self.n_p} cells: {perm}")
        return dataclasses.replace(self, cells=tuple(self.cells[i] for i in perm))

    def to_dict(self) -> dict:
        return {
            "format": "packsim-module-config-v1",
            "n_p": self.n_p,
            "r_int": self.r_int,
            "spacing": self.spacing,
            "t_amb": self.t_amb,
            "n_cycles": self.n_cycles,
            "seed": self.seed,
            "q_nominal_ah": self.q_nominal_ah,
            "eps_bounds_n": list(self.eps_bounds_n) if self.eps_bounds_n else None,
            "eps_bounds_p": list(self.eps_bounds_p) if self.eps_bounds_p else None,
            "protocol": self.protocol.to_dict(),
            "cells": [c.to_dict() for c in self.cells],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModuleConfig":
        required = ("n_p", "r_int", "spacing", "t_amb", "n_cycles", "seed",
                    "protocol", "cells")
        for name in required:
            if name not in data:
                raise ConfigError(f"module config missing field '{name}'")
        cells = tuple(CellParameters.from_dict(c) for c in data["cells"])
        bounds_n = data.get("eps_bounds_n")
        bounds_p = data.get("eps_bounds_p")
        return cls(
            n_p=data["n_p"],
            cells=cells,
            r_int=data["r_int"],
            spacing=data["spacing"],
            t_amb=data["t_amb"],
            protocol=ProtocolSpec.from_dict(data["protocol"]),
            n_cycles=data["n_cycles"],
            seed=data["seed"],
            q_nominal_ah=data.get("q_nominal_ah", NOMINAL_CAPACITY_AH),
            eps_bounds_n=tuple(bounds_n) if bounds_n else None,
            eps_bounds_p=tuple(bounds_p) if bounds_p else None,
        )


def save_config(cfg: ModuleConfig, path) -> None:
    """Write a module config as JSON (atomic: temp file then rename)."""
    payload = json.dumps(cfg.to_dict(), indent=1)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(payload)
        fh.write("\n")
    os.replace(tmp, path)


def load_config(path) -> ModuleConfig:
    """Read and validate a module config written by :func:`save_config`."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top-level JSON value must be an object")
    try:
        return ModuleConfig.from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Monte Carlo sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=True)
class SamplingRanges:
    """Uniform sampling intervals for one Monte Carlo module draw."""

    q_nominal_ah: float = NOMINAL_CAPACITY_AH
    capacity_fraction: float = 0.025  # +/- relative capacity perturbation
    r_int_bounds: tuple = (0.1e-3, 0.5e-3)  # ohm
    spacing_bounds: tuple = (1.0e-3, 10.0e-3)  # m

    def __post_init__(self):
        _require_positive("q_nominal_ah", self.q_nominal_ah)
        if not (0.0 <= self.capacity_fraction < 1.0):
            raise ConfigError("capacity_fraction must lie in [0, 1)")
        for name in ("r_int_bounds", "spacing_bounds"):
            bounds = tuple(float(b) for b in getattr(self, name))
            if len(bounds) != 2 or not (0.0 <= bounds[0] <= bounds[1]):
                raise ConfigError(f"{name} must be (lo, hi) with 0 <= lo <= hi")
            object.__setattr__(self, name, bounds)

    def capacity_bounds(self) -> tuple:
        return (
            self.q_nominal_ah * (1.0 - self.capacity_fraction),
            self.q_nominal_ah * (1.0 + self.capacity_fraction),
        )

    def eps_bounds(self, electrode: Electrode) -> tuple:
        lo, hi = self.capacity_bounds()
        return (eps_from_capacity(lo, electrode), eps_from_capacity(hi, electrode))

    def to_dict(self) -> dict:
        return {
            "q_nominal_ah": self.q_nominal_ah,
            "capacity_fraction": self.capacity_fraction,
            "r_int_bounds": list(self.r_int_bounds),
            "spacing_bounds": list(self.spacing_bounds),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SamplingRanges":
        kwargs = dict(data)
        for name in ("r_int_bounds", "spacing_bounds"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)


def sample_module(
    rng_seed: int,
    nominal: CellParameters,
    ranges: SamplingRanges,
    *,
    n_p: int = 4,
    t_amb: float = 298.15,
    n_cycles: int = 1,
    protocol: Optional[ProtocolSpec] = None,
) -> ModuleConfig:
    """Draw one heterogeneous module configuration.

    Per cell, one capacity is drawn uniformly within the relative tolerance and
    converted to eps_s_n and eps_s_p through the identified linear relations
    (both electrodes perturbed together, independently across cells).  One
    interconnection resistance and one cell spacing are drawn per module.
    The same seed always reproduces the same configuration bit for bit.
    """
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    q_lo, q_hi = ranges.capacity_bounds()
    cells = []
    for _ in range(n_p):
        q_cell = float(rng.uniform(q_lo, q_hi))
        cells.append(nominal.with_capacity(q_cell))
    r_lo, r_hi = ranges.r_int_bounds
    r_int = float(rng.uniform(r_lo, r_hi)) if r_hi > r_lo else r_lo
    s_lo, s_hi = ranges.spacing_bounds
    spacing = float(rng.uniform(s_lo, s_hi)) if s_hi > s_lo else s_lo
    return ModuleConfig(
        n_p=n_p,
        cells=tuple(cells),
        r_int=r_int,
        spacing=spacing,
        t_amb=t_amb,
        protocol=protocol if protocol is not None else default_protocol(n_p),
        n_cycles=n_cycles,
        seed=int(rng_seed),
        q_nominal_ah=ranges.q_nominal_ah,
        eps_bounds_n=ranges.eps_bounds("n"),
        eps_bounds_p=ranges.eps_bounds("p"),
    )


# ---------------------------------------------------------------------------
# Default LG-M50-like parameter set
# ---------------------------------------------------------------------------

def _graphite_sic_ocp(theta: np.ndarray) -> np.ndarray:
    """Graphite-SiOx open-circuit potential fit [V]."""
    return (
        1.9793 * np.exp(-39.3631 * theta)
        + 0.2482
        - 0.0909 * np.tanh(29.8538 * (theta - 0.1234))
        - 0.04478 * np.tanh(14.9159 * (theta - 0.2769))
        - 0.0205 * np.tanh(30.4444 * (theta - 0.6103))
    )


def _nmc811_ocp(theta: np.ndarray) -> np.ndarray:
    """NMC811 open-circuit potential fit [V]."""
    return (
        -0.8090 * theta
        + 4.4875
        - 0.0428 * np.tanh(18.5138 * (theta - 0.5542))
        - 17.7326 * np.tanh(15.7890 * (theta - 0.3117))
        + 17.5842 * np.tanh(15.9308 * (theta - 0.3120))
    )


def _graphite_entropic(theta: np.ndarray) -> np.ndarray:
    """Smooth graphite entropic coefficient profile [V/K]."""
    return 1e-3 * (0.35 - 1.40 * theta + 0.90 * theta**2)


def _nmc_entropic(theta: np.ndarray) -> np.ndarray:
    """Smooth NMC entropic coefficient profile [V/K]."""
    return 1e-3 * (-0.05 - 0.20 * theta + 0.10 * theta**2)


def _default_ocp_tables() -> tuple:
    theta_n = np.linspace(0.0, 1.0, 400)
    theta_p = np.linspace(0.15, 1.0, 400)
    ocp_n = OcpTable(theta_n, _graphite_sic_ocp(theta_n), _graphite_entropic(theta_n))
    ocp_p = OcpTable(theta_p, _nmc811_ocp(theta_p), _nmc_entropic(theta_p))
    return ocp_n, ocp_p


def default_cell(q_cell: float = NOMINAL_CAPACITY_AH) -> CellParameters:
    """LG-M50-like NMC811/graphite 21700 cell at the given capacity [Ah].

    Geometry and transport follow the published LG M50 teardown data, with the
    plate area and positive saturation concentration adjusted so that the
    theoretical electrode capacities are consistent with the capacity <-> eps
    relations used for sampling.
    """
    ocp_n, ocp_p = _default_ocp_tables()
    return CellParameters(
        eps_s_n=eps_from_capacity(q_cell, "n"),
        eps_s_p=eps_from_capacity(q_cell, "p"),
        l_n=85.2e-6,
        l_sep=12.0e-6,
        l_p=75.6e-6,
        radius_n=5.86e-6,
        radius_p=5.22e-6,
        area=0.0917,
        d_s_n=3.3e-14,
        d_s_p=4.0e-15,
        d_e=1.769e-10,
        t_plus=0.2594,
        c_e0=1000.0,
        eps_e_n=0.25,
        eps_e_sep=0.47,
        eps_e_p=0.335,
        bruggeman=1.5,
        kappa_lin=3.329,
        kappa_pow15=-2.51,
        kappa_cube=0.1297,
        c_s_max_n=33133.0,
        c_s_max_p=57990.0,
        k_n=6.716e-12,
        k_p=3.545e-11,
        r_cell=0.018,
        ocp_n=ocp_n,
        ocp_p=ocp_p,
        theta_n_0=0.0279,
        theta_n_100=0.9014,
        theta_p_0=0.9084,
        theta_p_100=0.2661,
        heat_capacity=62.0,
        r_u=4.0,
        diameter=21.0e-3,
        height=70.0e-3,
        k_air=0.026,
        k_tabs=400.0,
        tab_area=1.2e-6,
        i0_sei=1.0e-7,
        alpha_sei=0.5,
        u_sei=0.4,
        m_sei=0.162,
        rho_sei=1690.0,
        kappa_sei=1.5e-5,
        delta_sei0=5.0e-9,
        ea_sei=5.0e4,
        ea_d_s_n=4.2e4,
        ea_d_s_p=3.0e4,
        ea_k_n=3.5e4,
        ea_k_p=2.5e4,
        ea_d_e=1.7e4,
        t_ref=298.15,
    )


def reference_module_config(
    *,
    n_p: int = 4,
    t_amb: float = 298.15,
    n_cycles: int = 1,
    q_nominal_ah: float = NOMINAL_CAPACITY_AH,
    seed: int = 0,
    ranges: Optional[SamplingRanges] = None,
) -> ModuleConfig:
    """Unperturbed baseline module: nominal cells, 0.25 mOhm, 5 mm spacing."""
    if ranges is None:
        ranges = SamplingRanges(q_nominal_ah=q_nominal_ah)
    nominal = default_cell(q_nominal_ah)
    return ModuleConfig(
        n_p=n_p,
        cells=tuple(nominal for _ in range(n_p)),
        r_int=0.25e-3,
        spacing=5.0e-3,
        t_amb=t_amb,
        protocol=default_protocol(n_p),
        n_cycles=n_cycles,
        seed=seed,
        q_nominal_ah=q_nominal_ah,
        eps_bounds_n=ranges.eps_bounds("n"),
        eps_bounds_p=ranges.eps_bounds("p"),
    )
