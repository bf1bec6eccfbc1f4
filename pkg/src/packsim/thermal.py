"""Lumped per-cell thermal states coupled through a cell-to-cell conduction chain.

Each cell exchanges heat with the ambient through a convective resistance and
with its neighbours through a conduction resistance combining the tab and air
paths in parallel.  Boundary cells simply lack the missing-neighbour term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["ThermalNetwork", "r_m_from_geometry", "step_temperatures", "steady_state"]


def r_m_from_geometry(
    d: float,
    h: float,
    spacing: float,
    k_air: float,
    k_tabs: float,
    a_cell: float,
) -> float:
    """Cell-to-cell conduction resistance [K/W] for adjacent cylindrical cells.

    Parallel combination of conduction through the air gap (shape-factor
    expression for two cylinders at pitch w = d + spacing) and through the
    interconnection tabs of cross-section ``a_cell``.
    """
    for name, val in (("d", d), ("h", h), ("spacing", spacing),
                      ("k_air", k_air), ("k_tabs", k_tabs), ("a_cell", a_cell)):
        if not (val > 0.0) or not math.isfinite(val):
            raise ValueError(f"{name} must be positive and finite, got {val!r}")
    w = d + spacing
    ratio = (4.0 * w * w - 2.0 * d * d) / (2.0 * d * d)
    if ratio <= 1.0:
        raise ValueError(
            f"degenerate geometry: shape-factor argument {ratio!r} must exceed 1"
        )
    s_cell = 2.0 * math.pi * h / math.acosh(ratio)
    r_air = 1.0 / (s_cell * k_air)
    r_tabs = w / (a_cell * k_tabs)
    return 1.0 / (1.0 / r_air + 1.0 / r_tabs)


@dataclass(frozen=True)
class ThermalNetwork:
    """Per-cell lumped thermal parameters plus the inter-cell coupling."""

    r_u: np.ndarray  # K/W, per cell
    r_m: float  # K/W, between adjacent cells
    c_s: np.ndarray  # J/K, per cell
    t_amb: float  # K

    def __post_init__(self):
        r_u = np.ascontiguousarray(np.atleast_1d(np.asarray(self.r_u, dtype=float)))
        c_s = np.ascontiguousarray(np.atleast_1d(np.asarray(self.c_s, dtype=float)))
        if r_u.shape != c_s.shape or r_u.ndim != 1:
            raise ValueError("r_u and c_s must be 1-D arrays of equal length")
        if np.any(r_u <= 0) or np.any(c_s <= 0):
            raise ValueError("r_u and c_s entries must be positive")
        if not (self.r_m > 0.0 and math.isfinite(self.r_m)):
            raise ValueError(f"r_m must be positive, got {self.r_m!r}")
        if not (self.t_amb > 0.0):
            raise ValueError(f"t_amb must be positive, got {self.t_amb!r}")
        object.__setattr__(self, "r_u", r_u)
        object.__setattr__(self, "c_s", c_s)

    @property
    def n_cells(self) -> int:
        return self.r_u.size

    @classmethod
    def from_cells(cls, cells, spacing: float, t_amb: float) -> "ThermalNetwork":
        """Build the network from per-cell parameters and module spacing."""
        first = cells[0]
        r_m = r_m_from_geometry(
            first.diameter, first.height, spacing,
            first.k_air, first.k_tabs, first.tab_area,
        )
        return cls(
            r_u=np.array([c.r_u for c in cells], dtype=float),
            r_m=r_m,
            c_s=np.array([c.heat_capacity for c in cells], dtype=float),
            t_amb=t_amb,
        )

    def conductance_matrix(self) -> np.ndarray:
        """Symmetric matrix K with K @ T = heat flow out of each cell [W/K]."""
        n = self.n_cells
        k = np.diag(1.0 / self.r_u)
        g = 1.0 / self.r_m
        for i in range(n - 1):
            k[i, i] += g
            k[i + 1, i + 1] += g
            k[i, i + 1] -= g
            k[i + 1, i] -= g
        return k


def step_temperatures(
    temps: np.ndarray,
    heats: np.ndarray,
    net: ThermalNetwork,
    dt: float,
) -> np.ndarray:
    """Advance all cell temperatures by one implicit (backward Euler) step.

    Solves (C/dt + K) T_new = C/dt T_old + q + T_amb/R_u, where K couples the
    ambient path and the pairwise-antisymmetric neighbour exchange.  The
    summed energy balance (exchange terms cancel) is asserted each step.
    """
    temps = np.asarray(temps, dtype=float)
    heats = np.asarray(heats, dtype=float)
    if temps.shape != (net.n_cells,) or heats.shape != (net.n_cells,):
        raise ValueError("temps and heats must match the network size")
    if not (dt > 0.0):
        raise ValueError(f"dt must be positive, got {dt!r}")
    cap = net.c_s / dt
    a = net.conductance_matrix()
    a[np.diag_indices_from(a)] += cap
    rhs = cap * temps + heats + net.t_amb / net.r_u
    t_new = np.linalg.solve(a, rhs)
    # Module-level energy balance: sum C dT/dt = sum q - sum (T - T_amb)/R_u.
    lhs = float(np.sum(net.c_s * (t_new - temps))) / dt
    rhs_check = float(np.sum(heats) - np.sum((t_new - net.t_amb) / net.r_u))
    scale = max(1.0, abs(lhs), abs(rhs_check))
    if abs(lhs - rhs_check) > 1e-9 * scale:
        raise FloatingPointError(
            f"thermal energy balance residual {abs(lhs - rhs_check):.3e} exceeds bound"
        )
    return t_new


def steady_state(heats: np.ndarray, net: ThermalNetwork) -> np.ndarray:
    """Temperatures satisfying K (T - T_amb) = q for constant heats."""
    heats = np.asarray(heats, dtype=float)
    return net.t_amb + np.linalg.solve(net.conductance_matrix(), heats)
