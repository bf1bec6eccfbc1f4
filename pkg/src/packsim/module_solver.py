"""Coupled simulation of N_p parallel cells through the interconnection ladder.

Time stepping is operator-split: (1) algebraic branch-current solve at frozen
states, (2) solid/electrolyte diffusion, (3) thermal network, (4) SEI growth.
Protocol phase ends (voltage or current cutoffs) are located by bisecting the
last time step to within 0.1 s.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from .aging import SeiState
from .espm import (
    DEFAULT_DISCRETIZATION,
    FAST_DISCRETIZATION,
    CellState,
    Discretization,
    StackedParams,
    build_stacked_params,
    theta_from_soc,
)
from .params import ConfigError, ModuleConfig, ProtocolPhase
from .thermal import r_m_from_geometry

__all__ = [
    "SolverError",
    "SimProfile",
    "DEFAULT_PROFILE",
    "FAST_PROFILE",
    "ModuleState",
    "CycleSummary",
    "SimTrace",
    "solve_branch_currents",
    "run_protocol",
    "simulate_module",
    "mse_current",
    "mse_temperature",
]

_EVENT_RESOLUTION_S = 0.1
_MAX_PHASE_STEPS = 2_000_000
_KCL_BOUND = 1e-9
_LADDER_BOUND = 1e-9


class SolverError(RuntimeError):
    """Newton stagnation or invariant violation, with simulation context."""

    def __init__(self, message, *, t=None, cycle=None, phase=None,
                 residual=None, currents=None):
        parts = [message]
        if cycle is not None:
            parts.append(f"cycle={cycle}")
        if phase is not None:
            parts.append(f"phase={phase}")
        if t is not None:
            parts.append(f"t={t:.3f}s")
        if residual is not None:
            parts.append(f"residual={residual:.3e}")
        if currents is not None:
            parts.append(f"iterate={np.array2string(np.asarray(currents), precision=6)}")
        super().__init__(" | ".join(parts))
        self.t = t
        self.cycle = cycle
        self.phase = phase
        self.residual = residual


@dataclass(frozen=True)
class SimProfile:
    """Numerical resolution tier: grids, step sizes, and trace decimation."""

    disc: Discretization = DEFAULT_DISCRETIZATION
    dt_cc: float = 1.0
    dt_cv: float = 1.0
    dt_rest: float = 10.0
    rate_scaled_dt: bool = False
    trace_every: int = 1
    dense_cycles: int = 1

    def phase_dt(self, phase: ProtocolPhase) -> float:
        if phase.kind == "rest":
            return self.dt_rest
        if phase.kind == "cv_hold":
            return self.dt_cv
        if self.rate_scaled_dt and phase.rate:
            return min(self.dt_cc / phase.rate, 3.0 * self.dt_cc)
        return self.dt_cc


DEFAULT_PROFILE = SimProfile()
FAST_PROFILE = SimProfile(
    disc=FAST_DISCRETIZATION,
    dt_cc=5.0,
    dt_cv=15.0,
    dt_rest=60.0,
    rate_scaled_dt=True,
    trace_every=10,
    dense_cycles=1,
)


@dataclass(frozen=True)
class ModuleState:
    """Snapshot of the coupled module at one time instant."""

    cells: tuple
    sei: tuple
    i_branch: np.ndarray
    i_mod: float
    v_mod: float
    t: float
    cycle_index: int
    phase_index: int


@dataclass
class CycleSummary:
    """Per-cycle aggregates computed from the undecimated solve stream."""

    cycle: int
    t_start: float
    t_end: float
    q_mod_ah: float = 0.0
    e_mod_wh: float = 0.0
    e_cells_wh: float = 0.0
    e_ladder_wh: float = 0.0
    sigma_i_a: float = 0.0
    sigma_t_k: float = 0.0
    dt_max_k: float = 0.0
    t_discharge_start: float = 0.0
    t_discharge_end: float = 0.0
    t_charge_s: float = 0.0
    t_cv_s: float = 0.0
    t_discharge_s: float = 0.0
    eod_soc: tuple = ()
    r_sei_end: tuple = ()
    t_avg_k: tuple = ()
    n_li_cycle: tuple = ()

    def to_dict(self) -> dict:
        return {
            "cycle": self.cycle,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "q_mod_ah": self.q_mod_ah,
            "e_mod_wh": self.e_mod_wh,
            "e_cells_wh": self.e_cells_wh,
            "e_ladder_wh": self.e_ladder_wh,
            "sigma_i_a": self.sigma_i_a,
            "sigma_t_k": self.sigma_t_k,
            "dt_max_k": self.dt_max_k,
            "t_discharge_start": self.t_discharge_start,
            "t_discharge_end": self.t_discharge_end,
            "t_charge_s": self.t_charge_s,
            "t_cv_s": self.t_cv_s,
            "t_discharge_s": self.t_discharge_s,
            "eod_soc": list(self.eod_soc),
            "r_sei_end": list(self.r_sei_end),
            "t_avg_k": list(self.t_avg_k),
            "n_li_cycle": list(self.n_li_cycle),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CycleSummary":
        kwargs = dict(d)
        for name in ("eod_soc", "r_sei_end", "t_avg_k", "n_li_cycle"):
            kwargs[name] = tuple(kwargs.get(name, ()))
        return cls(**kwargs)


class SimTrace:
    """Recorded time series (decimated) plus exact per-cycle summaries."""

    def __init__(self, *, t, v_mod, i_mod, cycle, phase, i_branch, t_cell,
                 soc, r_sei, summaries, diagnostics, meta):
        self.t = np.asarray(t, dtype=float)
        self.v_mod = np.asarray(v_mod, dtype=float)
        self.i_mod = np.asarray(i_mod, dtype=float)
        self.cycle = np.asarray(cycle, dtype=int)
        self.phase = np.asarray(phase, dtype=int)
        self.i_branch = np.asarray(i_branch, dtype=float)
        self.t_cell = np.asarray(t_cell, dtype=float)
        self.soc = np.asarray(soc, dtype=float)
        self.r_sei = np.asarray(r_sei, dtype=float)
        self.summaries = list(summaries)
        self.diagnostics = dict(diagnostics)
        self.meta = dict(meta)
        if self.t.size > 1 and np.any(np.diff(self.t) <= 0):
            raise AssertionError("trace time axis must be strictly increasing")

    @property
    def n_p(self) -> int:
        return self.i_branch.shape[1]

    def window(self, t0: float, t1: float) -> slice:
        i0 = int(np.searchsorted(self.t, t0, side="left"))
        i1 = int(np.searchsorted(self.t, t1, side="right"))
        return slice(i0, i1)

    def discharge_window(self, cycle: int = 0) -> tuple:
        s = self.summaries[cycle]
        return s.t_discharge_start, s.t_discharge_end

    # -- serialization ------------------------------------------------------

    _SCALAR_COLS = ("t", "v_mod", "i_mod", "cycle", "phase")
    _CELL_COLS = ("i_branch", "t_cell", "soc", "r_sei")

    def series_columns(self) -> dict:
        cols = {name: getattr(self, name) for name in self._SCALAR_COLS}
        for name in self._CELL_COLS:
            arr = getattr(self, name)
            for k in range(self.n_p):
                cols[f"{name}_{k + 1}"] = arr[:, k]
        return cols

    def save_npz(self, path) -> None:
        np.savez_compressed(
            path,
            t=self.t, v_mod=self.v_mod, i_mod=self.i_mod,
            cycle=self.cycle, phase=self.phase,
            i_branch=self.i_branch, t_cell=self.t_cell,
            soc=self.soc, r_sei=self.r_sei,
            summaries=json.dumps([s.to_dict() for s in self.summaries]),
            diagnostics=json.dumps(self.diagnostics),
            meta=json.dumps(self.meta),
        )

    @classmethod
    def load_npz(cls, path) -> "SimTrace":
        with np.load(path, allow_pickle=False) as data:
            return cls(
                t=data["t"], v_mod=data["v_mod"], i_mod=data["i_mod"],
                cycle=data["cycle"], phase=data["phase"],
                i_branch=data["i_branch"], t_cell=data["t_cell"],
                soc=data["soc"], r_sei=data["r_sei"],
                summaries=[CycleSummary.from_dict(d)
                           for d in json.loads(str(data["summaries"]))],
                diagnostics=json.loads(str(data["diagnostics"])),
                meta=json.loads(str(data["meta"])),
            )


_PHASE_CODES = {"cc_charge": 0, "cv_hold": 1, "rest": 2, "cc_discharge": 3}


class _Sample:
    """One algebraic-solve output at a time instant (pre-advance)."""

    __slots__ = ("t", "i_mod", "v_mod", "currents", "temps", "soc", "r_sei",
                 "v_cells", "ladder_loss", "res_kcl", "res_ladder")

    def __init__(self, t, out_cells, out_scalars):
        self.t = t
        self.i_mod = out_scalars[K.OS_IMOD]
        self.v_mod = out_scalars[K.OS_VMOD]
        self.res_kcl = out_scalars[K.OS_RES_KCL]
        self.res_ladder = out_scalars[K.OS_RES_LADDER]
        self.ladder_loss = out_scalars[K.OS_LADDER_LOSS]
        self.currents = out_cells[K.OC_CURRENT].copy()
        self.v_cells = out_cells[K.OC_VOLTAGE].copy()
        self.temps = out_cells[K.OC_TEMP].copy()
        self.soc = out_cells[K.OC_SOC].copy()
        self.r_sei = out_cells[K.OC_RSEI].copy()


def _std1(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1))


class _ModuleSim:
    """Mutable stacked-state simulation of one module configuration."""

    def __init__(self, cfg: ModuleConfig, profile: SimProfile, *,
                 sei_enabled: bool, trace_every: int, dense_cycles: int):
        self.cfg = cfg
        self.profile = profile
        self.sei_enabled = sei_enabled
        self.trace_every = max(1, int(trace_every))
        self.dense_cycles = max(0, int(dense_cycles))
        self.pack: StackedParams = build_stacked_params(cfg.cells, profile.disc)
        n = cfg.n_p
        disc = profile.disc

        self.c_s_n = np.empty((n, disc.n_r))
        self.c_s_p = np.empty((n, disc.n_r))
        self.c_e = np.empty((n, disc.n_x))
        for b, cell in enumerate(cfg.cells):
            self.c_s_n[b] = theta_from_soc(cell, 0.0, "n") * cell.c_s_max_n
            self.c_s_p[b] = theta_from_soc(cell, 0.0, "p") * cell.c_s_max_p
            self.c_e[b] = cell.c_e0
        self.temps = np.full(n, cfg.t_amb)
        self.delta_sei = np.array([c.delta_sei0 for c in cfg.cells])
        film_area = np.array(
            [c.specific_area("n") * c.l_n * c.area for c in cfg.cells]
        )
        kappa = np.array([c.kappa_sei for c in cfg.cells])
        self.r_sei = self.delta_sei / (kappa * film_area)
        self.n_li_lost = np.zeros(n)
        self.n_li_cycle = np.zeros(n)
        self.currents = np.zeros(n)

        first = cfg.cells[0]
        self.r_m = r_m_from_geometry(
            first.diameter, first.height, cfg.spacing,
            first.k_air, first.k_tabs, first.tab_area,
        )
        self.t_amb = cfg.t_amb
        self.r_int = cfg.r_int

        # Zero-initialized so warm starts are deterministic even when the
        # first protocol phase is a CV hold.
        self.out_cells = np.zeros((K.N_OUT_CELL_ROWS, n))
        self.out_scalars = np.zeros(K.N_OUT_SCALARS)
        self.work = np.zeros((n, K.N_WORK_COLS))
        self.frozen = np.zeros((n, K.N_FROZEN_COLS))

        self._snap = {}
        self.t = 0.0
        self._step_counter = 0

        # Trace columns
        self._ser_t: list = []
        self._ser_v: list = []
        self._ser_i: list = []
        self._ser_cycle: list = []
        self._ser_phase: list = []
        self._ser_cells: list = []
        self.summaries: list = []
        self.diag = {
            "max_res_kcl": 0.0,
            "max_res_ladder": 0.0,
            "max_thermal_residual": 0.0,
            "max_newton_iters": 0,
            "clamp_events": 0,
            "steps": 0,
            "bisections": 0,
        }
        self._cycle_idx = 0
        self._phase_idx = 0

    # -- kernel wrappers ----------------------------------------------------

    def _solve(self, mode: int, i_mod: float, v_hold: float) -> _Sample:
        ok = K.solve_module_kernel(
            self.c_s_n, self.c_s_p, self.c_e, self.temps, self.r_sei,
            self.currents,
            self.pack.p, self.pack.dr_n, self.pack.dr_p,
            self.pack.vol_n, self.pack.vol_p, self.pack.vsum_n, self.pack.vsum_p,
            self.pack.ocpn_breaks, self.pack.ocpn_coefs,
            self.pack.ocpp_breaks, self.pack.ocpp_coefs,
            self.pack.entn_breaks, self.pack.entn_coefs,
            self.pack.entp_breaks, self.pack.entp_coefs,
            self.pack.n_anode, self.pack.n_sep, self.r_int,
            mode, i_mod, v_hold,
            self.out_cells, self.out_scalars, self.work, self.frozen,
        )
        if not ok:
            # Retry once from the symmetric split before giving up.
            self.currents[:] = i_mod / self.cfg.n_p
            ok = K.solve_module_kernel(
                self.c_s_n, self.c_s_p, self.c_e, self.temps, self.r_sei,
                self.currents,
                self.pack.p, self.pack.dr_n, self.pack.dr_p,
                self.pack.vol_n, self.pack.vol_p, self.pack.vsum_n,
                self.pack.vsum_p,
                self.pack.ocpn_breaks, self.pack.ocpn_coefs,
                self.pack.ocpp_breaks, self.pack.ocpp_coefs,
                self.pack.entn_breaks, self.pack.entn_coefs,
                self.pack.entp_breaks, self.pack.entp_coefs,
                self.pack.n_anode, self.pack.n_sep, self.r_int,
                mode, i_mod, v_hold,
                self.out_cells, self.out_scalars, self.work, self.frozen,
            )
        if not ok:
            raise SolverError(
                "branch-current Newton failed to converge",
                t=self.t, cycle=self._cycle_idx, phase=self._phase_idx,
                residual=max(self.out_scalars[K.OS_RES_KCL],
                             self.out_scalars[K.OS_RES_LADDER]),
                currents=self.currents,
            )
        sample = _Sample(self.t, self.out_cells, self.out_scalars)
        scale = max(1.0, abs(sample.i_mod))
        if sample.res_kcl > _KCL_BOUND * scale or sample.res_ladder > _LADDER_BOUND:
            raise SolverError(
                "accepted step violates Kirchhoff/ladder residual bound",
                t=self.t, cycle=self._cycle_idx, phase=self._phase_idx,
                residual=max(sample.res_kcl, sample.res_ladder),
                currents=self.currents,
            )
        d = self.diag
        d["max_res_kcl"] = max(d["max_res_kcl"], sample.res_kcl)
        d["max_res_ladder"] = max(d["max_res_ladder"], sample.res_ladder)
        d["max_newton_iters"] = max(
            d["max_newton_iters"], int(self.out_scalars[K.OS_NEWTON_ITERS])
        )
        d["clamp_events"] += int(self.out_scalars[K.OS_CLAMPS])
        return sample

    def _advance(self, dt: float) -> None:
        clamps, thermal_res = K.advance_states_kernel(
            self.c_s_n, self.c_s_p, self.c_e, self.temps, self.delta_sei,
            self.r_sei, self.n_li_lost, self.n_li_cycle, self.currents,
            self.pack.p, self.pack.vol_n, self.pack.vol_p,
            self.pack.face_w_n, self.pack.face_w_p,
            self.pack.a_out_n, self.pack.a_out_p,
            self.pack.cap_e, self.pack.face_g_e, self.pack.src_w_e,
            self.pack.r_u, self.pack.c_s_heat, self.r_m, self.t_amb,
            self.work, self.frozen,
            dt, self.sei_enabled,
        )
        if abs(thermal_res) > 1e-9 * max(1.0, float(np.max(np.abs(self.temps)))):
            raise SolverError(
                "thermal energy balance residual out of bounds",
                t=self.t, cycle=self._cycle_idx, phase=self._phase_idx,
                residual=abs(thermal_res),
            )
        self.diag["clamp_events"] += int(clamps)
        self.diag["max_thermal_residual"] = max(
            self.diag["max_thermal_residual"], abs(thermal_res)
        )
        self.diag["steps"] += 1
        self.t += dt

    # -- state snapshot for event bisection ----------------------------------

    def _snapshot(self) -> None:
        s = self._snap
        for name in ("c_s_n", "c_s_p", "c_e", "temps", "delta_sei", "r_sei",
                     "n_li_lost", "n_li_cycle", "currents", "work", "frozen"):
            arr = getattr(self, name)
            buf = s.get(name)
            if buf is None:
                s[name] = arr.copy()
            else:
                np.copyto(buf, arr)
        s["t"] = self.t

    def _restore(self) -> None:
        s = self._snap
        for name in ("c_s_n", "c_s_p", "c_e", "temps", "delta_sei", "r_sei",
                     "n_li_lost", "n_li_cycle", "currents", "work", "frozen"):
            np.copyto(getattr(self, name), s[name])
        self.t = s["t"]

    # -- recording ------------------------------------------------------------

    def _record(self, sample: _Sample, phase_code: int) -> None:
        if self._ser_t and sample.t <= self._ser_t[-1]:
            return
        self._ser_t.append(sample.t)
        self._ser_v.append(sample.v_mod)
        self._ser_i.append(sample.i_mod)
        self._ser_cycle.append(self._cycle_idx)
        self._ser_phase.append(phase_code)
        self._ser_cells.append(
            (sample.currents, sample.temps, sample.soc, sample.r_sei)
        )

    # -- cycle bookkeeping ----------------------------------------------------

    def _begin_cycle(self) -> None:
        self._cyc = CycleSummary(
            cycle=self._cycle_idx, t_start=self.t, t_end=self.t
        )
        self._cyc_tavg = np.zeros(self.cfg.n_p)
        self._eod_soc: Optional[np.ndarray] = None

    def _accumulate(self, prev: _Sample, new: _Sample, phase_kind: str) -> None:
        dt = new.t - prev.t
        if dt <= 0:
            return
        w = 0.5 * dt
        self._cyc_tavg += w * (prev.temps + new.temps)
        spread = float(np.max(new.temps) - np.min(new.temps))
        self._cyc.dt_max_k = max(self._cyc.dt_max_k, spread)
        if phase_kind == "cc_discharge":
            c = self._cyc
            c.q_mod_ah += w * (prev.i_mod + new.i_mod) / 3600.0
            c.e_mod_wh += w * (
                prev.v_mod * prev.i_mod + new.v_mod * new.i_mod
            ) / 3600.0
            c.e_cells_wh += w * (
                float(prev.v_cells @ prev.currents)
                + float(new.v_cells @ new.currents)
            ) / 3600.0
            c.e_ladder_wh += w * (prev.ladder_loss + new.ladder_loss) / 3600.0
            c.sigma_i_a += w * (_std1(prev.currents) + _std1(new.currents))
            c.sigma_t_k += w * (_std1(prev.temps) + _std1(new.temps))

    def _end_cycle(self) -> None:
        c = self._cyc
        c.t_end = self.t
        duration = max(c.t_end - c.t_start, 1e-30)
        c.t_avg_k = tuple(self._cyc_tavg / duration)
        dis = max(c.t_discharge_end - c.t_discharge_start, 0.0)
        if dis > 0:
            c.sigma_i_a /= dis
            c.sigma_t_k /= dis
        c.eod_soc = tuple(self._eod_soc) if self._eod_soc is not None else ()
        c.r_sei_end = tuple(self.r_sei)
        c.n_li_cycle = tuple(self.n_li_cycle)
        self.summaries.append(c)
        # Debit the cyclable lithium consumed by the SEI from the anode.
        if self.sei_enabled and np.any(self.n_li_cycle > 0.0):
            for b, cell in enumerate(self.cfg.cells):
                dc = self.n_li_cycle[b] / (cell.eps_s_n * cell.l_n * cell.area)
                self.c_s_n[b] -= dc
                np.clip(self.c_s_n[b], 0.0, None, out=self.c_s_n[b])
        self.n_li_cycle[:] = 0.0

    # -- phase execution --------------------------------------------------------

    @staticmethod
    def _crossed(sample: _Sample, phase: ProtocolPhase) -> bool:
        if phase.kind == "cc_charge":
            return sample.v_mod >= phase.cutoff_voltage
        if phase.kind == "cc_discharge":
            return sample.v_mod <= phase.cutoff_voltage
        if phase.kind == "cv_hold":
            return abs(sample.i_mod) <= phase.cutoff_current
        return False

    def _phase_mode(self, phase: ProtocolPhase) -> tuple:
        n_p = self.cfg.n_p
        if phase.kind == "cc_charge":
            return K.MODE_CC, -phase.rate * self.cfg.q_nominal_ah * n_p, 0.0
        if phase.kind == "cc_discharge":
            return K.MODE_CC, phase.rate * self.cfg.q_nominal_ah * n_p, 0.0
        if phase.kind == "cv_hold":
            return K.MODE_CV, float(self.out_scalars[K.OS_IMOD]), phase.voltage
        return K.MODE_CC, 0.0, 0.0

    def run_phase(self, phase: ProtocolPhase) -> None:
        mode, i_mod, v_hold = self._phase_mode(phase)
        code = _PHASE_CODES[phase.kind]
        dt_full = self.profile.phase_dt(phase)
        t_phase_start = self.t
        record_every = (
            1 if self._cycle_idx < self.dense_cycles else self.trace_every
        )

        sample = self._solve(mode, i_mod, v_hold)
        if phase.kind == "cv_hold":
            i_mod = sample.i_mod
        if phase.kind == "cc_discharge":
            self._cyc.t_discharge_start = self.t
        if self._crossed(sample, phase):
            # Cutoff already satisfied; zero-duration phase.
            if phase.kind == "cc_discharge":
                self._cyc.t_discharge_end = self.t
                self._eod_soc = sample.soc.copy()
            return
        self._record(sample, code)
        prev = sample
        steps_in_phase = 0

        while True:
            steps_in_phase += 1
            if steps_in_phase > _MAX_PHASE_STEPS:
                raise SolverError(
                    f"phase {phase.kind} exceeded {_MAX_PHASE_STEPS} steps",
                    t=self.t, cycle=self._cycle_idx, phase=self._phase_idx,
                )
            if phase.kind == "rest":
                remaining = (t_phase_start + phase.duration) - self.t
                if remaining <= 1e-9:
                    break
                dt = min(dt_full, remaining)
            else:
                dt = dt_full

            self._snapshot()
            self._advance(dt)
            sample = self._solve(mode, i_mod, v_hold)

            if phase.kind != "rest" and self._crossed(sample, phase):
                sample = self._bisect_event(phase, mode, i_mod, v_hold, dt)
                self._accumulate(prev, sample, phase.kind)
                self._record(sample, code)
                prev = sample
                break

            self._accumulate(prev, sample, phase.kind)
            if steps_in_phase % record_every == 0:
                self._record(sample, code)
            prev = sample

        if phase.kind == "rest":
            # Land exactly on the rest end with a final sample.
            sample = self._solve(mode, i_mod, v_hold)
            self._accumulate(prev, sample, phase.kind)
            self._record(sample, code)

        duration = self.t - t_phase_start
        if phase.kind == "cc_charge":
            self._cyc.t_charge_s += duration
        elif phase.kind == "cv_hold":
            self._cyc.t_cv_s += duration
        elif phase.kind == "cc_discharge":
            self._cyc.t_discharge_s += duration
            self._cyc.t_discharge_end = self.t
            self._eod_soc = sample.soc.copy()

    def _bisect_event(self, phase: ProtocolPhase, mode: int, i_mod: float,
                      v_hold: float, dt_full: float) -> _Sample:
        """Shrink the final step of a phase so the cutoff lands within 0.1 s."""
        lo, hi = 0.0, dt_full
        while hi - lo > _EVENT_RESOLUTION_S:
            mid = 0.5 * (lo + hi)
            self._restore()
            self._advance(mid)
            sample = self._solve(mode, i_mod, v_hold)
            self.diag["bisections"] += 1
            if self._crossed(sample, phase):
                hi = mid
            else:
                lo = mid
        self._restore()
        self._advance(hi)
        return self._solve(mode, i_mod, v_hold)

    # -- top level ----------------------------------------------------------------

    def run(self) -> SimTrace:
        for cycle in range(self.cfg.n_cycles):
            self._cycle_idx = cycle
            self._begin_cycle()
            for phase_idx, phase in enumerate(self.cfg.protocol.phases):
                self._phase_idx = phase_idx
                self.run_phase(phase)
            self._end_cycle()
        return self._build_trace()

    def _build_trace(self) -> SimTrace:
        n_samples = len(self._ser_t)
        n = self.cfg.n_p
        i_branch = np.empty((n_samples, n))
        t_cell = np.empty((n_samples, n))
        soc = np.empty((n_samples, n))
        r_sei = np.empty((n_samples, n))
        for k, (cur, temps, s, rs) in enumerate(self._ser_cells):
            i_branch[k] = cur
            t_cell[k] = temps
            soc[k] = s
            r_sei[k] = rs
        meta = {
            "n_p": n,
            "seed": self.cfg.seed,
            "r_int": self.cfg.r_int,
            "spacing": self.cfg.spacing,
            "t_amb": self.cfg.t_amb,
            "n_cycles": self.cfg.n_cycles,
            "sei_enabled": self.sei_enabled,
            "profile_n_r": self.profile.disc.n_r,
        }
        return SimTrace(
            t=self._ser_t, v_mod=self._ser_v, i_mod=self._ser_i,
            cycle=self._ser_cycle, phase=self._ser_phase,
            i_branch=i_branch, t_cell=t_cell, soc=soc, r_sei=r_sei,
            summaries=self.summaries, diagnostics=self.diag, meta=meta,
        )

    def module_state(self) -> ModuleState:
        cells = []
        sei = []
        for b, cell in enumerate(self.cfg.cells):
            cs = CellState(
                c_s_n=self.c_s_n[b].copy(), c_s_p=self.c_s_p[b].copy(),
                c_e=self.c_e[b].copy(), t_cell=float(self.temps[b]),
                r_sei=float(self.r_sei[b]), soc=float(self.out_cells[K.OC_SOC, b]),
            )
            cells.append(cs)
            sei.append(SeiState(
                delta_sei=float(self.delta_sei[b]),
                r_sei=float(self.r_sei[b]),
                n_li_lost=float(self.n_li_lost[b]),
            ))
        return ModuleState(
            cells=tuple(cells), sei=tuple(sei),
            i_branch=self.currents.copy(),
            i_mod=float(self.out_scalars[K.OS_IMOD]),
            v_mod=float(self.out_scalars[K.OS_VMOD]),
            t=self.t, cycle_index=self._cycle_idx, phase_index=self._phase_idx,
        )


def run_protocol(
    cfg: ModuleConfig,
    profile: Optional[SimProfile] = None,
    *,
    sei_enabled: bool = True,
    trace_every: Optional[int] = None,
    dense_cycles: Optional[int] = None,
) -> SimTrace:
    """Execute cfg.n_cycles repetitions of the configured cycling protocol.

    CC phases terminate on the module voltage crossing their cutoff, the CV
    phase holds the module voltage and terminates when the module current
    magnitude falls below its cutoff; event times are located to within 0.1 s.
    """
    trace, _state = simulate_module(
        cfg, profile, sei_enabled=sei_enabled,
        trace_every=trace_every, dense_cycles=dense_cycles,
    )
    return trace


def simulate_module(
    cfg: ModuleConfig,
    profile: Optional[SimProfile] = None,
    *,
    sei_enabled: bool = True,
    trace_every: Optional[int] = None,
    dense_cycles: Optional[int] = None,
) -> tuple:
    """Like :func:`run_protocol` but also returns the final ModuleState."""
    profile = profile or DEFAULT_PROFILE
    sim = _ModuleSim(
        cfg, profile,
        sei_enabled=sei_enabled,
        trace_every=profile.trace_every if trace_every is None else trace_every,
        dense_cycles=profile.dense_cycles if dense_cycles is None else dense_cycles,
    )
    trace = sim.run()
    return trace, sim.module_state()


def solve_branch_currents(
    states: Sequence[CellState],
    i_mod: float,
    r_int: float,
    params: Sequence,
    *,
    warm_start: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Branch currents satisfying the interconnection-ladder system.

    Standalone algebraic solve at the given frozen cell states; returns the
    per-cell currents (discharge positive) summing to ``i_mod``.
    """
    n = len(states)
    if n < 2:
        raise ConfigError("need at least two parallel cells")
    if len(params) != n:
        raise ConfigError("params list must match states list")
    if r_int < 0:
        raise ConfigError("r_int must be >= 0")
    disc_nr = states[0].c_s_n.size
    disc_nx = states[0].c_e.size
    from .espm import _disc_for_state

    disc = _disc_for_state(states[0], params[0])
    if disc.n_r != disc_nr or disc.n_x != disc_nx:
        raise ConfigError("state grids do not match a known discretization")
    pack = build_stacked_params(tuple(params), disc)
    c_s_n = np.stack([s.c_s_n for s in states])
    c_s_p = np.stack([s.c_s_p for s in states])
    c_e = np.stack([s.c_e for s in states])
    temps = np.array([s.t_cell for s in states])
    r_sei = np.array([s.r_sei for s in states])
    currents = (
        warm_start.astype(float).copy()
        if warm_start is not None
        else np.full(n, i_mod / n)
    )
    out_cells = np.empty((K.N_OUT_CELL_ROWS, n))
    out_scalars = np.empty(K.N_OUT_SCALARS)
    work = np.empty((n, K.N_WORK_COLS))
    frozen = np.empty((n, K.N_FROZEN_COLS))
    ok = K.solve_module_kernel(
        c_s_n, c_s_p, c_e, temps, r_sei, currents,
        pack.p, pack.dr_n, pack.dr_p, pack.vol_n, pack.vol_p,
        pack.vsum_n, pack.vsum_p,
        pack.ocpn_breaks, pack.ocpn_coefs, pack.ocpp_breaks, pack.ocpp_coefs,
        pack.entn_breaks, pack.entn_coefs, pack.entp_breaks, pack.entp_coefs,
        pack.n_anode, pack.n_sep, float(r_int),
        K.MODE_CC, float(i_mod), 0.0,
        out_cells, out_scalars, work, frozen,
    )
    if not ok:
        currents[:] = i_mod / n
        ok = K.solve_module_kernel(
            c_s_n, c_s_p, c_e, temps, r_sei, currents,
            pack.p, pack.dr_n, pack.dr_p, pack.vol_n, pack.vol_p,
            pack.vsum_n, pack.vsum_p,
            pack.ocpn_breaks, pack.ocpn_coefs, pack.ocpp_breaks, pack.ocpp_coefs,
            pack.entn_breaks, pack.entn_coefs, pack.entp_breaks, pack.entp_coefs,
            pack.n_anode, pack.n_sep, float(r_int),
            K.MODE_CC, float(i_mod), 0.0,
            out_cells, out_scalars, work, frozen,
        )
    if not ok:
        raise SolverError(
            "branch-current Newton failed to converge",
            residual=max(out_scalars[K.OS_RES_KCL], out_scalars[K.OS_RES_LADDER]),
            currents=currents,
        )
    return currents


def _channel_mse(trace_a: SimTrace, trace_b: SimTrace, attr: str) -> np.ndarray:
    if trace_a.n_p != trace_b.n_p:
        raise ValueError("traces have different cell counts")
    lo = max(trace_a.t[0], trace_b.t[0])
    hi = min(trace_a.t[-1], trace_b.t[-1])
    if not (hi > lo):
        raise ValueError(
            f"traces do not overlap in time: [{trace_a.t[0]}, {trace_a.t[-1]}] "
            f"vs [{trace_b.t[0]}, {trace_b.t[-1]}]"
        )
    grid = np.union1d(trace_a.t, trace_b.t)
    grid = grid[(grid >= lo) & (grid <= hi)]
    arr_a = getattr(trace_a, attr)
    arr_b = getattr(trace_b, attr)
    out = np.empty(trace_a.n_p)
    for k in range(trace_a.n_p):
        ya = np.interp(grid, trace_a.t, arr_a[:, k])
        yb = np.interp(grid, trace_b.t, arr_b[:, k])
        out[k] = float(np.mean((ya - yb) ** 2))
    return out


def mse_current(trace_a: SimTrace, trace_b: SimTrace) -> np.ndarray:
    """Per-cell mean squared branch-current difference [A^2].

    Both traces are linearly resampled onto the union of their time grids
    inside the overlapping window, making the result symmetric.
    """
    return _channel_mse(trace_a, trace_b, "i_branch")


def mse_temperature(trace_a: SimTrace, trace_b: SimTrace) -> np.ndarray:
    """Per-cell mean squared cell-temperature difference [K^2]."""
    return _channel_mse(trace_a, trace_b, "t_cell")
