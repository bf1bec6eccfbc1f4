"""Monte Carlo campaign: sample module configurations, simulate them in a
process pool, and persist one tidy results table for the statistics layer.

Child seeds derive deterministically from the master seed and module index,
results are keyed by index, and per-module completion markers make campaigns
resumable; the aggregated table is byte-identical regardless of worker count
or completion order.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .ioutil import atomic_write_text, write_csv, read_csv_columns
from .module_solver import (
    DEFAULT_PROFILE,
    FAST_PROFILE,
    SimProfile,
    SolverError,
    run_protocol,
)
from .params import (
    ConfigError,
    ModuleConfig,
    SamplingRanges,
    default_cell,
    default_protocol,
    reference_module_config,
    sample_module,
)
from .stats import compute_predictors, compute_responses

__all__ = [
    "CampaignSpec",
    "child_seed",
    "result_columns",
    "run_campaign",
    "read_results",
    "RESULTS_FILENAME",
]

RESULTS_FILENAME = "results.csv"
_MODULE_DIR = "modules"
_REFERENCE_FILE = "reference.json"


@dataclass(frozen=True)
class CampaignSpec:
    """Definition of one sweep: module count, cycling depth, sampling ranges."""

    n_modules: int = 500
    n_cycles: int = 500
    n_p: int = 4
    t_amb: float = 298.15
    master_seed: int = 0
    ranges: SamplingRanges = field(default_factory=SamplingRanges)
    profile: str = "default"  # default | fast
    out_dir: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.n_modules, int) or self.n_modules < 1:
            raise ConfigError(f"n_modules must be >= 1, got {self.n_modules!r}")
        if not isinstance(self.n_cycles, int) or self.n_cycles < 1:
            raise ConfigError(f"n_cycles must be >= 1, got {self.n_cycles!r}")
        if self.n_p < 2:
            raise ConfigError("n_p must be >= 2")
        if self.profile not in ("default", "fast"):
            raise ConfigError(f"profile must be 'default' or 'fast', got {self.profile!r}")

    def sim_profile(self) -> SimProfile:
        return FAST_PROFILE if self.profile == "fast" else DEFAULT_PROFILE

    def to_dict(self) -> dict:
        return {
            "n_modules": self.n_modules,
            "n_cycles": self.n_cycles,
            "n_p": self.n_p,
            "t_amb": self.t_amb,
            "master_seed": self.master_seed,
            "ranges": self.ranges.to_dict(),
            "profile": self.profile,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CampaignSpec":
        kwargs = dict(data)
        if "ranges" in kwargs and isinstance(kwargs["ranges"], dict):
            kwargs["ranges"] = SamplingRanges.from_dict(kwargs["ranges"])
        return cls(**kwargs)

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "CampaignSpec":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        try:
            return cls.from_dict(data)
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def child_seed(master_seed: int, index: int) -> int:
    """Deterministic per-module seed from a splittable seed sequence."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(index,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def module_config_for(spec: CampaignSpec, index: int) -> ModuleConfig:
    """The sampled configuration of module ``index`` of the campaign."""
    nominal = default_cell(spec.ranges.q_nominal_ah)
    return sample_module(
        child_seed(spec.master_seed, index),
        nominal,
        spec.ranges,
        n_p=spec.n_p,
        t_amb=spec.t_amb,
        n_cycles=spec.n_cycles,
        protocol=default_protocol(spec.n_p),
    )


def result_columns(n_p: int) -> list:
    cols = [
        "module_id", "seed", "status", "error",
        "r_int", "sp",
        "mu_eps_n", "mu_eps_p", "sigma_eps_n", "sigma_eps_p", "loc",
        "mu_comb", "sigma_comb", "loc_n", "loc_p", "mu_soc", "sigma_soc",
        "sigma_i", "sigma_t", "delta_t_max",
        "pct_delta_e", "pct_delta_q", "e_lost", "sigma_r_sei",
        "q_mod_first_ah", "e_mod_first_wh", "q_mod_last_ah", "e_mod_last_wh",
        "rsei_monotone",
    ]
    cols += [f"rsei_eos_{k + 1}" for k in range(n_p)]
    cols += [f"t_avg_{k + 1}" for k in range(n_p)]
    cols += ["max_res_kcl", "max_res_ladder", "max_thermal_residual",
             "clamp_events", "steps"]
    return cols


def _simulate_module_row(spec_dict: dict, index: int, ref_values: dict,
                         out_dir: Optional[str], keep_traces: bool) -> dict:
    """Worker: simulate one sampled module and distill its results row."""
    spec = CampaignSpec.from_dict(spec_dict)
    cfg = module_config_for(spec, index)
    row = {
        "module_id": index,
        "seed": cfg.seed,
        "status": "ok",
        "error": None,
        "r_int": cfg.r_int,
        "sp": cfg.spacing,
    }
    try:
        trace = run_protocol(cfg, spec.sim_profile())
    except (SolverError, FloatingPointError) as exc:
        row["status"] = "failed:solver"
        row["error"] = str(exc)[:300]
        return row

    predictors = compute_predictors(cfg, trace)
    responses = compute_responses(trace)
    row.update(predictors.as_dict())
    row.update(responses.as_dict())

    first = trace.summaries[0]
    last = trace.summaries[-1]
    e_ref = ref_values["e_mod_wh"]
    q_ref = ref_values["q_mod_ah"]
    row["pct_delta_e"] = 100.0 * (first.e_mod_wh - e_ref) / e_ref
    row["pct_delta_q"] = 100.0 * (first.q_mod_ah - q_ref) / q_ref
    row["q_mod_first_ah"] = first.q_mod_ah
    row["e_mod_first_wh"] = first.e_mod_wh
    row["q_mod_last_ah"] = last.q_mod_ah
    row["e_mod_last_wh"] = last.e_mod_wh

    rsei_history = np.array([s.r_sei_end for s in trace.summaries])
    monotone = bool(np.all(np.diff(rsei_history, axis=0) >= -1e-18)) if (
        len(trace.summaries) > 1
    ) else True
    row["rsei_monotone"] = monotone
    for k in range(cfg.n_p):
        row[f"rsei_eos_{k + 1}"] = float(rsei_history[-1, k])
    t_avg = np.mean([s.t_avg_k for s in trace.summaries], axis=0)
    for k in range(cfg.n_p):
        row[f"t_avg_{k + 1}"] = float(t_avg[k])

    d = trace.diagnostics
    row["max_res_kcl"] = d["max_res_kcl"]
    row["max_res_ladder"] = d["max_res_ladder"]
    row["max_thermal_residual"] = d["max_thermal_residual"]
    row["clamp_events"] = d["clamp_events"]
    row["steps"] = d["steps"]

    if keep_traces and out_dir is not None:
        trace_dir = Path(out_dir) / "traces"
        trace_dir.mkdir(parents=True, exist_ok=True)
        trace.save_npz(trace_dir / f"module_{index:05d}.npz")
    return row


def _reference_values(spec: CampaignSpec, out_dir: Path) -> dict:
    """First-cycle energy/capacity of the unperturbed baseline (cached)."""
    ref_path = out_dir / _REFERENCE_FILE
    if ref_path.exists():
        with open(ref_path) as fh:
            return json.load(fh)
    cfg = reference_module_config(
        n_p=spec.n_p, t_amb=spec.t_amb, n_cycles=1,
        q_nominal_ah=spec.ranges.q_nominal_ah, ranges=spec.ranges,
    )
    trace = run_protocol(cfg, spec.sim_profile())
    first = trace.summaries[0]
    values = {
        "e_mod_wh": first.e_mod_wh,
        "q_mod_ah": first.q_mod_ah,
        "sigma_i": first.sigma_i_a,
        "sigma_t": first.sigma_t_k,
        "dt_max_k": first.dt_max_k,
    }
    atomic_write_text(ref_path, json.dumps(values, indent=1) + "\n")
    return values


def _marker_path(out_dir: Path, index: int) -> Path:
    return out_dir / _MODULE_DIR / f"module_{index:05d}.json"


def run_campaign(
    spec: CampaignSpec,
    out_dir,
    *,
    workers: Optional[int] = None,
    keep_traces: bool = False,
    progress=None,
) -> list:
    """Simulate the whole campaign and write ``results.csv`` in out_dir.

    Individual module failures are recorded in the status column and do not
    stop the campaign.  Completed modules are skipped on re-entry, so an
    interrupted campaign resumes to the identical table.
    """
    out_dir = Path(out_dir)
    (out_dir / _MODULE_DIR).mkdir(parents=True, exist_ok=True)
    if workers is None:
        workers = int(os.environ.get("PACKSIM_WORKERS", "0")) or (
            os.cpu_count() or 1
        )
    workers = max(1, min(workers, spec.n_modules))

    ref_values = _reference_values(spec, out_dir)
    spec_dict = spec.to_dict()

    pending = [
        i for i in range(spec.n_modules)
        if not _marker_path(out_dir, i).exists()
    ]

    def finish_row(index: int, row: dict) -> None:
        atomic_write_text(
            _marker_path(out_dir, index), json.dumps(row, indent=0) + "\n"
        )
        if progress:
            progress(index, row["status"])

    if pending:
        if workers == 1:
            for i in pending:
                finish_row(i, _simulate_module_row(
                    spec_dict, i, ref_values, str(out_dir), keep_traces))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = {
                    pool.submit(_simulate_module_row, spec_dict, i, ref_values,
                                str(out_dir), keep_traces): i
                    for i in pending
                }
                for fut in as_completed(futures):
                    finish_row(futures[fut], fut.result())

    rows = []
    for i in range(spec.n_modules):
        with open(_marker_path(out_dir, i)) as fh:
            rows.append(json.load(fh))
    columns = result_columns(spec.n_p)
    write_csv(out_dir / RESULTS_FILENAME, columns, rows)
    return rows


def read_results(path) -> dict:
    """Load a results table into {column: array}; see docs/formats.md."""
    return read_csv_columns(path)
