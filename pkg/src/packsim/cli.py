"""Command-line entry point: simulate / sweep / analyze / arrange / export.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime/solver
failure.  Every command writes a run manifest next to its outputs with
enough information to reproduce the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .arrange import all_orders, arrange_descending_capacity, compare_arrangements
from .ioutil import atomic_write_text, read_csv_columns, sha256_file, write_csv
from .module_solver import (
    DEFAULT_PROFILE,
    FAST_PROFILE,
    SimTrace,
    SolverError,
    run_protocol,
)
from .montecarlo import CampaignSpec, run_campaign
from .params import ConfigError, load_config
from .stats import (
    BASIC_PREDICTORS,
    EXTENDED_PREDICTORS,
    RESPONSE_COLUMNS,
    pareto_report,
    relative_importance,
    stepwise_fit,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _utcnow() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


class _Manifest:
    """Run provenance: version, inputs, seed, timestamps, output inventory."""

    def __init__(self, command: str, args: dict):
        safe_args = {
            k: v for k, v in args.items()
            if v is not None and isinstance(v, (bool, int, float, str))
        }
        self.data = {
            "tool": "packsim",
            "version": __version__,
            "command": command,
            "args": safe_args,
            "started_at": _utcnow(),
            "inputs": {},
            "outputs": [],
        }

    def add_input(self, name: str, path) -> None:
        self.data["inputs"][name] = {
            "path": str(path),
            "sha256": sha256_file(path),
        }

    def add_output(self, path) -> None:
        self.data["outputs"].append(str(path))

    def write(self, out_dir) -> None:
        self.data["finished_at"] = _utcnow()
        atomic_write_text(
            Path(out_dir) / "manifest.json",
            json.dumps(self.data, indent=1, sort_keys=True) + "\n",
        )


def _fail(code: int, message: str) -> int:
    print(f"packsim: error: {message}", file=sys.stderr)
    return code


def _write_trace_outputs(trace: SimTrace, out_dir: Path, manifest: _Manifest,
                         basename: str = "trace") -> None:
    cols = trace.series_columns()
    series_path = out_dir / f"{basename}.csv"
    write_csv(series_path, list(cols.keys()), zip(*cols.values()))
    manifest.add_output(series_path)

    summary_path = out_dir / "summary.csv"
    sm_rows = [s.to_dict() for s in trace.summaries]
    header = []
    flat_rows = []
    for s in sm_rows:
        flat = {}
        for key, value in s.items():
            if isinstance(value, list):
                for k, v in enumerate(value):
                    flat[f"{key}_{k + 1}"] = v
            else:
                flat[key] = value
        flat_rows.append(flat)
        for key in flat:
            if key not in header:
                header.append(key)
    write_csv(summary_path, header, flat_rows)
    manifest.add_output(summary_path)


def cmd_simulate(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.cycles is not None:
            if args.cycles < 1:
                raise ConfigError(f"--cycles must be >= 1, got {args.cycles}")
            cfg = dataclasses.replace(cfg, n_cycles=args.cycles)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
    except (ConfigError, OSError) as exc:
        return _fail(EXIT_USAGE, str(exc))

    out_dir = Path(args.out)
    manifest = _Manifest("simulate", vars(args))
    manifest.add_input("config", args.config)
    profile = FAST_PROFILE if args.fast else DEFAULT_PROFILE
    try:
        trace = run_protocol(cfg, profile, trace_every=args.decimate)
    except (SolverError, FloatingPointError) as exc:
        return _fail(EXIT_RUNTIME, str(exc))
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_trace_outputs(trace, out_dir, manifest)
    trace_npz = out_dir / "trace.npz"
    trace.save_npz(trace_npz)
    manifest.add_output(trace_npz)
    manifest.write(out_dir)
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        spec = CampaignSpec.load(args.spec)
        overrides = {}
        if args.fast:
            overrides["profile"] = "fast"
        if args.seed is not None:
            overrides["master_seed"] = args.seed
        if args.modules is not None:
            overrides["n_modules"] = args.modules
        if args.cycles is not None:
            overrides["n_cycles"] = args.cycles
        if overrides:
            spec = dataclasses.replace(spec, **overrides)
        out_dir = Path(args.out or spec.out_dir or "sweep_out")
    except (ConfigError, OSError) as exc:
        return _fail(EXIT_USAGE, str(exc))

    manifest = _Manifest("sweep", vars(args))
    manifest.add_input("spec", args.spec)
    try:
        run_campaign(spec, out_dir, workers=args.workers,
                     keep_traces=args.keep_traces)
    except (SolverError, FloatingPointError, OSError) as exc:
        return _fail(EXIT_RUNTIME, str(exc))
    manifest.add_output(out_dir / "results.csv")
    manifest.write(out_dir)
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.response not in RESPONSE_COLUMNS:
        return _fail(
            EXIT_USAGE,
            f"unknown response {args.response!r}; choose from "
            + "|".join(sorted(RESPONSE_COLUMNS)),
        )
    try:
        table = read_csv_columns(args.results)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_USAGE, f"cannot read results table: {exc}")

    response_col = RESPONSE_COLUMNS[args.response]
    predictors = list(EXTENDED_PREDICTORS if args.extended_predictors
                      else BASIC_PREDICTORS)
    if response_col in predictors:
        predictors.remove(response_col)
    missing = [c for c in predictors + [response_col, "status"]
               if c not in table]
    if missing:
        return _fail(EXIT_USAGE, f"results table lacks columns: {missing}")

    status = table["status"]
    keep = np.array([s == "ok" for s in status], dtype=bool)
    y = table[response_col]
    x = np.column_stack([table[c] for c in predictors])
    keep &= np.isfinite(y) & np.all(np.isfinite(x), axis=1)
    x, y = x[keep], y[keep]
    if x.shape[0] < len(predictors) + 2:
        return _fail(EXIT_USAGE,
                     f"only {x.shape[0]} usable rows for {len(predictors)} predictors")

    manifest = _Manifest("analyze", vars(args))
    manifest.add_input("results", args.results)
    try:
        model = stepwise_fit(x, y, names=predictors,
                             p_enter=args.p_enter, p_remove=args.p_remove)
        importance = relative_importance(model, x, y)
        report = pareto_report(model, importance)
    except ValueError as exc:
        return _fail(EXIT_RUNTIME, str(exc))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_path = out_dir / "model_summary.txt"
    raw = model.raw_coefficients()
    raw_text = "\n".join(f"  {k}: {v!r}" for k, v in raw.items())
    atomic_write_text(
        summary_path,
        f"response: {args.response} ({response_col})\n"
        f"rows used: {x.shape[0]}\n\n"
        + model.summary_text()
        + "\n\nraw-unit coefficients:\n" + raw_text + "\n\n"
        + report.format_text() + "\n",
    )
    manifest.add_output(summary_path)

    pareto_path = out_dir / "pareto.csv"
    rows = report.to_csv_rows()
    write_csv(pareto_path, rows[0], rows[1:])
    manifest.add_output(pareto_path)

    resid_path = out_dir / "residuals.csv"
    yhat = model.predict(x)
    ids = table["module_id"][keep] if "module_id" in table else np.arange(y.size)
    write_csv(
        resid_path,
        ("module_id", "y", "y_hat", "residual"),
        zip(ids, y, yhat, y - yhat),
    )
    manifest.add_output(resid_path)
    manifest.write(out_dir)
    print(report.format_text())
    return EXIT_OK


def cmd_arrange(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.cycles is not None and args.cycles < 1:
            raise ConfigError(f"--cycles must be >= 1, got {args.cycles}")
    except (ConfigError, OSError) as exc:
        return _fail(EXIT_USAGE, str(exc))

    manifest = _Manifest("arrange", vars(args))
    manifest.add_input("config", args.config)
    proposed = arrange_descending_capacity(cfg.cells)
    orders = all_orders(cfg.n_p) if args.exhaustive else [proposed]
    profile = FAST_PROFILE if args.fast else DEFAULT_PROFILE
    try:
        comparisons = compare_arrangements(
            cfg, orders, args.cycles, profile=profile,
            workers=args.workers or 1,
        )
    except (SolverError, FloatingPointError) as exc:
        return _fail(EXIT_RUNTIME, str(exc))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ["order", "is_proposed"]
    metrics = ("sigma_i", "delta_t_max", "e_lost", "sigma_r_sei")
    for m in metrics:
        header += [m, f"{m}_rel_change"]
    rows = []
    base = comparisons[0]
    base_row = {"order": "-".join(str(i + 1) for i in base.baseline_order),
                "is_proposed": 0}
    for m in metrics:
        base_row[m] = base.baseline[m]
        base_row[f"{m}_rel_change"] = 0.0
    rows.append(base_row)
    for comp in comparisons:
        row = {
            "order": "-".join(str(i + 1) for i in comp.proposed_order),
            "is_proposed": int(list(comp.proposed_order) == list(proposed)),
        }
        for m in metrics:
            row[m] = comp.proposed[m]
            row[f"{m}_rel_change"] = comp.relative_change[m]
        rows.append(row)
    cmp_path = out_dir / "arrangement.csv"
    write_csv(cmp_path, header, rows)
    manifest.add_output(cmp_path)

    lines = [
        f"baseline order: {rows[0]['order']}",
        f"proposed (descending capacity): "
        + "-".join(str(i + 1) for i in proposed),
    ]
    for comp in comparisons:
        if list(comp.proposed_order) == list(proposed):
            for m in metrics:
                lines.append(
                    f"{m}: {comp.baseline[m]:.6g} -> {comp.proposed[m]:.6g} "
                    f"({100 * comp.relative_change[m]:+.1f}%)"
                )
    text = "\n".join(lines)
    atomic_write_text(out_dir / "arrangement.txt", text + "\n")
    manifest.add_output(out_dir / "arrangement.txt")
    manifest.write(out_dir)
    print(text)
    return EXIT_OK


def cmd_export(args) -> int:
    src = Path(args.infile)
    dst = Path(args.out)
    if not src.exists():
        return _fail(EXIT_USAGE, f"input file not found: {src}")
    try:
        if src.suffix == ".csv" and dst.suffix == ".npz":
            cols = read_csv_columns(src)
            dst.parent.mkdir(parents=True, exist_ok=True)
            np.savez_compressed(dst, **{
                k: (v if v.dtype != object else v.astype(str))
                for k, v in cols.items()
            })
        elif src.suffix == ".npz" and dst.suffix == ".csv":
            with np.load(src, allow_pickle=False) as data:
                names = list(data.files)
                arrays = [data[name] for name in names]
            length = max((a.shape[0] for a in arrays if a.ndim == 1), default=0)
            cols = {}
            for name, arr in zip(names, arrays):
                if arr.ndim == 1 and arr.shape[0] == length:
                    cols[name] = arr
            if not cols:
                return _fail(EXIT_USAGE, "npz file has no exportable columns")
            dst.parent.mkdir(parents=True, exist_ok=True)
            write_csv(dst, list(cols.keys()), zip(*cols.values()))
        else:
            return _fail(
                EXIT_USAGE,
                "export converts .csv <-> .npz; got "
                f"{src.suffix!r} -> {dst.suffix!r}",
            )
    except (OSError, ValueError) as exc:
        return _fail(EXIT_RUNTIME, str(exc))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="packsim",
        description="Parallel-connected battery module simulator and "
                    "heterogeneity-importance analysis toolkit",
    )
    parser.add_argument("--version", action="version",
                        version=f"packsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_out=True):
        p.add_argument("--seed", type=int, default=None,
                       help="override the run seed")
        p.add_argument("--workers", type=int,
                       default=int(os.environ.get("PACKSIM_WORKERS", "0")) or None,
                       help="worker process count (default: PACKSIM_WORKERS or cores)")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("simulate", help="simulate one module config")
    p.add_argument("--config", required=True)
    p.add_argument("--cycles", type=int, default=None)
    p.add_argument("--fast", action="store_true", help="coarse fast profile")
    p.add_argument("--decimate", type=int, default=1,
                   help="record every Nth step after the first cycle")
    add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run a Monte Carlo campaign")
    p.add_argument("--spec", required=True, help="campaign spec JSON")
    p.add_argument("--fast", action="store_true", help="fast tier (coarse grids)")
    p.add_argument("--modules", type=int, default=None)
    p.add_argument("--cycles", type=int, default=None)
    p.add_argument("--keep-traces", action="store_true")
    add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="fit the regression and rank predictors")
    p.add_argument("--results", required=True, help="results.csv from sweep")
    p.add_argument("--response", required=True,
                   help="|".join(sorted(RESPONSE_COLUMNS)))
    p.add_argument("--extended-predictors", action="store_true")
    p.add_argument("--p-enter", type=float, default=0.05)
    p.add_argument("--p-remove", type=float, default=0.10)
    add_common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("arrange", help="evaluate cell-arrangement strategies")
    p.add_argument("--config", required=True)
    p.add_argument("--cycles", type=int, default=None)
    p.add_argument("--exhaustive", action="store_true",
                   help="simulate every permutation")
    p.add_argument("--fast", action="store_true")
    add_common(p)
    p.set_defaults(func=cmd_arrange)

    p = sub.add_parser("export", help="convert columnar files csv <-> npz")
    p.add_argument("--in", dest="infile", required=True)
    add_common(p)
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
