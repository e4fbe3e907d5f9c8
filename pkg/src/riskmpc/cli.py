"""Command-line front end.

Sub-commands::

    riskmpc run               one closed-loop run
    riskmpc sweep             one run per (delta, seed) plus an aggregate table
    riskmpc baseline-compare  the learned controller against the internal baselines
    riskmpc validate-config   parse and check a config without running it

Every run directory holds ``log.csv``, ``lpes.csv``, ``metrics.json``, the
resolved ``config.yaml`` and a ``manifest.json`` (seed, config hash, package
version), which is enough to reproduce the run bit for bit with
``riskmpc run --config <dir>/config.yaml``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
The default output root is ``$RISKMPC_OUTPUT_ROOT`` or ``./runs``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .config import ConfigError, SCHEMA, config_hash, dump_config, load_config
from .simulator import CONTROLLERS, RAAR, RunConfig, run, write_outputs

log = logging.getLogger("riskmpc")

OUTPUT_ROOT_ENV = "RISKMPC_OUTPUT_ROOT"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

SWEEP_COLUMNS = {
    "permitted_risk": "target violation rate delta given to the controller",
    "empirical_risk": "post-burn-in fraction of steps whose next state violates the chance row",
    "avg_cost": "post-burn-in mean stage cost x'Qx + u'Ru",
    "seed": "root seed of the run",
    "controller": "raar, worst_case or naive_sa",
    "last_quarter_risk": "violation rate over the final quarter of the run",
    "mean_beta": "post-burn-in mean safety margin",
    "n_fallbacks": "steps where the QP failed and the shifted plan was used",
    "run_dir": "directory holding the run's log, metrics and manifest",
}


@dataclass
class ExperimentSpec:
    command: str
    config_path: str | None = None
    output_dir: str | None = None
    overrides: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    jobs: int = 1
    quiet: bool = False


def default_output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, "runs")


def manifest(cfg: RunConfig, command: str) -> dict:
    return {
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "version": __version__,
        "command": command,
        "controller": cfg.controller,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "reproduce": "riskmpc run --config config.yaml",
    }


def execute(cfg: RunConfig, out_dir: str, command: str = "run", quiet: bool = True) -> dict:
    """Run ``cfg`` and write every artifact into ``out_dir``; returns the metrics summary."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.yaml"), "w") as fh:
        fh.write(dump_config(cfg))
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest(cfg, command), fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "config_schema.json"), "w") as fh:
        json.dump(SCHEMA, fh, indent=2)
    t0 = time.perf_counter()
    progress = None if quiet else (lambda k: print(f"  step {k}/{cfg.total_steps}", file=sys.stderr))
    log_ = run(cfg, progress)
    summ = write_outputs(cfg, log_, out_dir)
    summ["wall_time_s"] = round(time.perf_counter() - t0, 3)
    return summ


def _execute_job(args):
    cfg, out_dir, command = args
    return execute(cfg, out_dir, command)


def _run_many(jobs, n_workers: int) -> list:
    if n_workers <= 1 or len(jobs) <= 1:
        return [_execute_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_execute_job, jobs))


def _out_dir(spec: ExperimentSpec, cfg: RunConfig) -> str:
    if spec.output_dir:
        return spec.output_dir
    return os.path.join(default_output_root(), f"{spec.command}-{config_hash(cfg)[:10]}")


def _write_table(path: str, rows: list, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def _table_row(summ: dict, run_dir: str) -> dict:
    row = {k: summ[k] for k in ("empirical_risk", "avg_cost", "seed", "controller", "last_quarter_risk",
                                "mean_beta", "n_fallbacks")}
    row["permitted_risk"] = summ["target_delta"]
    row["run_dir"] = run_dir
    return row


def _print(spec: ExperimentSpec, text: str) -> None:
    if not spec.quiet:
        print(text)


def cmd_validate(spec: ExperimentSpec, cfg: RunConfig) -> int:
    _print(spec, f"config OK  hash={config_hash(cfg)}")
    if not spec.quiet:
        print(dump_config(cfg), end="")
    return EXIT_OK


def cmd_run(spec: ExperimentSpec, cfg: RunConfig) -> int:
    out = _out_dir(spec, cfg)
    summ = execute(cfg, out, "run", quiet=spec.quiet)
    _print(spec, f"{cfg.controller} delta={cfg.target_delta} seed={cfg.seed}: "
                 f"risk={summ['empirical_risk']:.4f} avg_cost={summ['avg_cost']:.4g} -> {out}")
    return EXIT_OK


def cmd_sweep(spec: ExperimentSpec, cfg: RunConfig) -> int:
    deltas = sorted(spec.deltas) if spec.deltas else [cfg.target_delta]
    seeds = spec.seeds or [cfg.seed]
    out = _out_dir(spec, cfg)
    jobs = []
    for d in deltas:
        for s in seeds:
            c = replace(cfg.with_delta(d), seed=s)
            jobs.append((c, os.path.join(out, f"delta_{d:g}", f"seed_{s}"), "sweep"))
    results = _run_many(jobs, spec.jobs)
    rows = [_table_row(summ, job[1]) for summ, job in zip(results, jobs)]
    rows.sort(key=lambda r: (r["permitted_risk"], r["seed"]))
    _write_table(os.path.join(out, "sweep.csv"), rows, SWEEP_COLUMNS)
    with open(os.path.join(out, "sweep_schema.json"), "w") as fh:
        json.dump(SWEEP_COLUMNS, fh, indent=2)
    _print(spec, f"{'permitted_risk':>14} {'empirical_risk':>14} {'avg_cost':>10} seed")
    for r in rows:
        _print(spec, f"{r['permitted_risk']:>14g} {r['empirical_risk']:>14.4f} {r['avg_cost']:>10.4g} {r['seed']}")
    _print(spec, f"table -> {os.path.join(out, 'sweep.csv')}")
    return EXIT_OK


def cmd_compare(spec: ExperimentSpec, cfg: RunConfig) -> int:
    out = _out_dir(spec, cfg)
    seeds = spec.seeds or [cfg.seed]
    jobs = [(replace(cfg, controller=c, seed=s), os.path.join(out, c, f"seed_{s}"), "baseline-compare")
            for c in CONTROLLERS for s in seeds]
    results = _run_many(jobs, spec.jobs)
    rows = [_table_row(summ, job[1]) for summ, job in zip(results, jobs)]
    ref = {r["seed"]: r["avg_cost"] for r in rows if r["controller"] == "worst_case"}
    cols = dict(SWEEP_COLUMNS)
    cols["cost_ratio_vs_worst_case"] = "avg_cost divided by the worst-case tube's avg_cost, same seed"
    for r in rows:
        r["cost_ratio_vs_worst_case"] = r["avg_cost"] / ref[r["seed"]] if ref.get(r["seed"]) else float("nan")
    _write_table(os.path.join(out, "compare.csv"), rows, cols)
    with open(os.path.join(out, "compare_schema.json"), "w") as fh:
        json.dump(cols, fh, indent=2)
    for r in rows:
        _print(spec, f"{r['controller']:>10} seed={r['seed']} risk={r['empirical_risk']:.4f} "
                     f"avg_cost={r['avg_cost']:.4g} ratio={r['cost_ratio_vs_worst_case']:.3f}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "baseline-compare": cmd_compare, "validate-config": cmd_validate}


def _float_list(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskmpc", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"riskmpc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", dest="config_path", help="YAML config (default: DC-DC benchmark)")
        p.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, repeatable, applied in order")
        p.add_argument("--output-dir", help=f"output directory (default under ${OUTPUT_ROOT_ENV} or ./runs)")
        p.add_argument("--quiet", "-q", action="store_true")
        if name in ("sweep", "baseline-compare"):
            p.add_argument("--seeds", type=_int_list, default=[], help="comma-separated seeds")
            p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        if name == "sweep":
            p.add_argument("--deltas", type=_float_list, default=[], help="comma-separated target risks")
    return parser


def parse_spec(argv=None) -> ExperimentSpec:
    ns = build_parser().parse_args(argv)
    return ExperimentSpec(
        command=ns.command, config_path=ns.config_path, output_dir=ns.output_dir, overrides=ns.override,
        deltas=getattr(ns, "deltas", []), seeds=getattr(ns, "seeds", []), jobs=getattr(ns, "jobs", 1),
        quiet=ns.quiet,
    )


def run_command(spec: ExperimentSpec) -> int:
    """Execute one parsed invocation and map failures onto exit codes."""
    try:
        cfg = load_config(spec.config_path, spec.overrides)
        for d in spec.deltas:
            if not 0.0 < d < 1.0:
                raise ConfigError(f"delta {d} outside (0, 1)", "deltas")
        if spec.jobs < 1:
            raise ConfigError("must be at least 1", "jobs")
    except ConfigError as exc:
        err = {"error": "config", "field": exc.field, "line": exc.line, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return EXIT_USAGE
    try:
        if spec.output_dir or spec.command != "validate-config":
            out = spec.output_dir or default_output_root()
            os.makedirs(out, exist_ok=True)
            if not os.access(out, os.W_OK):
                raise PermissionError(f"output directory {out!r} is not writable")
        return COMMANDS[spec.command](spec, cfg)
    except Exception as exc:  # every runtime failure becomes a structured message
        err = {"error": "runtime", "type": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        log.debug("run failed", exc_info=True)
        return EXIT_RUNTIME


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("RISKMPC_LOG_LEVEL", "WARNING"))
    try:
        spec = parse_spec(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    return run_command(spec)


if __name__ == "__main__":
    sys.exit(main())
