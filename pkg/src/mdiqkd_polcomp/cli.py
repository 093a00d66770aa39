"""Command-line entry points.

Subcommands:

- ``simulate``  — run a full closed-loop session and write artifacts
  (manifest first, then traces, tallies, summary).
- ``analyze``   — turn tally/gain tables into single-photon bounds and
  a key rate; ``--published`` analyzes the bundled reference dataset.
- ``plan``      — Chernoff calculator: detections (and wait time) needed
  to certify a click probability to a relative precision.
- ``sweep``     — rerun short sessions over a grid of feedback-gain or
  trigger-threshold values and tabulate the closed-loop outcome.
- ``calibrate`` — fit the detector efficiency to a target signal gain.

Every subcommand accepts ``--seed``, ``--config``, and ``--out``; the
purely deterministic ones (analyze, plan, calibrate) take ``--seed``
for interface uniformity only.

Exit codes: 0 success; 2 usage errors; 3 invalid or unreadable
configuration (including bad parameter values); 4 output I/O failures;
5 invalid or unreadable input data.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .bsm import BsmError
from .calibrate import CalibrationError, fit_efficiency
from .compensation import CompensationError, plan_collection
from .config import (ConfigError, DEFAULT_PROFILE, available_profiles,
                     load_profile, read_config_file)
from .decoy import (DecoyError, TallySet, bound_y11_e11, key_rate,
                    load_reference_half, p11, read_gain_csv)
from .reporting import (MANIFEST_NAME, ReportingError, build_manifest,
                        emit_traces, write_manifest)
from .session import SessionError, analyze_tallies, run_session
from .transmitter import TransmitterError

__all__ = ["main", "EXIT_OK", "EXIT_USAGE", "EXIT_CONFIG", "EXIT_OUTPUT",
           "EXIT_INPUT"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_OUTPUT = 4
EXIT_INPUT = 5

_CONFIG_ERRORS = (ConfigError, SessionError, CompensationError, BsmError,
                  TransmitterError, CalibrationError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdiqkd-polcomp",
        description="Closed-loop polarization-compensated MDI-QKD "
                    "simulator and decoy-state analysis toolkit.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", metavar="FILE",
                       help="INI config file (overrides the profile)")
        p.add_argument("--profile", default=DEFAULT_PROFILE,
                       help="bundled config profile name "
                            f"(default: {DEFAULT_PROFILE})")

    sim = sub.add_parser("simulate",
                         help="run a session and write run artifacts")
    add_config_flags(sim)
    sim.add_argument("--out", metavar="DIR", default=".",
                     help="output directory (default: current directory)")
    sim.add_argument("--duration", type=float, metavar="SECONDS",
                     help="override session duration")
    sim.add_argument("--seed", type=int, help="override the session seed")
    sim.add_argument("--mode", choices=("in-process", "networked"),
                     help="override the transport mode")
    sim.add_argument("--sampling", choices=("aggregate", "per-slot"),
                     help="override the sampling backend")
    sim.add_argument("--compensation", choices=("on", "off"),
                     help="override the feedback loop switch")

    def add_seed_stub(p):
        p.add_argument("--seed", type=int,
                       help="accepted for interface uniformity; this "
                            "subcommand is deterministic")

    ana = sub.add_parser("analyze",
                         help="bounds and key rate from tables")
    add_config_flags(ana)
    add_seed_stub(ana)
    ana.add_argument("--out", metavar="DIR",
                     help="also write analysis.txt into DIR")
    ana.add_argument("--method", choices=("analytic", "lp"),
                     help="override the bound method")
    ana.add_argument("--published", action="store_true",
                     help="analyze the bundled published dataset")
    ana.add_argument("--tallies-z", metavar="CSV",
                     help="count table for the Z-measurement half")
    ana.add_argument("--tallies-x", metavar="CSV",
                     help="count table for the X-measurement half")
    ana.add_argument("--gains-z", metavar="CSV",
                     help="gain table for the Z-measurement half")
    ana.add_argument("--gains-x", metavar="CSV",
                     help="gain table for the X-measurement half")

    plan = sub.add_parser("plan",
                          help="Chernoff sample-size calculator")
    add_config_flags(plan)
    add_seed_stub(plan)
    plan.add_argument("--p", type=float, required=True, dest="p_hat",
                      help="estimated click probability per slot")
    plan.add_argument("--eps", type=float, required=True,
                      help="relative precision")
    plan.add_argument("--delta", type=float, required=True,
                      help="failure probability bound")
    plan.add_argument("--rate", type=float,
                      help="detection rate (counts per second)")
    plan.add_argument("--out", metavar="DIR",
                      help="also write plan.txt into DIR")

    swp = sub.add_parser("sweep",
                         help="closed-loop outcome over a parameter grid")
    add_config_flags(swp)
    swp.add_argument("--param", choices=("alpha", "threshold"),
                     required=True, help="controller parameter to sweep")
    swp.add_argument("--values", metavar="V1,V2,...",
                     help="comma-separated grid values")
    swp.add_argument("--start", type=float, help="grid start (with --stop)")
    swp.add_argument("--stop", type=float, help="grid stop (with --start)")
    swp.add_argument("--num", type=int, default=5,
                     help="grid size for --start/--stop (default: 5)")
    swp.add_argument("--duration", type=float, default=1800.0,
                     metavar="SECONDS",
                     help="session duration per grid point (default: 1800)")
    swp.add_argument("--seed", type=int, help="override the session seed")
    swp.add_argument("--out", metavar="DIR", default=".",
                     help="directory for sweep.csv (default: current)")

    cal = sub.add_parser("calibrate",
                         help="fit detector efficiency to a target gain")
    add_config_flags(cal)
    add_seed_stub(cal)
    cal.add_argument("--target-gain", type=float, default=3.0e-5,
                     help="same-basis signal gain to match "
                          "(default: 3.0e-5)")
    cal.add_argument("--mu", type=float,
                     help="signal intensity (default: from config)")
    cal.add_argument("--dark", type=float,
                     help="dark-click probability per slot "
                          "(default: from config)")
    cal.add_argument("--n-phase", type=int,
                     help="phase-averaging grid size (default: from config)")
    cal.add_argument("--out", metavar="DIR",
                     help="also write detector.ini into DIR")
    return parser


def _resolve_config(args):
    if getattr(args, "config", None):
        return read_config_file(args.config)
    return load_profile(getattr(args, "profile", DEFAULT_PROFILE))


def _ensure_out_dir(path) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ReportingError(f"cannot create output directory {path}: "
                             f"{exc}") from exc


def _write_lines(path, lines) -> None:
    try:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise ReportingError(f"cannot write {path}: {exc}") from exc


def _fmt(value) -> str:
    return "none" if value is None else repr(float(value))


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _cmd_simulate(args) -> int:
    config = _resolve_config(args)
    overrides = {}
    if args.duration is not None:
        overrides["duration_s"] = args.duration
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.sampling is not None:
        overrides["sampling"] = args.sampling
    if args.compensation is not None:
        overrides["compensation_enabled"] = args.compensation == "on"
    if overrides:
        config = replace(config, **overrides)
    _ensure_out_dir(args.out)
    manifest = build_manifest(config)
    write_manifest(manifest, os.path.join(args.out, MANIFEST_NAME))
    report = run_session(config)
    paths = emit_traces(report, args.out)
    print(f"simulated {report.duration_s} s over {len(report.windows)} "
          f"windows (seed {report.seed}, {report.mode}, {report.sampling})")
    for half in ("Z", "X"):
        rate = report.rates.get(half)
        print(f"half_{half.lower()}: key_rate_bits_per_pulse = "
              f"{_fmt(None if rate is None else rate.rate)}")
    for user in ("alice", "bob"):
        means = report.mean_estimated_theta(user)
        print(f"{user}: mean_theta_z_rad = {_fmt(means['Z'])}, "
              f"mean_theta_x_rad = {_fmt(means['X'])}")
    print(f"wrote {MANIFEST_NAME} and {len(paths)} artifacts to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _analysis_lines_from_rates(bounds: dict, rates: dict) -> list:
    lines = []
    valid = []
    for half in ("Z", "X"):
        half_bounds = bounds.get(half)
        half_rate = rates.get(half)
        lines.append(f"[half_{half.lower()}]")
        if half_bounds is None:
            lines += ["y11_lower = none", "e11_upper = none"]
        else:
            lines += [f"y11_lower = {_fmt(half_bounds.y11_lower[half])}",
                      f"e11_upper = {_fmt(half_bounds.e11_upper)}"]
        if half_rate is None:
            lines.append("key_rate_bits_per_pulse = none")
        else:
            lines.append(f"key_rate_bits_per_pulse = {_fmt(half_rate.rate)}")
            valid.append(half_rate.rate)
        lines.append("")
    lines.append("[combined]")
    mean = sum(valid) / len(valid) if valid else None
    lines.append(f"mean_key_rate_bits_per_pulse = {_fmt(mean)}")
    return lines


def _analyze_published(config, method: str) -> list:
    """Rates from the published single-photon bounds, plus own bounds.

    The published dataset ships as gain tables plus the original
    summary values.  Key rates use the published yield/error bounds
    through this package's rate formula; the own_* rows report what
    this package's bounding backends extract from the same gain
    tables (known to be looser — see the decoy module).
    """
    table = config.table_a
    lines = ["# published_* values come from the bundled dataset;",
             "# own_* bounds are recomputed from its gain tables.",
             ""]
    rates = []
    for half in ("Z", "X"):
        grids, summary = load_reference_half(half)
        own = bound_y11_e11(grids, table, half, method=method)
        q_signal = float(grids[half].q[0, 0])
        e_signal = float(grids[half].eq[0, 0] / q_signal)
        published_y11 = {"Z": summary["y11_lower_z"],
                         "X": summary["y11_lower_x"]}[half]
        rate = key_rate(p11(table.mu), published_y11, summary["e11_upper"],
                        q_signal, e_signal,
                        config.error_correction_efficiency)
        rates.append(rate.rate)
        lines += [f"[half_{half.lower()}]",
                  f"y11_lower = {_fmt(published_y11)}",
                  f"e11_upper = {_fmt(summary['e11_upper'])}",
                  f"key_rate_bits_per_pulse = {_fmt(rate.rate)}",
                  f"published_key_rate_bits_per_pulse = "
                  f"{_fmt(summary['key_rate'])}",
                  f"own_y11_lower = {_fmt(own.y11_lower[half])}",
                  f"own_e11_upper = {_fmt(own.e11_upper)}",
                  ""]
    lines += ["[combined]",
              f"mean_key_rate_bits_per_pulse = "
              f"{_fmt(sum(rates) / len(rates))}"]
    return lines


def _analyze_tally_files(config, path_z, path_x) -> list:
    tallies = {"Z": _read_input(TallySet.read_csv, path_z),
               "X": _read_input(TallySet.read_csv, path_x)}
    bounds, rates = analyze_tallies(config, tallies)
    return _analysis_lines_from_rates(bounds, rates)


def _analyze_gain_files(config, path_z, path_x, method: str) -> list:
    table = config.table_a
    bounds: dict = {}
    rates: dict = {}
    for half, path in (("Z", path_z), ("X", path_x)):
        grids = _read_input(read_gain_csv, path)
        half_bounds = bound_y11_e11(grids, table, half, method=method)
        q_signal = float(grids[half].q[0, 0])
        if q_signal <= 0.0:
            bounds[half] = half_bounds
            rates[half] = None
            continue
        e_signal = float(grids[half].eq[0, 0] / q_signal)
        bounds[half] = half_bounds
        rates[half] = key_rate(p11(table.mu),
                               half_bounds.y11_lower[half],
                               half_bounds.e11_upper, q_signal, e_signal,
                               config.error_correction_efficiency)
    return _analysis_lines_from_rates(bounds, rates)


def _read_input(reader, path):
    try:
        return reader(path)
    except OSError as exc:
        raise _InputError(f"cannot read {path}: {exc}") from exc
    except DecoyError as exc:
        raise _InputError(str(exc)) from exc


class _InputError(ValueError):
    pass


def _cmd_analyze(args, parser) -> int:
    modes = [bool(args.published),
             bool(args.tallies_z or args.tallies_x),
             bool(args.gains_z or args.gains_x)]
    if sum(modes) != 1:
        parser.error("choose exactly one input: --published, "
                     "--tallies-z/--tallies-x, or --gains-z/--gains-x")
    config = _resolve_config(args)
    if args.method is not None:
        config = replace(config, bound_method=args.method)
    method = config.bound_method
    if args.published:
        lines = _analyze_published(config, method)
    elif args.tallies_z or args.tallies_x:
        if not (args.tallies_z and args.tallies_x):
            parser.error("--tallies-z and --tallies-x are both required")
        lines = _analyze_tally_files(config, args.tallies_z, args.tallies_x)
    else:
        if not (args.gains_z and args.gains_x):
            parser.error("--gains-z and --gains-x are both required")
        lines = _analyze_gain_files(config, args.gains_z, args.gains_x,
                                    method)
    for line in lines:
        print(line)
    if args.out:
        _ensure_out_dir(args.out)
        _write_lines(os.path.join(args.out, "analysis.txt"), lines)
    return EXIT_OK


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------

def _cmd_plan(args) -> int:
    # The planner's inputs all come from flags, but a supplied config is
    # still resolved so a broken --config fails here like everywhere else.
    _resolve_config(args)
    plan = plan_collection(args.p_hat, args.eps, args.delta, args.rate)
    lines = [f"n_min = {plan.n_min}",
             f"t_min_s = {_fmt(plan.t_min)}",
             f"p_hat = {_fmt(plan.p_hat)}",
             f"epsilon = {_fmt(plan.epsilon)}",
             f"delta = {_fmt(plan.delta)}",
             f"rate_cps = {_fmt(plan.rate)}"]
    for line in lines:
        print(line)
    if args.out:
        _ensure_out_dir(args.out)
        _write_lines(os.path.join(args.out, "plan.txt"), lines)
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _sweep_values(args, parser) -> list:
    if args.values:
        if args.start is not None or args.stop is not None:
            parser.error("--values and --start/--stop are exclusive")
        try:
            return [float(item) for item in args.values.split(",") if item]
        except ValueError:
            parser.error(f"--values must be comma-separated numbers, "
                         f"got {args.values!r}")
    if args.start is None or args.stop is None:
        parser.error("provide either --values or both --start and --stop")
    if args.num < 2:
        parser.error("--num must be at least 2")
    return [float(v) for v in np.linspace(args.start, args.stop, args.num)]


def _cmd_sweep(args, parser) -> int:
    values = _sweep_values(args, parser)
    base = _resolve_config(args)
    overrides = {"duration_s": args.duration}
    if args.seed is not None:
        overrides["seed"] = args.seed
    base = replace(base, **overrides)
    _ensure_out_dir(args.out)
    rows = []
    for value in values:
        controller = replace(base.controller, **{args.param: value})
        config = replace(base, controller=controller)
        report = run_session(config)
        for user in ("alice", "bob"):
            true_means = report.mean_true_theta(user)
            est_means = report.mean_estimated_theta(user)
            z_cell = report.tallies["Z"].cell("Z", "mu", "mu")
            rows.append({
                "param": args.param,
                "value": repr(value),
                "user": user,
                "mean_true_theta_z_rad": _fmt(true_means["Z"]),
                "mean_true_theta_x_rad": _fmt(true_means["X"]),
                "mean_est_theta_z_rad": _fmt(est_means["Z"]),
                "mean_est_theta_x_rad": _fmt(est_means["X"]),
                "z_signal_qber": _fmt(
                    z_cell.errors / z_cell.coincidences
                    if z_cell.coincidences else None),
                "n_triggered": sum(1 for trace in report.windows
                                   if trace.triggered.get(user)),
            })
        print(f"{args.param} = {value}: done")
    path = os.path.join(args.out, "sweep.csv")
    fieldnames = list(rows[0].keys()) if rows else ["param", "value", "user"]
    try:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=fieldnames)
            writer.writeheader()
            writer.writerows(rows)
    except OSError as exc:
        raise ReportingError(f"cannot write {path}: {exc}") from exc
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

def _cmd_calibrate(args) -> int:
    config = _resolve_config(args)
    mu = args.mu if args.mu is not None else config.table_a.mu
    dark = args.dark if args.dark is not None else config.detector.dark_prob
    n_phase = args.n_phase if args.n_phase is not None else config.n_phase
    result = fit_efficiency(target_gain=args.target_gain,
                            signal_intensity=mu,
                            dark_prob=dark, n_phase=n_phase)
    lines = ["[detector]",
             f"efficiency = {_fmt(result.detector.efficiency)}",
             f"dark_prob = {_fmt(result.detector.dark_prob)}",
             "",
             f"# achieved_gain = {_fmt(result.achieved_gain)}",
             f"# target_gain = {_fmt(result.target_gain)}",
             f"# signal_intensity = {_fmt(result.signal_intensity)}"]
    for line in lines:
        print(line)
    if args.out:
        _ensure_out_dir(args.out)
        _write_lines(os.path.join(args.out, "detector.ini"), lines)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "analyze":
            return _cmd_analyze(args, parser)
        if args.command == "plan":
            return _cmd_plan(args)
        if args.command == "sweep":
            return _cmd_sweep(args, parser)
        if args.command == "calibrate":
            return _cmd_calibrate(args)
        parser.error(f"unknown command {args.command!r}")
    except SystemExit as exc:  # parser.error inside a handler
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ReportingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OUTPUT
    except (_InputError, DecoyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_USAGE
