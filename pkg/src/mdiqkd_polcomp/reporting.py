"""Run manifests and simulation artifacts: traces, tally tables, summary.

A run directory contains:

- ``manifest.json``      — written before the simulation starts; pins the
  resolved config (as INI text), seed, code version, virtual time span,
  and the names of every other output.
- ``misalignment_<user>.csv`` — one row per window: ``time_s,
  theta_z_rad, theta_x_rad, triggered``.  Only the basis measured in
  that window carries a fresh estimate; the other cell is left empty,
  so column means reproduce the per-basis estimator averages exactly.
- ``tallies_<basis>.csv`` — raw per-cell counts for one
  measurement-basis half (``basis, intensity_A, intensity_B, sent,
  coincidences, errors``).
- ``summary.txt``        — INI-style digest of bounds, rates, QBER, and
  mean misalignment.

Every number in the summary is recomputable from the emitted tables;
``recompute_summary`` re-derives the identical bytes from the manifest
plus CSVs, which is how the no-hidden-state property is tested.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

from . import __version__
from .decoy import TallySet
from .session import SessionConfig, SessionReport, analyze_tallies

__all__ = [
    "ReportingError",
    "RunManifest",
    "MANIFEST_NAME",
    "MISALIGNMENT_CSV_HEADER",
    "OUTPUT_NAMES",
    "build_manifest",
    "write_manifest",
    "read_manifest",
    "misalignment_rows",
    "write_misalignment_csv",
    "read_misalignment_csv",
    "emit_traces",
    "summary_text",
    "recompute_summary",
]

MANIFEST_NAME = "manifest.json"
MISALIGNMENT_CSV_HEADER = ("time_s", "theta_z_rad", "theta_x_rad",
                           "triggered")
USERS = ("alice", "bob")
HALVES = ("Z", "X")
OUTPUT_NAMES = ("misalignment_alice.csv", "misalignment_bob.csv",
                "tallies_z.csv", "tallies_x.csv", "summary.txt")
_MANIFEST_FORMAT = 1


class ReportingError(RuntimeError):
    """An artifact could not be written or read; the message names it."""


@dataclass(frozen=True)
class RunManifest:
    """Reproducibility record written before a simulation starts.

    config_ini round-trips through the config parser to the exact
    SessionConfig the run used; outputs maps artifact roles to file
    names inside the run directory.
    """

    config_ini: str
    seed: int
    code_version: str
    virtual_start_s: float
    virtual_stop_s: float
    outputs: dict

    def to_json(self) -> str:
        payload = {
            "format": _MANIFEST_FORMAT,
            "config_ini": self.config_ini,
            "seed": self.seed,
            "code_version": self.code_version,
            "virtual_start_s": self.virtual_start_s,
            "virtual_stop_s": self.virtual_stop_s,
            "outputs": dict(sorted(self.outputs.items())),
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def build_manifest(config: SessionConfig) -> RunManifest:
    """Manifest for a run of `config`, listing the standard outputs."""
    from .config import config_to_ini

    outputs = {
        "misalignment_alice": "misalignment_alice.csv",
        "misalignment_bob": "misalignment_bob.csv",
        "tallies_z": "tallies_z.csv",
        "tallies_x": "tallies_x.csv",
        "summary": "summary.txt",
    }
    return RunManifest(config_ini=config_to_ini(config), seed=config.seed,
                       code_version=__version__, virtual_start_s=0.0,
                       virtual_stop_s=config.duration_s, outputs=outputs)


def write_manifest(manifest: RunManifest, path) -> None:
    _write_text(path, manifest.to_json())


def read_manifest(path) -> RunManifest:
    try:
        with open(path, encoding="utf-8") as handle:
            payload = json.load(handle)
    except OSError as exc:
        raise ReportingError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ReportingError(f"malformed manifest {path}: {exc}") from exc
    try:
        if payload["format"] != _MANIFEST_FORMAT:
            raise ReportingError(f"unsupported manifest format "
                                 f"{payload['format']!r} in {path}")
        return RunManifest(
            config_ini=payload["config_ini"], seed=payload["seed"],
            code_version=payload["code_version"],
            virtual_start_s=payload["virtual_start_s"],
            virtual_stop_s=payload["virtual_stop_s"],
            outputs=dict(payload["outputs"]))
    except KeyError as exc:
        raise ReportingError(f"manifest {path} is missing field "
                             f"{exc}") from exc


# ---------------------------------------------------------------------------
# Per-window misalignment traces
# ---------------------------------------------------------------------------

def misalignment_rows(report: SessionReport, user: str) -> list:
    """(time_s, theta_z|None, theta_x|None, triggered) per window."""
    rows = []
    for trace in report.windows:
        est = trace.est_theta.get(user)
        theta_z = est if trace.meas_basis == "Z" else None
        theta_x = est if trace.meas_basis == "X" else None
        rows.append((trace.t_start, theta_z, theta_x,
                     bool(trace.triggered.get(user, False))))
    return rows


def write_misalignment_csv(path, rows) -> None:
    def cell(value):
        return "" if value is None else repr(float(value))

    lines = [",".join(MISALIGNMENT_CSV_HEADER)]
    for time_s, theta_z, theta_x, triggered in rows:
        lines.append(",".join([repr(float(time_s)), cell(theta_z),
                               cell(theta_x), str(int(triggered))]))
    _write_text(path, "\n".join(lines) + "\n")


def read_misalignment_csv(path) -> list:
    rows = []
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header is None or tuple(header) != MISALIGNMENT_CSV_HEADER:
                raise ReportingError(f"bad misalignment CSV header in "
                                     f"{path}: {header}")
            for row in reader:
                if not row:
                    continue
                if len(row) != len(MISALIGNMENT_CSV_HEADER):
                    raise ReportingError(f"bad misalignment CSV row in "
                                         f"{path}: {row}")
                rows.append((float(row[0]),
                             float(row[1]) if row[1] else None,
                             float(row[2]) if row[2] else None,
                             bool(int(row[3]))))
    except OSError as exc:
        raise ReportingError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise ReportingError(f"bad value in {path}: {exc}") from exc
    return rows


# ---------------------------------------------------------------------------
# Summary
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        # Coerce numpy scalars so the repr is the plain number.
        return repr(float(value))
    return str(value)


def _summary_from_parts(n_windows: int, tallies: dict, bounds: dict,
                        rates: dict, theta_means: dict,
                        trigger_counts: dict) -> str:
    lines = ["[run]",
             f"manifest = {MANIFEST_NAME}",
             f"n_windows = {n_windows}",
             ""]
    for half in HALVES:
        cell = tallies[half].cell(half, "mu", "mu")
        qber = (cell.errors / cell.coincidences if cell.coincidences
                else None)
        half_bounds = bounds.get(half)
        half_rate = rates.get(half)
        lines += [f"[half_{half.lower()}]",
                  f"n_sifted = {cell.coincidences}",
                  f"n_errors = {cell.errors}",
                  f"signal_qber = {_fmt(qber)}"]
        if half_bounds is None:
            lines += ["y11_lower = none", "e11_upper = none"]
        else:
            lines += [f"y11_lower = {_fmt(half_bounds.y11_lower[half])}",
                      f"e11_upper = {_fmt(half_bounds.e11_upper)}"]
        rate = None if half_rate is None else half_rate.rate
        lines += [f"key_rate_bits_per_pulse = {_fmt(rate)}", ""]
    for user in USERS:
        means = theta_means[user]
        lines += [f"[{user}]",
                  f"mean_theta_z_rad = {_fmt(means['Z'])}",
                  f"mean_theta_x_rad = {_fmt(means['X'])}",
                  f"n_triggered = {trigger_counts[user]}",
                  ""]
    return "\n".join(lines)


def summary_text(report: SessionReport) -> str:
    """Human-readable digest; every number re-derivable from the CSVs."""
    theta_means = {user: report.mean_estimated_theta(user) for user in USERS}
    triggers = {user: sum(1 for trace in report.windows
                          if trace.triggered.get(user))
                for user in USERS}
    return _summary_from_parts(len(report.windows), report.tallies,
                               report.bounds, report.rates, theta_means,
                               triggers)


def recompute_summary(run_dir) -> str:
    """Rebuild summary.txt byte-for-byte from the manifest and CSVs.

    Reads nothing else: tallies give counts, bounds, and rates (via the
    config pinned in the manifest); misalignment traces give the
    per-basis estimator means and trigger counts.
    """
    import os

    from .config import parse_config_text

    manifest = read_manifest(os.path.join(run_dir, MANIFEST_NAME))
    config = parse_config_text(manifest.config_ini, source="manifest")
    tallies = {}
    for half in HALVES:
        name = manifest.outputs[f"tallies_{half.lower()}"]
        tallies[half] = _read_tallies(os.path.join(run_dir, name))
    bounds, rates = analyze_tallies(config, tallies)
    theta_means = {}
    trigger_counts = {}
    n_windows = None
    for user in USERS:
        name = manifest.outputs[f"misalignment_{user}"]
        rows = read_misalignment_csv(os.path.join(run_dir, name))
        if n_windows is None:
            n_windows = len(rows)
        elif n_windows != len(rows):
            raise ReportingError("misalignment traces disagree on the "
                                 "window count")
        means = {}
        for basis, column in (("Z", 1), ("X", 2)):
            values = [row[column] for row in rows if row[column] is not None]
            means[basis] = sum(values) / len(values) if values else None
        theta_means[user] = means
        trigger_counts[user] = sum(1 for row in rows if row[3])
    return _summary_from_parts(n_windows or 0, tallies, bounds, rates,
                               theta_means, trigger_counts)


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

def emit_traces(report: SessionReport, out_dir) -> dict:
    """Write misalignment traces, tally tables, and summary into out_dir.

    Returns {artifact role: path}.  The manifest is the caller's job
    (it must exist before the simulation, not after it).
    """
    import os

    paths = {}
    for user in USERS:
        path = os.path.join(out_dir, f"misalignment_{user}.csv")
        write_misalignment_csv(path, misalignment_rows(report, user))
        paths[f"misalignment_{user}"] = path
    for half in HALVES:
        path = os.path.join(out_dir, f"tallies_{half.lower()}.csv")
        try:
            report.tallies[half].write_csv(path)
        except OSError as exc:
            raise ReportingError(f"cannot write {path}: {exc}") from exc
        paths[f"tallies_{half.lower()}"] = path
    summary_path = os.path.join(out_dir, "summary.txt")
    _write_text(summary_path, summary_text(report))
    paths["summary"] = summary_path
    return paths


def _read_tallies(path) -> TallySet:
    try:
        return TallySet.read_csv(path)
    except OSError as exc:
        raise ReportingError(f"cannot read {path}: {exc}") from exc


def _write_text(path, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
    except OSError as exc:
        raise ReportingError(f"cannot write {path}: {exc}") from exc
