"""Session orchestration: config, sifting, recycling, and reporting.

A session runs the five-step protocol over a schedule of collection
windows: both senders transmit continuously; the measurement node
announces projection results; basis/intensity reveals drive sifting
and decoy tallies; partner-vacuum singles are revealed and recycled
into per-user misalignment estimates; and each user's compensator
reacts locally when its estimate crosses the trigger threshold.

Two sampling backends share all bookkeeping: the default aggregate
backend draws exact per-window multinomials (fast enough for hours of
virtual time), while the per-slot backend materializes every slot and
every announcement, which keeps the full protocol honest on short
sessions and pins down the privacy semantics at slot granularity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .bsm import (OUTCOME_CLASSES, OUTCOME_PSI_PLUS, OUTCOME_SINGLE_FIRST,
                  OUTCOME_SINGLE_SECOND, ARM_PROJECTORS, BasisSchedule,
                  DetectorParams)
from .compensation import ControllerConfig
from .decoy import (DEFAULT_ERROR_CORRECTION_EFFICIENCY, bound_y11_e11,
                    key_rate, p11)
from .polarization import BASIS_STATES
from .transmitter import (BASIS_LABELS, INTENSITY_LABELS, IntensityTable,
                          draw_decisions, draw_phases)
from .wire import (BasisIntensityReveal, BsmResult, PolarizationBitReveal)

MODES = ("in-process", "networked")
SAMPLING_BACKENDS = ("aggregate", "per-slot")
USERS = ("alice", "bob")


class SessionError(ValueError):
    """Raised for invalid session configuration or protocol faults."""


@dataclass(frozen=True)
class SessionConfig:
    """Everything a session run depends on; defaults mirror the experiment.

    duration_s is virtual time.  Per-user drift rates and initial
    misalignment angles describe the fiber arms; seeds derive every
    random stream, so equal configs give identical reports.
    """

    duration_s: float = 60.0
    rep_rate_hz: float = 10e6
    table_a: IntensityTable = field(default_factory=IntensityTable)
    table_b: IntensityTable = field(default_factory=IntensityTable)
    detector: DetectorParams = field(default_factory=DetectorParams)
    schedule: BasisSchedule = field(default_factory=BasisSchedule)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    drift_rate_a: float = 0.003
    drift_rate_b: float = 0.003
    initial_misalignment_a: float = 0.0
    initial_misalignment_b: float = 0.0
    compensation_enabled: bool = True
    seed: int = 0
    mode: str = "in-process"
    sampling: str = "aggregate"
    n_phase: int = 64
    reference_smoothing: float = 0.3
    bound_method: str = "analytic"
    error_correction_efficiency: float = DEFAULT_ERROR_CORRECTION_EFFICIENCY

    def __post_init__(self):
        if not self.duration_s >= 0.0:
            raise SessionError(f"duration_s must be >= 0, got {self.duration_s}")
        if not self.rep_rate_hz > 0.0:
            raise SessionError(f"rep_rate_hz must be > 0, got {self.rep_rate_hz}")
        for name in ("drift_rate_a", "drift_rate_b",
                     "initial_misalignment_a", "initial_misalignment_b"):
            if getattr(self, name) < 0.0:
                raise SessionError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.mode not in MODES:
            raise SessionError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sampling not in SAMPLING_BACKENDS:
            raise SessionError(f"sampling must be one of {SAMPLING_BACKENDS}, "
                               f"got {self.sampling!r}")
        if self.mode == "networked" and self.sampling != "aggregate":
            raise SessionError("networked mode supports aggregate sampling only")
        if not isinstance(self.seed, int):
            raise SessionError(f"seed must be an integer, got {self.seed!r}")
        if not self.n_phase >= 4:
            raise SessionError(f"n_phase must be >= 4, got {self.n_phase}")
        if not 0.0 < self.reference_smoothing <= 1.0:
            raise SessionError("reference_smoothing must be in (0, 1], got "
                               f"{self.reference_smoothing}")
        if self.bound_method not in ("analytic", "lp"):
            raise SessionError(f"bound_method must be 'analytic' or 'lp', "
                               f"got {self.bound_method!r}")
        if not self.error_correction_efficiency >= 1.0:
            raise SessionError("error_correction_efficiency must be >= 1, got "
                               f"{self.error_correction_efficiency}")
        if not isinstance(self.table_a, IntensityTable) \
                or not isinstance(self.table_b, IntensityTable):
            raise SessionError("table_a/table_b must be IntensityTable instances")
        if not isinstance(self.detector, DetectorParams):
            raise SessionError("detector must be a DetectorParams instance")
        if not isinstance(self.schedule, BasisSchedule):
            raise SessionError("schedule must be a BasisSchedule instance")
        if not isinstance(self.controller, ControllerConfig):
            raise SessionError("controller must be a ControllerConfig instance")

    def windows(self) -> list:
        """(t_start, dt, meas_basis) for every window covering the duration."""
        out = []
        index = 0
        t = 0.0
        while t < self.duration_s - 1e-9:
            dt = min(self.schedule.period, self.duration_s - t)
            out.append((t, dt, self.schedule.window_basis(index)))
            t += dt
            index += 1
        return out

    def slots_in(self, dt: float) -> int:
        return int(round(self.rep_rate_hz * dt))


@dataclass(frozen=True)
class WindowTrace:
    """Per-window record: estimates, ground-truth angles, accounting."""

    index: int
    t_start: float
    duration: float
    meas_basis: str
    n_slots: int
    est_theta: dict
    true_theta: dict
    estimator_counts: dict
    triggered: dict
    counts: dict


@dataclass(frozen=True)
class SiftSummary:
    """Sifted-key accounting for one measurement-basis half."""

    n_sifted: int
    n_errors: int

    @property
    def qber(self) -> float:
        return self.n_errors / self.n_sifted if self.n_sifted else 0.0


@dataclass
class SessionReport:
    """Everything a finished session hands to reporting and analysis."""

    duration_s: float
    seed: int
    mode: str
    sampling: str
    windows: list
    tallies: dict
    sifted: dict
    bounds: dict
    rates: dict
    final_retardances: dict

    def mean_estimated_theta(self, user: str) -> dict:
        """Average estimated misalignment per basis for one user."""
        sums = {"Z": [0.0, 0], "X": [0.0, 0]}
        for trace in self.windows:
            est = trace.est_theta.get(user)
            if est is not None:
                sums[trace.meas_basis][0] += est
                sums[trace.meas_basis][1] += 1
        return {basis: (total / n if n else None)
                for basis, (total, n) in sums.items()}

    def mean_true_theta(self, user: str) -> dict:
        """Average ground-truth misalignment per basis for one user."""
        sums = {"Z": 0.0, "X": 0.0}
        if not self.windows:
            return {"Z": None, "X": None}
        for trace in self.windows:
            angles = trace.true_theta[user]
            sums["Z"] += angles[0]
            sums["X"] += angles[1]
        return {basis: sums[basis] / len(self.windows) for basis in sums}


# ---------------------------------------------------------------------------
# Slot-level protocol operations
# ---------------------------------------------------------------------------

def sift(outcomes, reveals_a, reveals_b, meas_basis: str,
         bits_a=None, bits_b=None):
    """Select key slots and count errors from announced results.

    outcomes is an iterable of BsmResult; reveals_* map slot to
    BasisIntensityReveal.  A slot enters the key when the projection
    was the both-click class and both users reveal the measured basis
    at signal intensity; a kept slot missing either reveal is dropped
    and counted.  When the true bits are supplied, errors are counted
    under the both-click correlation rule (anticorrelated bits are
    correct in the measured basis).

    Returns (kept_slots, summary_dict).
    """
    kept = []
    n_errors = 0
    n_missing = 0
    for result in outcomes:
        if result.outcome != OUTCOME_PSI_PLUS:
            continue
        ra = reveals_a.get(result.slot)
        rb = reveals_b.get(result.slot)
        if ra is None or rb is None:
            n_missing += 1
            continue
        if ra.basis != meas_basis or rb.basis != meas_basis:
            continue
        if ra.intensity != "mu" or rb.intensity != "mu":
            continue
        kept.append(result.slot)
        if bits_a is not None and bits_b is not None:
            if bits_a[result.slot] == bits_b[result.slot]:
                n_errors += 1
    return kept, {"n_sifted": len(kept), "n_errors": n_errors,
                  "n_dropped_missing_reveal": n_missing}


def recycle_singles(outcomes, reveals_a, reveals_b, bit_reveals_a,
                    bit_reveals_b, meas_basis: str):
    """Estimator counts from partner-vacuum singles, enforcing privacy.

    A bit reveal is legitimate only for a slot whose outcome was a
    single click and whose counterpart revealed the near-vacuum
    intensity; any other bit reveal is a protocol fault and aborts the
    session.  Legitimate reveals from states prepared in the measured
    basis contribute (wrong-arm, total) counts per state label; the
    wrong arm for bit 0 is the second arm and vice versa.

    Returns {user: {state label: (n_wrong, n_total)}}.
    """
    outcome_by_slot = {r.slot: r for r in outcomes}
    counts = {user: {} for user in USERS}
    sides = (("alice", bit_reveals_a, reveals_a, reveals_b),
             ("bob", bit_reveals_b, reveals_b, reveals_a))
    for user, bit_reveals, own_reveals, partner_reveals in sides:
        for slot, reveal in bit_reveals.items():
            result = outcome_by_slot.get(slot)
            if result is None or result.outcome not in (OUTCOME_SINGLE_FIRST,
                                                        OUTCOME_SINGLE_SECOND):
                raise SessionError(
                    f"privacy fault: {user} revealed a bit for slot {slot} "
                    "whose outcome was not a failed (single-click) projection")
            partner = partner_reveals.get(slot)
            if partner is None or partner.intensity != "omega":
                raise SessionError(
                    f"privacy fault: {user} revealed a bit for slot {slot} "
                    "although the counterpart did not send the near-vacuum "
                    "intensity")
            own = own_reveals.get(slot)
            if own is None or own.basis != meas_basis:
                continue
            if own.intensity == "omega":
                continue
            wrong_outcome = (OUTCOME_SINGLE_SECOND if reveal.bit == 0
                             else OUTCOME_SINGLE_FIRST)
            label = BASIS_STATES[own.basis][reveal.bit]
            prev_wrong, prev_total = counts[user].get(label, (0, 0))
            counts[user][label] = (prev_wrong
                                   + (1 if result.outcome == wrong_outcome else 0),
                                   prev_total + 1)
    return counts


# ---------------------------------------------------------------------------
# Per-slot sampling backend
# ---------------------------------------------------------------------------

def sample_window_slots(config: SessionConfig, window_index: int,
                        n_slots: int, meas_basis: str,
                        channel_a: np.ndarray, channel_b: np.ndarray,
                        rng: np.random.Generator):
    """Materialize every slot of one window.

    Returns (announcements, reveals, bit_reveals, ground_truth) where
    announcements are the node's BsmResults for every clicked slot,
    reveals/bit_reveals follow the protocol rules, and ground_truth
    carries the per-slot decisions for bookkeeping that the protocol
    itself never sees.
    """
    classes_a = engine.DecisionClasses.build(config.table_a)
    classes_b = engine.DecisionClasses.build(config.table_b)
    slots = np.arange(n_slots, dtype=np.uint64)
    base_slot = window_index << 40
    abs_slots = slots + np.uint64(base_slot)
    bits_a, bases_a, ints_a = draw_decisions(config.seed * 2 + 0, abs_slots,
                                             config.table_a)
    bits_b, bases_b, ints_b = draw_decisions(config.seed * 2 + 1, abs_slots,
                                             config.table_b)
    phases = draw_phases(config.seed * 2 + 0, abs_slots) \
        - draw_phases(config.seed * 2 + 1, abs_slots)
    idx_a = bases_a * 6 + bits_a * 3 + ints_a
    idx_b = bases_b * 6 + bits_b * 3 + ints_b
    bras = ARM_PROJECTORS[meas_basis]
    rotated_a = classes_a.states @ np.asarray(channel_a, dtype=complex).T
    rotated_b = classes_b.states @ np.asarray(channel_b, dtype=complex).T
    amp_a = (rotated_a @ bras.T) * np.sqrt(classes_a.mean_photons)[:, None]
    amp_b = (rotated_b @ bras.T) * np.sqrt(classes_b.mean_photons)[:, None]
    intensity = np.abs(amp_a[idx_a] + amp_b[idx_b]
                       * np.exp(1.0j * phases)[:, None]) ** 2 / 2.0
    p_click = 1.0 - (1.0 - config.detector.dark_prob) \
        * np.exp(-config.detector.efficiency * intensity)
    clicks = rng.random(intensity.shape) < p_click
    outcome_idx = np.where(
        clicks[:, 0] & clicks[:, 1], 0,
        np.where(clicks[:, 0], 1, np.where(clicks[:, 1], 2, 3)))

    announcements = []
    reveals = {user: {} for user in USERS}
    bit_reveals = {user: {} for user in USERS}
    detected = np.nonzero(outcome_idx != 3)[0]
    for k in detected:
        slot = int(abs_slots[k])
        outcome = OUTCOME_CLASSES[outcome_idx[k]]
        announcements.append(BsmResult(slot=slot, basis=meas_basis,
                                       outcome=outcome))
        for user, bases, bits, ints in (("alice", bases_a, bits_a, ints_a),
                                        ("bob", bases_b, bits_b, ints_b)):
            reveals[user][slot] = BasisIntensityReveal(
                user=user, slot=slot, basis=BASIS_LABELS[bases[k]],
                intensity=INTENSITY_LABELS[ints[k]])
        if outcome in (OUTCOME_SINGLE_FIRST, OUTCOME_SINGLE_SECOND):
            if INTENSITY_LABELS[ints_b[k]] == "omega" \
                    and INTENSITY_LABELS[ints_a[k]] != "omega":
                bit_reveals["alice"][slot] = PolarizationBitReveal(
                    user="alice", slot=slot, bit=int(bits_a[k]))
            elif INTENSITY_LABELS[ints_a[k]] == "omega" \
                    and INTENSITY_LABELS[ints_b[k]] != "omega":
                bit_reveals["bob"][slot] = PolarizationBitReveal(
                    user="bob", slot=slot, bit=int(bits_b[k]))
    truth = {
        "bits": {"alice": {int(abs_slots[k]): int(bits_a[k]) for k in detected},
                 "bob": {int(abs_slots[k]): int(bits_b[k]) for k in detected}},
        "combo_counts": None,
        "outcome_counts": None,
    }
    combo = np.zeros((12, 12), dtype=np.int64)
    np.add.at(combo, (idx_a, idx_b), 1)
    outcomes_grid = np.zeros((12, 12, 4), dtype=np.int64)
    np.add.at(outcomes_grid, (idx_a, idx_b, outcome_idx), 1)
    truth["combo_counts"] = combo
    truth["outcome_counts"] = outcomes_grid
    return announcements, reveals, bit_reveals, truth


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

def summarize_sifted(tallies: dict) -> dict:
    """Sifted counts per half: matched-basis signal cells of the tallies."""
    sifted = {}
    for half, tally_set in tallies.items():
        cell = tally_set.cell(half, "mu", "mu")
        sifted[half] = SiftSummary(n_sifted=cell.coincidences,
                                   n_errors=cell.errors)
    return sifted


def analyze_tallies(config: SessionConfig, tallies: dict) -> tuple:
    """Decoy bounds and key rate per measurement half, where computable.

    The decoy system assumes both senders draw from the same intensity
    table; with asymmetric tables the analysis is skipped rather than
    silently misapplied.
    """
    bounds: dict = {}
    rates: dict = {}
    if config.table_a != config.table_b:
        return ({half: None for half in tallies},
                {half: None for half in tallies})
    for half, tally_set in tallies.items():
        signal = tally_set.cell(half, "mu", "mu")
        if signal.sent == 0 or signal.coincidences == 0:
            bounds[half] = None
            rates[half] = None
            continue
        grids = {basis: tally_set.gain_grid(basis) for basis in BASIS_LABELS}
        half_bounds = bound_y11_e11(grids, config.table_a, half,
                                    method=config.bound_method,
                                    shift_sigmas=1.0)
        q_signal = signal.coincidences / signal.sent
        e_signal = signal.errors / signal.coincidences
        bounds[half] = half_bounds
        rates[half] = key_rate(p11(config.table_a.mu),
                               half_bounds.y11_lower[half],
                               half_bounds.e11_upper, q_signal, e_signal,
                               config.error_correction_efficiency)
    return bounds, rates


def run_session(config: SessionConfig) -> SessionReport:
    """Execute a session under the configured mode and sampling backend."""
    from . import nodes
    if config.mode == "networked":
        return nodes.run_networked(config)
    return nodes.run_in_process(config)
