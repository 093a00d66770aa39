"""Interference and threshold detection at the measurement node.

The two senders' weak coherent pulses meet on a 50:50 beam splitter.  One
output port is monitored: a polarizing splitter in the currently
scheduled basis feeds two threshold detectors.  The first arm projects
onto the basis' bit-0 state (H in Z windows, D in X windows), the second
onto the bit-1 state.  A joint click on both arms is announced as a
successful projection (psi_plus class); lone clicks are kept as singles
because they become useful when one sender transmitted near-vacuum.

With coherent inputs the arm intensities are exact functions of the
relative optical phase phi:

    a_m = (<m|psi_A> sqrt(mu_A) + e^{i phi} <m|psi_B> sqrt(mu_B)) / sqrt(2)
    I_m = |a_m|^2 = c0_m + Re(c1_m e^{i phi})

and each detector clicks independently with 1 - (1 - d) exp(-eta I_m).
Since phi is uniform and independent per slot, slot outcomes are i.i.d.
draws from the phase-averaged class probabilities; the average is
evaluated on a uniform phase grid, which converges exponentially for
these periodic integrands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .polarization import JONES_STATES

OUTCOME_PSI_PLUS = "psi_plus"
OUTCOME_SINGLE_FIRST = "single_first"
OUTCOME_SINGLE_SECOND = "single_second"
OUTCOME_NO_CLICK = "no_click"
# Reserved for detector layouts that can flag other double clicks; the
# two-detector port used here never produces it.
OUTCOME_DOUBLE_OTHER = "double_other"

OUTCOME_CLASSES = (OUTCOME_PSI_PLUS, OUTCOME_SINGLE_FIRST,
                   OUTCOME_SINGLE_SECOND, OUTCOME_NO_CLICK)

# Rows are the arm bras of the monitored polarizing splitter.
ARM_PROJECTORS = {
    "Z": np.array([JONES_STATES["H"], JONES_STATES["V"]]).conj(),
    "X": np.array([JONES_STATES["D"], JONES_STATES["A"]]).conj(),
}

DEFAULT_PHASE_GRID = 64


class BsmError(ValueError):
    """Raised for invalid measurement-node configuration."""


@dataclass(frozen=True)
class DetectorParams:
    """Threshold detector model: total efficiency and dark-click probability.

    efficiency folds every loss between a sender and a detector (fiber,
    coupling, detector quantum efficiency) into one number.  dark_prob is
    the per-slot probability of a click with no light present.  The
    defaults are the output of the calibrate command: efficiency is
    fitted so the Z-window same-basis signal gain equals 3.0e-5 at
    mu = 0.28 with the default dark probability.
    """

    efficiency: float = 0.055515164
    dark_prob: float = 2.0e-6

    def __post_init__(self):
        if not 0.0 < self.efficiency <= 1.0:
            raise BsmError(f"efficiency must be in (0, 1], got {self.efficiency}")
        if not 0.0 <= self.dark_prob < 1.0:
            raise BsmError(f"dark_prob must be in [0, 1), got {self.dark_prob}")


@dataclass(frozen=True)
class BasisSchedule:
    """Deterministic alternation of the measurement basis.

    The session is cut into windows of `period` seconds; even-indexed
    windows measure in Z, odd-indexed windows in X, starting at Z for
    t = 0.
    """

    period: float = 15.0

    def __post_init__(self):
        if not self.period > 0.0:
            raise BsmError(f"schedule period must be positive, got {self.period}")

    def window_index(self, t: float) -> int:
        if t < 0:
            raise BsmError("time must be nonnegative")
        return int(math.floor(t / self.period))

    def window_basis(self, index: int) -> str:
        return "Z" if index % 2 == 0 else "X"

    def basis_at(self, t: float) -> str:
        return self.window_basis(self.window_index(t))

    def n_windows(self, duration: float) -> int:
        """Number of complete windows in a session of `duration` seconds."""
        return int(math.floor(duration / self.period + 1e-9))


@dataclass(frozen=True)
class OutcomeRecord:
    """One slot's detection result."""

    slot: int
    basis: str
    outcome: str
    clicks: tuple[bool, bool]


def classify(click_first: bool, click_second: bool) -> str:
    if click_first and click_second:
        return OUTCOME_PSI_PLUS
    if click_first:
        return OUTCOME_SINGLE_FIRST
    if click_second:
        return OUTCOME_SINGLE_SECOND
    return OUTCOME_NO_CLICK


def output_intensities(jones_a: np.ndarray, mu_a: float,
                       jones_b: np.ndarray, mu_b: float,
                       basis: str, phase: float):
    """Mean photon numbers in the four output modes of the splitter.

    Returns (monitored, discarded), each an array over the two basis arms.
    """
    bras = ARM_PROJECTORS[basis]
    amp_a = bras @ np.asarray(jones_a, dtype=complex) * math.sqrt(mu_a)
    amp_b = bras @ np.asarray(jones_b, dtype=complex) * math.sqrt(mu_b)
    rotated_b = amp_b * np.exp(1.0j * phase)
    monitored = np.abs(amp_a + rotated_b) ** 2 / 2.0
    discarded = np.abs(amp_a - rotated_b) ** 2 / 2.0
    return monitored, discarded


def mode_intensities(pulse_a, pulse_b, basis: str, phase: float) -> np.ndarray:
    """Monitored-port mean photon numbers per arm for two prepared pulses."""
    if basis not in ARM_PROJECTORS:
        raise BsmError(f"unknown measurement basis {basis!r}")
    monitored, _ = output_intensities(pulse_a.jones, pulse_a.mean_photons,
                                      pulse_b.jones, pulse_b.mean_photons,
                                      basis, phase)
    return monitored


def click_probabilities(intensities: np.ndarray,
                        params: DetectorParams) -> np.ndarray:
    """Per-arm click probability 1 - (1 - d) exp(-eta I)."""
    intensities = np.asarray(intensities, dtype=float)
    if np.any(intensities < 0):
        raise BsmError("intensities must be nonnegative")
    return 1.0 - (1.0 - params.dark_prob) * np.exp(-params.efficiency * intensities)


def sample_outcome(intensities: np.ndarray, params: DetectorParams,
                   rng: np.random.Generator, slot: int = 0,
                   basis: str = "Z") -> OutcomeRecord:
    """Draw one slot's outcome from independent per-arm clicks."""
    probs = click_probabilities(intensities, params)
    clicks = rng.random(2) < probs
    return OutcomeRecord(slot=slot, basis=basis,
                         outcome=classify(bool(clicks[0]), bool(clicks[1])),
                         clicks=(bool(clicks[0]), bool(clicks[1])))


def phase_coefficients(states_a: np.ndarray, mus_a: np.ndarray,
                       states_b: np.ndarray, mus_b: np.ndarray,
                       basis: str):
    """Arm-intensity phase coefficients for every (a, b) input combination.

    For input combination (i, j) and arm m the monitored intensity is
    c0[i, j, m] + Re(c1[i, j, m] e^{i phi}).  states_* are stacks of
    Jones vectors, mus_* the matching mean photon numbers.
    """
    bras = ARM_PROJECTORS[basis]
    amps_a = np.asarray(states_a, dtype=complex) @ bras.T \
        * np.sqrt(np.asarray(mus_a, dtype=float))[:, None]
    amps_b = np.asarray(states_b, dtype=complex) @ bras.T \
        * np.sqrt(np.asarray(mus_b, dtype=float))[:, None]
    c0 = (np.abs(amps_a[:, None, :]) ** 2 + np.abs(amps_b[None, :, :]) ** 2) / 2.0
    c1 = amps_a.conj()[:, None, :] * amps_b[None, :, :]
    return c0, c1


def class_probability_grid(states_a: np.ndarray, mus_a: np.ndarray,
                           states_b: np.ndarray, mus_b: np.ndarray,
                           basis: str, params: DetectorParams,
                           n_phase: int = DEFAULT_PHASE_GRID) -> np.ndarray:
    """Phase-averaged outcome-class probabilities for all input pairs.

    Returns an array of shape (len(states_a), len(states_b), 4) ordered
    as OUTCOME_CLASSES.  The average over the uniform relative phase is
    taken on an n_phase-point grid.
    """
    c0, c1 = phase_coefficients(states_a, mus_a, states_b, mus_b, basis)
    phases = np.exp(1.0j * 2.0 * math.pi * np.arange(n_phase) / n_phase)
    intensity = c0[..., None] + np.real(c1[..., None] * phases)
    p_click = 1.0 - (1.0 - params.dark_prob) \
        * np.exp(-params.efficiency * intensity)
    p_first, p_second = p_click[..., 0, :], p_click[..., 1, :]
    stacked = np.stack([
        p_first * p_second,
        p_first * (1.0 - p_second),
        (1.0 - p_first) * p_second,
        (1.0 - p_first) * (1.0 - p_second),
    ], axis=-2)
    return stacked.mean(axis=-1)


def class_probabilities(jones_a: np.ndarray, mu_a: float,
                        jones_b: np.ndarray, mu_b: float,
                        basis: str, params: DetectorParams,
                        n_phase: int = DEFAULT_PHASE_GRID) -> np.ndarray:
    """Phase-averaged class probabilities for one input pair."""
    grid = class_probability_grid(
        np.asarray(jones_a, dtype=complex)[None, :], np.array([mu_a]),
        np.asarray(jones_b, dtype=complex)[None, :], np.array([mu_b]),
        basis, params, n_phase)
    return grid[0, 0]


def pair_gain_and_qber(pair_basis: str, meas_basis: str,
                       mu_a: float, mu_b: float, params: DetectorParams,
                       channel_a: np.ndarray | None = None,
                       channel_b: np.ndarray | None = None,
                       n_phase: int = DEFAULT_PHASE_GRID) -> tuple[float, float]:
    """Analytic gain and error rate for same-basis sender pairs.

    Both senders prepare in pair_basis with uniform independent bits while
    the node measures in meas_basis.  A joint-click event is correct when
    the bits anticorrelate if pair_basis equals the measurement basis,
    and when they correlate otherwise (the projected two-photon state is
    anticorrelated in the measurement basis and correlated in its
    conjugate).  Returns (gain, qber); qber is NaN when the gain is zero.
    """
    from .polarization import bb84_state

    states = np.stack([bb84_state(pair_basis, bit) for bit in (0, 1)])
    if channel_a is not None:
        states_a = states @ np.asarray(channel_a, dtype=complex).T
    else:
        states_a = states
    if channel_b is not None:
        states_b = states @ np.asarray(channel_b, dtype=complex).T
    else:
        states_b = states
    grid = class_probability_grid(states_a, np.full(2, float(mu_a)),
                                  states_b, np.full(2, float(mu_b)),
                                  meas_basis, params, n_phase)
    coincidence = grid[..., 0]
    gain = float(coincidence.mean())
    anticorrelated = coincidence[0, 1] + coincidence[1, 0]
    correlated = coincidence[0, 0] + coincidence[1, 1]
    wrong = correlated if pair_basis == meas_basis else anticorrelated
    total = anticorrelated + correlated
    qber = float(wrong / total) if total > 0 else float("nan")
    return gain, qber


def monte_carlo_pair(pair_basis: str, meas_basis: str,
                     mu_a: float, mu_b: float, params: DetectorParams,
                     n_trials: int, rng: np.random.Generator,
                     channel_a: np.ndarray | None = None,
                     channel_b: np.ndarray | None = None):
    """Monte-Carlo gain and error counts for same-basis sender pairs.

    Independent route from the analytic grid: per-trial amplitudes are
    assembled directly from sampled bits and phases, and detector clicks
    are Bernoulli draws.  Returns (gain, n_correct, n_wrong).
    """
    from .polarization import bb84_state

    states = np.stack([bb84_state(pair_basis, bit) for bit in (0, 1)])
    if channel_a is not None:
        states_a = states @ np.asarray(channel_a, dtype=complex).T
    else:
        states_a = states
    if channel_b is not None:
        states_b = states @ np.asarray(channel_b, dtype=complex).T
    else:
        states_b = states
    bras = ARM_PROJECTORS[meas_basis]
    bits_a = rng.integers(0, 2, size=n_trials)
    bits_b = rng.integers(0, 2, size=n_trials)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=n_trials)
    amp_a = states_a[bits_a] @ bras.T * math.sqrt(mu_a)
    amp_b = states_b[bits_b] @ bras.T * math.sqrt(mu_b)
    intensity = np.abs(amp_a + amp_b * np.exp(1.0j * phases)[:, None]) ** 2 / 2.0
    p_click = 1.0 - (1.0 - params.dark_prob) \
        * np.exp(-params.efficiency * intensity)
    clicks = rng.random(intensity.shape) < p_click
    coincidence = clicks[:, 0] & clicks[:, 1]
    expect_anti = pair_basis == meas_basis
    wrong_bits = (bits_a == bits_b) if expect_anti else (bits_a != bits_b)
    n_wrong = int(np.sum(coincidence & wrong_bits))
    n_correct = int(np.sum(coincidence & ~wrong_bits))
    return coincidence.mean(), n_correct, n_wrong
