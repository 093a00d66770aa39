"""Per-slot pulse preparation for the two senders.

Each slot carries an independent (bit, basis, intensity) decision plus a
fresh uniform optical phase.  Decisions are a pure function of
(seed, slot, stream), implemented with the splitmix64 mixing function so
that any slot can be regenerated in isolation and bulk generation
vectorizes.  An optional repeating-pattern mode replays a fixed-length
decision sequence, mimicking a transmitter fed from a short stored
random pattern instead of a live source.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .polarization import bb84_state

INTENSITY_LABELS = ("mu", "nu", "omega")
BASIS_LABELS = ("Z", "X")

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_DECISION_STREAM = 0x1D
_PHASE_STREAM = 0x2F

# 2^-53, turns the top 53 bits of a word into a uniform double in [0, 1).
_INV_2_53 = float(2.0 ** -53)


class TransmitterError(ValueError):
    """Raised for invalid transmitter configuration."""


@dataclass(frozen=True)
class IntensityTable:
    """Mean photon numbers and draw probabilities of the three pulse classes.

    mu is the signal intensity, nu the weak decoy, omega the near-vacuum
    decoy whose detections feed the compensation loop.
    """

    mu: float = 0.28
    nu: float = 0.07
    omega: float = 0.001
    p_mu: float = 0.52
    p_nu: float = 0.33
    p_omega: float = 0.15

    def __post_init__(self):
        if not self.mu > self.nu > self.omega >= 0.0:
            raise TransmitterError(
                "intensities must satisfy mu > nu > omega >= 0, got "
                f"({self.mu}, {self.nu}, {self.omega})")
        probs = self.probabilities
        if min(probs) < 0.0:
            raise TransmitterError("intensity probabilities must be nonnegative")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise TransmitterError(
                f"intensity probabilities must sum to 1, got {sum(probs)!r}")

    @property
    def probabilities(self) -> tuple[float, float, float]:
        return (self.p_mu, self.p_nu, self.p_omega)

    @property
    def intensities(self) -> tuple[float, float, float]:
        return (self.mu, self.nu, self.omega)

    def intensity(self, label: str) -> float:
        return self.intensities[INTENSITY_LABELS.index(label)]


@dataclass(frozen=True)
class PulseDecision:
    """One slot's transmit choice."""

    slot: int
    basis: str
    bit: int
    intensity: str


@dataclass(frozen=True)
class CoherentPulse:
    """Weak coherent pulse: Jones state, mean photon number, optical phase."""

    jones: np.ndarray
    mean_photons: float
    phase: float


def _splitmix64(words: np.ndarray) -> np.ndarray:
    z = (words + _GOLDEN).astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _slot_words(seed: int, slots: np.ndarray, stream: int) -> np.ndarray:
    """One 64-bit word per slot, independent across (seed, stream)."""
    # Arithmetic wraps mod 2^64 by design; keep everything in arrays so
    # numpy applies modular semantics silently.
    stream_word = _splitmix64(np.array([stream], dtype=np.uint64))
    base = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
                       ^ stream_word)
    return _splitmix64(slots.astype(np.uint64) ^ base[0])


def _uniform_from_words(words: np.ndarray) -> np.ndarray:
    return (words >> np.uint64(11)).astype(np.float64) * _INV_2_53


def draw_decisions(seed: int, slots: np.ndarray, table: IntensityTable,
                   pattern_length: int | None = None):
    """Vectorized decisions for an array of slot indices.

    Returns (bits, basis_indices, intensity_indices) as integer arrays;
    basis index 0 is Z, intensity indices follow INTENSITY_LABELS.
    """
    slots = np.asarray(slots, dtype=np.uint64)
    if pattern_length is not None:
        if pattern_length <= 0:
            raise TransmitterError("pattern_length must be positive")
        slots = slots % np.uint64(pattern_length)
    words = _slot_words(seed, slots, _DECISION_STREAM)
    bits = (words & np.uint64(1)).astype(np.int64)
    bases = ((words >> np.uint64(1)) & np.uint64(1)).astype(np.int64)
    uniforms = _uniform_from_words(words)
    edges = np.cumsum(table.probabilities)
    intensity_idx = np.searchsorted(edges[:2], uniforms, side="right")
    return bits, bases, intensity_idx


def draw_decision(slot: int, table: IntensityTable, seed: int,
                  pattern_length: int | None = None) -> PulseDecision:
    """Decision for a single slot; pure function of (seed, slot)."""
    if slot < 0:
        raise TransmitterError("slot must be nonnegative")
    bits, bases, intensity_idx = draw_decisions(
        seed, np.array([slot]), table, pattern_length)
    return PulseDecision(slot=slot,
                         basis=BASIS_LABELS[int(bases[0])],
                         bit=int(bits[0]),
                         intensity=INTENSITY_LABELS[int(intensity_idx[0])])


def draw_phases(seed: int, slots: np.ndarray) -> np.ndarray:
    """Fresh uniform optical phase in [0, 2 pi) per slot."""
    words = _slot_words(seed, np.asarray(slots, dtype=np.uint64), _PHASE_STREAM)
    return _uniform_from_words(words) * (2.0 * math.pi)


def prepare_pulse(decision: PulseDecision, table: IntensityTable,
                  seed: int) -> CoherentPulse:
    """Coherent pulse realizing a decision, with its own random phase."""
    phase = float(draw_phases(seed, np.array([decision.slot]))[0])
    return CoherentPulse(jones=bb84_state(decision.basis, decision.bit),
                         mean_photons=table.intensity(decision.intensity),
                         phase=phase)


def decision_probabilities(table: IntensityTable) -> dict:
    """Joint probability of each (basis, bit, intensity) label per slot."""
    probs = {}
    for basis in BASIS_LABELS:
        for bit in (0, 1):
            for label, p_int in zip(INTENSITY_LABELS, table.probabilities):
                probs[(basis, bit, label)] = 0.25 * p_int
    return probs


def key_fraction(p_mu: float) -> float:
    """Fraction of slot pairs that can enter the sifted key.

    Both senders must pick the same fixed basis (1/4), both the signal
    intensity (p_mu^2), and their uniform bits must anticorrelate (1/2).
    """
    return p_mu ** 2 / 8.0


def recyclable_fraction(p_omega: float) -> tuple[float, float]:
    """Fraction of slot pairs usable by the compensation estimators.

    A pair is usable for one sender when that sender picked a non-vacuum
    intensity while the partner picked omega.  Returns (per_sender, total);
    the two per-sender sets are disjoint so the total is their sum.
    """
    per_sender = p_omega * (1.0 - p_omega)
    return per_sender, 2.0 * per_sender


def reference_intensity_table() -> IntensityTable:
    """Default biased-probability settings for the three intensities."""
    return IntensityTable()


def equal_thirds_table() -> IntensityTable:
    """Alternate settings drawing each intensity with probability 1/3."""
    return IntensityTable(p_mu=1.0 / 3.0, p_nu=1.0 / 3.0, p_omega=1.0 / 3.0)
