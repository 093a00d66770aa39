"""Window-level aggregate sampling of measurement-node statistics.

Slot-by-slot simulation of a 10 MHz source is hopeless at desk scale
(a four-hour session is 1.4e11 slots), but within one collection window
the channels are frozen and every slot is an i.i.d. draw over a finite
set of sender-decision combinations.  The per-window statistics are
therefore exact multinomials:

  1. each sender's decision falls in one of 12 classes
     (basis, bit, intensity), with known probabilities;
  2. the 144 joint decision combinations get slot counts from one
     multinomial over the window's slot budget;
  3. each combination's detection outcomes (both-click, single on
     either arm, no click) follow the phase-averaged class
     probabilities for the channel-rotated states, sampled as one
     multinomial per combination.

Aggregating those counts reproduces the exact joint distribution of
every quantity the session tracks (tallies, estimator counts,
conservation classes) without touching individual slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsm import (DEFAULT_PHASE_GRID, DetectorParams, class_probability_grid)
from .decoy import TallySet
from .polarization import BASIS_STATES, bb84_state
from .transmitter import BASIS_LABELS, INTENSITY_LABELS, IntensityTable

OMEGA_INDEX = INTENSITY_LABELS.index("omega")
MU_INDEX = INTENSITY_LABELS.index("mu")

N_OUTCOME_CLASSES = 4
PSI_PLUS, SINGLE_FIRST, SINGLE_SECOND, NO_CLICK = range(N_OUTCOME_CLASSES)

CONSERVATION_CLASSES = ("key_candidate", "recycled", "decoy_coincidence",
                        "discarded")


class EngineError(ValueError):
    """Raised for invalid engine inputs."""


@dataclass(frozen=True)
class DecisionClasses:
    """The 12 per-sender decision classes and their probabilities.

    Class index layout: basis-major, then bit, then intensity, i.e.
    index = 6*basis + 3*bit + intensity with basis 0 = Z, and intensity
    following INTENSITY_LABELS.
    """

    bases: np.ndarray
    bits: np.ndarray
    intensities: np.ndarray
    probabilities: np.ndarray
    states: np.ndarray
    mean_photons: np.ndarray

    @classmethod
    def build(cls, table: IntensityTable) -> "DecisionClasses":
        bases, bits, intensities, probs = [], [], [], []
        states, mus = [], []
        for basis_idx, basis in enumerate(BASIS_LABELS):
            for bit in (0, 1):
                for int_idx, label in enumerate(INTENSITY_LABELS):
                    bases.append(basis_idx)
                    bits.append(bit)
                    intensities.append(int_idx)
                    probs.append(0.25 * table.probabilities[int_idx])
                    states.append(bb84_state(basis, bit))
                    mus.append(table.intensities[int_idx])
        return cls(bases=np.array(bases), bits=np.array(bits),
                   intensities=np.array(intensities),
                   probabilities=np.array(probs),
                   states=np.stack(states),
                   mean_photons=np.array(mus))

    def __len__(self) -> int:
        return len(self.bases)

    def state_label(self, index: int) -> str:
        basis = BASIS_LABELS[self.bases[index]]
        return BASIS_STATES[basis][self.bits[index]]


def window_class_probabilities(classes_a: DecisionClasses,
                               classes_b: DecisionClasses,
                               channel_a: np.ndarray, channel_b: np.ndarray,
                               meas_basis: str, params: DetectorParams,
                               n_phase: int = DEFAULT_PHASE_GRID) -> np.ndarray:
    """Outcome-class probabilities (12, 12, 4) under frozen channels."""
    states_a = classes_a.states @ np.asarray(channel_a, dtype=complex).T
    states_b = classes_b.states @ np.asarray(channel_b, dtype=complex).T
    return class_probability_grid(states_a, classes_a.mean_photons,
                                  states_b, classes_b.mean_photons,
                                  meas_basis, params, n_phase)


def sample_window_counts(n_slots: int, classes_a: DecisionClasses,
                         classes_b: DecisionClasses,
                         class_probs: np.ndarray,
                         rng: np.random.Generator):
    """Draw one window's decision-combination and outcome counts.

    Returns (combo_counts, outcome_counts) with shapes (12, 12) and
    (12, 12, 4); outcome_counts sums to combo_counts per combination.
    """
    if n_slots < 0:
        raise EngineError("slot count must be nonnegative")
    n_a, n_b = len(classes_a), len(classes_b)
    joint = np.outer(classes_a.probabilities, classes_b.probabilities).ravel()
    combo_counts = rng.multinomial(n_slots, joint).reshape(n_a, n_b)
    outcome_counts = np.zeros((n_a, n_b, N_OUTCOME_CLASSES), dtype=np.int64)
    for i in range(n_a):
        for j in range(n_b):
            count = int(combo_counts[i, j])
            if count:
                outcome_counts[i, j] = rng.multinomial(count,
                                                       class_probs[i, j])
    return combo_counts, outcome_counts


def accumulate_tallies(tallies: TallySet, classes_a: DecisionClasses,
                       classes_b: DecisionClasses, meas_basis: str,
                       combo_counts: np.ndarray,
                       outcome_counts: np.ndarray) -> None:
    """Fold one window's same-basis pair counts into a TallySet.

    Coincidences on a both-click pair are erroneous when the bits match
    in the measurement basis or differ in its conjugate.
    """
    meas_idx = BASIS_LABELS.index(meas_basis)
    for i in range(len(classes_a)):
        for j in range(len(classes_b)):
            if classes_a.bases[i] != classes_b.bases[j]:
                continue
            pair_basis = BASIS_LABELS[classes_a.bases[i]]
            coincidences = int(outcome_counts[i, j, PSI_PLUS])
            same_bits = classes_a.bits[i] == classes_b.bits[j]
            wrong = same_bits if classes_a.bases[i] == meas_idx else not same_bits
            tallies.record(pair_basis,
                           INTENSITY_LABELS[classes_a.intensities[i]],
                           INTENSITY_LABELS[classes_b.intensities[j]],
                           sent=int(combo_counts[i, j]),
                           coincidences=coincidences,
                           errors=coincidences if wrong else 0)


def recycled_singles(classes_a: DecisionClasses, classes_b: DecisionClasses,
                     meas_basis: str, outcome_counts: np.ndarray,
                     sender: str) -> dict:
    """Estimator inputs from one window's partner-vacuum singles.

    For the chosen sender, every slot where the partner sent the
    near-vacuum intensity and exactly one detector clicked attributes
    the click to the sender's transmitted state.  Only states prepared
    in the measured basis carry alignment information; the wrong-arm
    single for bit 0 is the second arm and vice versa.  Returns
    {state label: (n_wrong, n_total)}.
    """
    if sender not in ("A", "B"):
        raise EngineError(f"sender must be 'A' or 'B', got {sender!r}")
    meas_idx = BASIS_LABELS.index(meas_basis)
    own, partner = (classes_a, classes_b) if sender == "A" else (classes_b,
                                                                 classes_a)
    counts = {}
    for i in range(len(own)):
        if own.intensities[i] == OMEGA_INDEX or own.bases[i] != meas_idx:
            continue
        wrong_class = SINGLE_SECOND if own.bits[i] == 0 else SINGLE_FIRST
        right_class = SINGLE_FIRST if own.bits[i] == 0 else SINGLE_SECOND
        n_wrong = 0
        n_total = 0
        for j in range(len(partner)):
            if partner.intensities[j] != OMEGA_INDEX:
                continue
            cell = (outcome_counts[i, j] if sender == "A"
                    else outcome_counts[j, i])
            n_wrong += int(cell[wrong_class])
            n_total += int(cell[wrong_class] + cell[right_class])
        label = own.state_label(i)
        prev_wrong, prev_total = counts.get(label, (0, 0))
        counts[label] = (prev_wrong + n_wrong, prev_total + n_total)
    return counts


def conservation_counts(classes_a: DecisionClasses,
                        classes_b: DecisionClasses, meas_basis: str,
                        combo_counts: np.ndarray,
                        outcome_counts: np.ndarray) -> dict:
    """Classify every slot exactly once; the classes partition the window.

    key_candidate: both-click, both senders in the measured basis at
      signal intensity (the sifted-key source).
    recycled: single click with exactly one near-vacuum sender whose
      partner prepared in the measured basis (feeds the estimators).
    decoy_coincidence: any other both-click where the senders share a
      basis (feeds the tallies only).
    discarded: everything else, including all no-click slots.
    """
    meas_idx = BASIS_LABELS.index(meas_basis)
    counts = dict.fromkeys(CONSERVATION_CLASSES, 0)
    for i in range(len(classes_a)):
        for j in range(len(classes_b)):
            cell = outcome_counts[i, j]
            total = int(combo_counts[i, j])
            psi = int(cell[PSI_PLUS])
            singles = int(cell[SINGLE_FIRST] + cell[SINGLE_SECOND])
            same_basis = classes_a.bases[i] == classes_b.bases[j]
            both_meas = same_basis and classes_a.bases[i] == meas_idx
            both_mu = (classes_a.intensities[i] == MU_INDEX
                       and classes_b.intensities[j] == MU_INDEX)
            if both_meas and both_mu:
                counts["key_candidate"] += psi
            elif same_basis:
                counts["decoy_coincidence"] += psi
            else:
                counts["discarded"] += psi
            a_omega = classes_a.intensities[i] == OMEGA_INDEX
            b_omega = classes_b.intensities[j] == OMEGA_INDEX
            recyclable = False
            if b_omega and not a_omega and classes_a.bases[i] == meas_idx:
                recyclable = True
            if a_omega and not b_omega and classes_b.bases[j] == meas_idx:
                recyclable = True
            if recyclable:
                counts["recycled"] += singles
            else:
                counts["discarded"] += singles
            counts["discarded"] += total - psi - singles
    return counts
