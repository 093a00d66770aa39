"""Aggregate window-sampling engine: distributions, tallies, accounting."""

import numpy as np
import pytest

from mdiqkd_polcomp import engine
from mdiqkd_polcomp.bsm import DetectorParams, class_probabilities
from mdiqkd_polcomp.decoy import TallySet
from mdiqkd_polcomp.engine import (DecisionClasses, EngineError,
                                   NO_CLICK, PSI_PLUS, SINGLE_FIRST,
                                   SINGLE_SECOND, accumulate_tallies,
                                   conservation_counts, recycled_singles,
                                   sample_window_counts,
                                   window_class_probabilities)
from mdiqkd_polcomp.polarization import rotation_about_stokes_axis
from mdiqkd_polcomp.transmitter import (BASIS_LABELS, INTENSITY_LABELS,
                                        IntensityTable)

TABLE = IntensityTable()
PARAMS = DetectorParams()


def idx(basis: str, bit: int, intensity: str) -> int:
    return (BASIS_LABELS.index(basis) * 6 + bit * 3
            + INTENSITY_LABELS.index(intensity))


def test_decision_classes_layout_and_probabilities():
    classes = DecisionClasses.build(TABLE)
    assert len(classes) == 12
    total = 0.0
    for basis_i, basis in enumerate(BASIS_LABELS):
        for bit in (0, 1):
            for int_i, label in enumerate(INTENSITY_LABELS):
                k = idx(basis, bit, label)
                assert classes.bases[k] == basis_i
                assert classes.bits[k] == bit
                assert classes.intensities[k] == int_i
                expected_p = 0.25 * TABLE.probabilities[int_i]
                assert classes.probabilities[k] == pytest.approx(expected_p)
                assert classes.mean_photons[k] == TABLE.intensities[int_i]
                total += classes.probabilities[k]
    assert total == pytest.approx(1.0)
    assert classes.state_label(idx("Z", 0, "mu")) == "H"
    assert classes.state_label(idx("X", 1, "omega")) == "A"


def test_window_probabilities_match_direct_cell_evaluation():
    classes = DecisionClasses.build(TABLE)
    channel_a = rotation_about_stokes_axis(np.array([0.3, 1.0, -0.2]), 0.21)
    channel_b = rotation_about_stokes_axis(np.array([1.0, 0.1, 0.4]), -0.13)
    grid = window_class_probabilities(classes, classes, channel_a, channel_b,
                                      "X", PARAMS)
    assert grid.shape == (12, 12, 4)
    assert np.allclose(grid.sum(axis=2), 1.0, atol=1e-12)
    rng = np.random.default_rng(5)
    for _ in range(8):
        i, j = rng.integers(0, 12, size=2)
        state_i = channel_a @ classes.states[i]
        state_j = channel_b @ classes.states[j]
        direct = class_probabilities(state_i, classes.mean_photons[i],
                                     state_j, classes.mean_photons[j],
                                     "X", PARAMS)
        assert np.allclose(grid[i, j], direct, atol=1e-14)


def test_sampling_conserves_slots_and_is_deterministic():
    classes = DecisionClasses.build(TABLE)
    identity = np.eye(2, dtype=complex)
    probs = window_class_probabilities(classes, classes, identity, identity,
                                       "Z", PARAMS)
    n_slots = 200_000
    combo, outcomes = sample_window_counts(
        n_slots, classes, classes, probs, np.random.default_rng(42))
    assert combo.sum() == n_slots
    assert np.array_equal(outcomes.sum(axis=2), combo)
    combo2, outcomes2 = sample_window_counts(
        n_slots, classes, classes, probs, np.random.default_rng(42))
    assert np.array_equal(combo, combo2)
    assert np.array_equal(outcomes, outcomes2)


def test_sampled_combo_frequencies_match_decision_probabilities():
    classes = DecisionClasses.build(TABLE)
    identity = np.eye(2, dtype=complex)
    probs = window_class_probabilities(classes, classes, identity, identity,
                                       "Z", PARAMS)
    n_slots = 1_000_000
    combo, _ = sample_window_counts(n_slots, classes, classes, probs,
                                    np.random.default_rng(7))
    joint = np.outer(classes.probabilities, classes.probabilities)
    sigma = np.sqrt(n_slots * joint * (1 - joint))
    pulls = np.abs(combo - n_slots * joint) / np.maximum(sigma, 1.0)
    assert pulls.max() < 5.0


def test_negative_slot_count_rejected():
    classes = DecisionClasses.build(TABLE)
    with pytest.raises(EngineError, match="nonnegative"):
        sample_window_counts(-1, classes, classes,
                             np.zeros((12, 12, 4)), np.random.default_rng(0))


def _single_combo_outcomes(i: int, j: int, psi: int = 0, first: int = 0,
                           second: int = 0, none: int = 0):
    combo = np.zeros((12, 12), dtype=np.int64)
    outcomes = np.zeros((12, 12, 4), dtype=np.int64)
    combo[i, j] = psi + first + second + none
    outcomes[i, j] = [psi, first, second, none]
    return combo, outcomes


def test_tally_error_convention_matched_basis():
    classes = DecisionClasses.build(TABLE)
    tallies = TallySet()
    # Matched basis: anticorrelated bits are correct, equal bits are errors.
    combo, outcomes = _single_combo_outcomes(idx("Z", 0, "mu"),
                                             idx("Z", 1, "mu"), psi=5, none=5)
    accumulate_tallies(tallies, classes, classes, "Z", combo, outcomes)
    cell = tallies.cell("Z", "mu", "mu")
    assert (cell.sent, cell.coincidences, cell.errors) == (10, 5, 0)

    tallies = TallySet()
    combo, outcomes = _single_combo_outcomes(idx("Z", 1, "nu"),
                                             idx("Z", 1, "mu"), psi=4, none=1)
    accumulate_tallies(tallies, classes, classes, "Z", combo, outcomes)
    cell = tallies.cell("Z", "nu", "mu")
    assert (cell.sent, cell.coincidences, cell.errors) == (5, 4, 4)


def test_tally_error_convention_conjugate_basis():
    classes = DecisionClasses.build(TABLE)
    # Z-prepared pairs measured in X: correlated bits are correct.
    tallies = TallySet()
    combo, outcomes = _single_combo_outcomes(idx("Z", 0, "mu"),
                                             idx("Z", 0, "mu"), psi=7)
    accumulate_tallies(tallies, classes, classes, "X", combo, outcomes)
    cell = tallies.cell("Z", "mu", "mu")
    assert (cell.sent, cell.coincidences, cell.errors) == (7, 7, 0)

    tallies = TallySet()
    combo, outcomes = _single_combo_outcomes(idx("Z", 0, "mu"),
                                             idx("Z", 1, "mu"), psi=3)
    accumulate_tallies(tallies, classes, classes, "X", combo, outcomes)
    assert tallies.cell("Z", "mu", "mu").errors == 3


def test_tally_ignores_cross_basis_pairs():
    classes = DecisionClasses.build(TABLE)
    tallies = TallySet()
    combo, outcomes = _single_combo_outcomes(idx("Z", 0, "mu"),
                                             idx("X", 0, "mu"), psi=9)
    accumulate_tallies(tallies, classes, classes, "Z", combo, outcomes)
    for cell in tallies.cells.values():
        assert (cell.sent, cell.coincidences, cell.errors) == (0, 0, 0)


def test_tallies_match_independent_recount_on_sampled_window():
    classes = DecisionClasses.build(TABLE)
    identity = np.eye(2, dtype=complex)
    probs = window_class_probabilities(classes, classes, identity, identity,
                                       "Z", PARAMS)
    combo, outcomes = sample_window_counts(500_000, classes, classes, probs,
                                           np.random.default_rng(11))
    tallies = TallySet()
    accumulate_tallies(tallies, classes, classes, "Z", combo, outcomes)
    # Straight recount over the 144 combos with the correctness rule.
    for basis in BASIS_LABELS:
        for ia in INTENSITY_LABELS:
            for ib in INTENSITY_LABELS:
                sent = coinc = errors = 0
                for bit_a in (0, 1):
                    for bit_b in (0, 1):
                        i, j = idx(basis, bit_a, ia), idx(basis, bit_b, ib)
                        sent += combo[i, j]
                        coinc += outcomes[i, j, PSI_PLUS]
                        wrong = (bit_a == bit_b if basis == "Z"
                                 else bit_a != bit_b)
                        if wrong:
                            errors += outcomes[i, j, PSI_PLUS]
                cell = tallies.cell(basis, ia, ib)
                assert (cell.sent, cell.coincidences, cell.errors) \
                    == (sent, coinc, errors)


def test_recycled_singles_wrong_arm_attribution():
    classes = DecisionClasses.build(TABLE)
    # Sender A transmits H (Z, bit 0) at signal strength while B sends
    # near-vacuum: a second-arm single is a wrong-arm event for H.
    combo, outcomes = _single_combo_outcomes(idx("Z", 0, "mu"),
                                             idx("Z", 0, "omega"),
                                             first=30, second=12, none=100)
    counts = recycled_singles(classes, classes, "Z", outcomes, "A")
    assert counts["H"] == (12, 42)
    assert counts["V"] == (0, 0)
    # For bit 1 (V) the first arm is the wrong one.
    combo, outcomes = _single_combo_outcomes(idx("Z", 1, "nu"),
                                             idx("X", 1, "omega"),
                                             first=4, second=9)
    counts = recycled_singles(classes, classes, "Z", outcomes, "A")
    assert counts["V"] == (4, 13)


def test_recycled_singles_sender_b_uses_transposed_grid():
    classes = DecisionClasses.build(TABLE)
    combo, outcomes = _single_combo_outcomes(idx("X", 0, "omega"),
                                             idx("X", 0, "mu"),
                                             first=21, second=6)
    counts = recycled_singles(classes, classes, "X", outcomes, "B")
    assert counts["D"] == (6, 27)
    # The same grid read as sender A gives nothing: A sent omega.
    counts_a = recycled_singles(classes, classes, "X", outcomes, "A")
    assert counts_a == {"D": (0, 0), "A": (0, 0)}


def test_recycled_singles_excludes_wrong_basis_and_non_vacuum_partner():
    classes = DecisionClasses.build(TABLE)
    # Sender in X while Z is measured: carries no Z-alignment signal.
    combo, outcomes = _single_combo_outcomes(idx("X", 0, "mu"),
                                             idx("Z", 0, "omega"),
                                             first=50, second=50)
    assert recycled_singles(classes, classes, "Z", outcomes, "A") \
        == {"H": (0, 0), "V": (0, 0)}
    # Partner at nu is not a vacuum reference.
    combo, outcomes = _single_combo_outcomes(idx("Z", 0, "mu"),
                                             idx("Z", 0, "nu"),
                                             first=50, second=50)
    assert recycled_singles(classes, classes, "Z", outcomes, "A") \
        == {"H": (0, 0), "V": (0, 0)}


def test_recycled_singles_rejects_unknown_sender():
    classes = DecisionClasses.build(TABLE)
    with pytest.raises(EngineError, match="sender"):
        recycled_singles(classes, classes, "Z",
                         np.zeros((12, 12, 4), dtype=np.int64), "C")


def test_conservation_partitions_every_slot():
    classes = DecisionClasses.build(TABLE)
    identity = np.eye(2, dtype=complex)
    probs = window_class_probabilities(classes, classes, identity, identity,
                                       "X", PARAMS)
    n_slots = 300_000
    combo, outcomes = sample_window_counts(n_slots, classes, classes, probs,
                                           np.random.default_rng(3))
    counts = conservation_counts(classes, classes, "X", combo, outcomes)
    assert set(counts) == set(engine.CONSERVATION_CLASSES)
    assert sum(counts.values()) == n_slots
    # Recycled class equals the sum of both senders' estimator totals.
    total_recycled = 0
    for sender in ("A", "B"):
        for _, n_total in recycled_singles(classes, classes, "X", outcomes,
                                           sender).values():
            total_recycled += n_total
    assert counts["recycled"] == total_recycled


def test_conservation_class_definitions():
    classes = DecisionClasses.build(TABLE)
    # Matched-basis signal-strength coincidence is a key candidate.
    combo, outcomes = _single_combo_outcomes(idx("Z", 0, "mu"),
                                             idx("Z", 1, "mu"),
                                             psi=2, first=3, none=5)
    counts = conservation_counts(classes, classes, "Z", combo, outcomes)
    assert counts["key_candidate"] == 2
    assert counts["recycled"] == 0
    assert counts["discarded"] == 8
    # Same-basis decoy-strength coincidence feeds the tallies only.
    combo, outcomes = _single_combo_outcomes(idx("Z", 0, "nu"),
                                             idx("Z", 1, "mu"), psi=4)
    counts = conservation_counts(classes, classes, "Z", combo, outcomes)
    assert counts["decoy_coincidence"] == 4
    # Mu-mu coincidence in the non-measured basis is not key material.
    combo, outcomes = _single_combo_outcomes(idx("X", 0, "mu"),
                                             idx("X", 1, "mu"), psi=6)
    counts = conservation_counts(classes, classes, "Z", combo, outcomes)
    assert counts["key_candidate"] == 0
    assert counts["decoy_coincidence"] == 6
    # Partner-vacuum singles in the measured basis are recycled.
    combo, outcomes = _single_combo_outcomes(idx("Z", 1, "mu"),
                                             idx("X", 0, "omega"),
                                             first=7, second=2, none=1)
    counts = conservation_counts(classes, classes, "Z", combo, outcomes)
    assert counts["recycled"] == 9
    assert counts["discarded"] == 1
    # Both-vacuum singles carry no reference and are discarded.
    combo, outcomes = _single_combo_outcomes(idx("Z", 1, "omega"),
                                             idx("Z", 0, "omega"),
                                             first=8)
    counts = conservation_counts(classes, classes, "Z", combo, outcomes)
    assert counts["recycled"] == 0
    assert counts["discarded"] == 8


def test_expected_recycled_rate_against_probability_sum():
    """Sampled recycled counts sit within binomial error of the exact rate."""
    classes = DecisionClasses.build(TABLE)
    identity = np.eye(2, dtype=complex)
    probs = window_class_probabilities(classes, classes, identity, identity,
                                       "Z", PARAMS)
    p_recycled = 0.0
    joint = np.outer(classes.probabilities, classes.probabilities)
    for i in range(12):
        for j in range(12):
            singles = probs[i, j, SINGLE_FIRST] + probs[i, j, SINGLE_SECOND]
            a_om = classes.intensities[i] == engine.OMEGA_INDEX
            b_om = classes.intensities[j] == engine.OMEGA_INDEX
            ok = (b_om and not a_om and classes.bases[i] == 0) or \
                 (a_om and not b_om and classes.bases[j] == 0)
            if ok:
                p_recycled += joint[i, j] * singles
    n_slots = 2_000_000
    combo, outcomes = sample_window_counts(n_slots, classes, classes, probs,
                                           np.random.default_rng(17))
    counts = conservation_counts(classes, classes, "Z", combo, outcomes)
    expected = n_slots * p_recycled
    sigma = np.sqrt(expected)
    assert abs(counts["recycled"] - expected) < 5.0 * sigma
