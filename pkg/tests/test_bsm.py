"""Measurement-node checks against quadrature and closed-form oracles."""

import math

import numpy as np
import pytest
from scipy import integrate

from mdiqkd_polcomp import bsm
from mdiqkd_polcomp import polarization as pol
from mdiqkd_polcomp.transmitter import CoherentPulse


def make_pulse(label, mean_photons, phase=0.0):
    return CoherentPulse(jones=pol.JONES_STATES[label],
                         mean_photons=mean_photons, phase=phase)


def test_detector_params_validation():
    with pytest.raises(bsm.BsmError):
        bsm.DetectorParams(efficiency=0.0)
    with pytest.raises(bsm.BsmError):
        bsm.DetectorParams(efficiency=1.5)
    with pytest.raises(bsm.BsmError):
        bsm.DetectorParams(dark_prob=1.0)


def test_mode_intensities_single_sender():
    mu = 0.28
    monitored = bsm.mode_intensities(make_pulse("H", mu), make_pulse("H", 0.0),
                                     "Z", phase=0.3)
    assert monitored[0] == pytest.approx(mu / 2.0, abs=1e-15)
    assert monitored[1] == pytest.approx(0.0, abs=1e-15)


def test_mode_intensities_destructive_interference():
    mu = 0.28
    monitored = bsm.mode_intensities(make_pulse("H", mu), make_pulse("H", mu),
                                     "Z", phase=math.pi)
    assert np.allclose(monitored, [0.0, 0.0], atol=1e-15)
    # The discarded port receives everything.
    _, discarded = bsm.output_intensities(pol.STATE_H, mu, pol.STATE_H, mu,
                                          "Z", math.pi)
    assert discarded[0] == pytest.approx(2.0 * mu, abs=1e-12)


def test_energy_conservation_over_output_modes():
    rng = np.random.default_rng(21)
    for _ in range(50):
        state_a = pol.rotation_about_stokes_axis(rng.normal(size=3),
                                                 rng.uniform(0, math.pi)) @ pol.STATE_H
        state_b = pol.rotation_about_stokes_axis(rng.normal(size=3),
                                                 rng.uniform(0, math.pi)) @ pol.STATE_V
        mu_a, mu_b = rng.uniform(0.0, 0.5, size=2)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        basis = "Z" if rng.random() < 0.5 else "X"
        monitored, discarded = bsm.output_intensities(state_a, mu_a,
                                                      state_b, mu_b,
                                                      basis, phase)
        total = float(np.sum(monitored) + np.sum(discarded))
        assert total == pytest.approx(mu_a + mu_b, abs=1e-12)


def test_click_probability_monotone_and_bounded():
    params = bsm.DetectorParams(efficiency=0.1, dark_prob=1e-4)
    intensities = np.linspace(0.0, 5.0, 200)
    probs = bsm.click_probabilities(intensities, params)
    assert np.all(np.diff(probs) > 0)
    assert probs[0] == pytest.approx(1e-4)
    assert np.all(probs < 1.0)
    stronger = bsm.click_probabilities(intensities, bsm.DetectorParams(0.2, 1e-4))
    assert np.all(stronger[1:] > probs[1:])
    with pytest.raises(bsm.BsmError):
        bsm.click_probabilities(np.array([-0.1]), params)


def test_classify_all_cases():
    assert bsm.classify(True, True) == bsm.OUTCOME_PSI_PLUS
    assert bsm.classify(True, False) == bsm.OUTCOME_SINGLE_FIRST
    assert bsm.classify(False, True) == bsm.OUTCOME_SINGLE_SECOND
    assert bsm.classify(False, False) == bsm.OUTCOME_NO_CLICK


def test_sample_outcome_matches_closed_form():
    # Unit intensity in both arms with eta = 1 and no dark clicks gives a
    # joint-click probability of (1 - e^{-1})^2.
    params = bsm.DetectorParams(efficiency=1.0, dark_prob=0.0)
    rng = np.random.default_rng(99)
    n = 20_000
    hits = sum(bsm.sample_outcome(np.array([1.0, 1.0]), params, rng).outcome
               == bsm.OUTCOME_PSI_PLUS for _ in range(n))
    expected = (1.0 - math.exp(-1.0)) ** 2
    sigma = math.sqrt(expected * (1.0 - expected) / n)
    assert abs(hits / n - expected) < 3.0 * sigma


def test_dark_only_coincidences():
    params = bsm.DetectorParams(efficiency=0.1, dark_prob=1e-3)
    probs = bsm.class_probabilities(pol.STATE_H, 0.0, pol.STATE_H, 0.0,
                                    "Z", params)
    assert probs[0] == pytest.approx(1e-6, rel=1e-9)
    assert np.sum(probs) == pytest.approx(1.0, abs=1e-12)


def test_phase_average_matches_quadrature_oracle():
    params = bsm.DetectorParams(efficiency=0.055, dark_prob=2e-6)
    jones_a, mu_a = pol.STATE_H, 0.28
    jones_b, mu_b = pol.STATE_D, 0.07

    def coincidence(phi):
        monitored, _ = bsm.output_intensities(jones_a, mu_a, jones_b, mu_b,
                                              "Z", phi)
        p = 1.0 - (1.0 - params.dark_prob) * np.exp(-params.efficiency * monitored)
        return p[0] * p[1]

    oracle, _ = integrate.quad(coincidence, 0.0, 2.0 * math.pi, epsabs=1e-16)
    oracle /= 2.0 * math.pi
    probs = bsm.class_probabilities(jones_a, mu_a, jones_b, mu_b, "Z", params)
    assert probs[0] == pytest.approx(oracle, rel=1e-10)


def test_grid_probabilities_sum_to_one():
    params = bsm.DetectorParams()
    states = np.stack([pol.JONES_STATES[k] for k in ("H", "V", "D", "A")])
    mus = np.array([0.28, 0.07, 0.001, 0.28])
    grid = bsm.class_probability_grid(states, mus, states, mus, "X", params)
    assert np.allclose(grid.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(grid >= 0.0)


def test_signal_gain_near_target_and_low_error():
    # Anticorrelated same-basis signal pairs dominate the gain; the
    # detector defaults are calibrated so the Z-window signal gain sits
    # at 3.0e-5.
    params = bsm.DetectorParams()
    gain, qber = bsm.pair_gain_and_qber("Z", "Z", 0.28, 0.28, params)
    assert gain == pytest.approx(3.0e-5, rel=1e-4)
    assert qber < 2e-3
    # Symmetric situation in the X window.
    gain_x, qber_x = bsm.pair_gain_and_qber("X", "X", 0.28, 0.28, params)
    assert gain_x == pytest.approx(gain, rel=1e-6)
    assert qber_x == pytest.approx(qber, rel=1e-6)


def test_conjugate_basis_qber_bracket():
    # Multiphoton contributions pin the conjugate-basis signal error rate
    # just above 1/4.
    params = bsm.DetectorParams()
    _, qber = bsm.pair_gain_and_qber("X", "Z", 0.28, 0.28, params)
    assert 0.25 <= qber <= 0.31
    _, mirrored = bsm.pair_gain_and_qber("Z", "X", 0.28, 0.28, params)
    assert mirrored == pytest.approx(qber, rel=1e-6)


def test_vacuum_pair_gain_negligible():
    params = bsm.DetectorParams()
    gain, _ = bsm.pair_gain_and_qber("Z", "Z", 0.001, 0.001, params)
    assert gain < 1e-9


def test_misaligned_channel_raises_qber():
    params = bsm.DetectorParams()
    tilt = pol.rotation_about_stokes_axis([0.0, 1.0, 0.0], 2 * 0.2)
    _, qber_aligned = bsm.pair_gain_and_qber("Z", "Z", 0.28, 0.28, params)
    _, qber_tilted = bsm.pair_gain_and_qber("Z", "Z", 0.28, 0.28, params,
                                            channel_a=tilt)
    assert qber_tilted > qber_aligned + 0.01
    # Error grows like 2 sin(theta)^2 for one misaligned sender.
    assert qber_tilted == pytest.approx(2.0 * math.sin(0.2) ** 2, rel=0.15)


def test_monte_carlo_agrees_with_analytic():
    params = bsm.DetectorParams()
    rng = np.random.default_rng(7)
    n = 400_000
    gain_mc, n_ok, n_bad = bsm.monte_carlo_pair("Z", "Z", 0.28, 0.28, params,
                                                n, rng)
    gain, _ = bsm.pair_gain_and_qber("Z", "Z", 0.28, 0.28, params)
    sigma = math.sqrt(gain * (1.0 - gain) / n)
    assert abs(gain_mc - gain) < 3.0 * sigma
    assert n_ok + n_bad == pytest.approx(gain_mc * n)


def test_basis_schedule():
    schedule = bsm.BasisSchedule(period=15.0)
    assert schedule.basis_at(0.0) == "Z"
    assert schedule.basis_at(14.999) == "Z"
    assert schedule.basis_at(15.0) == "X"
    # floor(100 / 15) = 6, an even window index, so the basis is Z.
    assert schedule.basis_at(100.0) == "Z"
    assert schedule.n_windows(4 * 3600.0) == 960
    bases = [schedule.window_basis(k) for k in range(960)]
    assert bases.count("Z") == 480
    assert bases.count("X") == 480
    with pytest.raises(bsm.BsmError):
        bsm.BasisSchedule(period=0.0)
    with pytest.raises(bsm.BsmError):
        schedule.basis_at(-1.0)
