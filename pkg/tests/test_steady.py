"""Steady-pattern stage: window estimates, steady-time scan, leader pick."""

from __future__ import annotations

import numpy as np
import pytest

from swarmtopo.network import random_network
from swarmtopo.simulate import ObserverConfig, run_scenario
from swarmtopo.steady import (
    SteadyPatternEstimator,
    default_epsilon,
    detect_steady_time,
    determine_constant_subset,
    estimate_steady_window,
    exact_pattern,
    finalize_pattern,
    identify_leader,
)

from conftest import chain_network, steady_track


def brute_force_speed(obs: np.ndarray, k: int, window_len: int) -> np.ndarray:
    """Windowed speed written exactly as its definition: a double sum."""
    n = obs.shape[1]
    total = np.zeros(2)
    for t in range(k, k + window_len):
        for i in range(n):
            total += obs[t + 1, i] - obs[t, i]
    return total / (n * window_len)


def test_window_speed_matches_brute_force():
    rng = np.random.default_rng(0)
    c = np.array([0.1, -0.05])
    offsets = rng.normal(size=(5, 2))
    noise = 0.1 * rng.standard_normal((40, 5, 2))
    obs = steady_track(5, c, offsets, 40, noise)
    for k in (0, 3, 17):
        c_hat, _ = estimate_steady_window(obs, k, 12)
        assert np.allclose(c_hat, brute_force_speed(obs, k, 12), atol=1e-12)


def test_window_speed_error_telescopes_to_endpoint_noise():
    # the speed estimate's deviation from truth must equal the mean endpoint
    # noise difference divided by the window length, exactly
    rng = np.random.default_rng(1)
    c = np.array([0.2, 0.0])
    offsets = rng.normal(size=(6, 2))
    noise = 0.05 * rng.standard_normal((61, 6, 2))
    obs = steady_track(6, c, offsets, 61, noise)
    k, window_len = 7, 40
    c_hat, _ = estimate_steady_window(obs, k, window_len)
    expected_err = (noise[k + window_len] - noise[k]).mean(axis=0) / window_len
    assert np.allclose(c_hat - c, expected_err, atol=1e-13)


def test_window_recovers_exact_steady_pattern():
    c = np.array([0.03, 0.01])
    offsets = np.array([[0.0, 0.0], [1.5, -2.0], [-1.0, 0.5]])
    obs = steady_track(3, c, offsets, 50)
    c_hat, s_hat = estimate_steady_window(obs, 5, 30)
    assert np.allclose(c_hat, c, atol=1e-12)
    assert np.allclose(s_hat, offsets, atol=1e-12)


def test_window_rejects_missing_observations():
    obs = steady_track(3, np.zeros(2), np.zeros((3, 2)), 30)
    obs[10, 1] = np.nan
    with pytest.raises(ValueError, match="missing"):
        estimate_steady_window(obs, 5, 10)


def test_constant_subset_entry_steps():
    visible = np.ones((10, 3), dtype=bool)
    visible[:4, 1] = False  # enters at 4
    visible[7, 2] = False  # drops out mid-trace, re-enters at 8
    members, k_f = determine_constant_subset(visible)
    assert members.tolist() == [0, 1, 2]
    assert k_f.tolist() == [0, 4, 8]
    visible[-1, 0] = False  # not visible at the end: not a member
    members2, k_f2 = determine_constant_subset(visible)
    assert members2.tolist() == [1, 2]
    assert k_f2[0] == -1


def test_steady_time_matches_brute_force_scan():
    # coherent decaying transient on top of a steady track
    rng = np.random.default_rng(2)
    c = np.array([0.05, 0.0])
    offsets = rng.normal(size=(4, 2))
    frames, window_len = 140, 40
    obs = steady_track(4, c, offsets, frames)
    decay = 0.9 ** np.arange(frames)
    obs += 6.0 * np.multiply.outer(decay, np.ones((4, 2)))
    eps = 0.01

    detection = detect_steady_time(obs, window_len, eps)

    series = np.stack(
        [brute_force_speed(obs, k, window_len) for k in range(frames - window_len)]
    )
    benchmark = series[frames - 1 - window_len]
    thr = 8 * eps / np.sqrt(window_len)
    qualifying = [
        k
        for k in range(frames - window_len)
        if np.all(np.abs(series[k] - benchmark) <= thr)
    ]
    assert detection.k_steady == qualifying[0]
    assert detection.k_steady > 0
    assert np.allclose(detection.c_benchmark, benchmark, atol=1e-12)
    assert np.allclose(detection.speed_series, series, atol=1e-12)


def test_steady_time_requires_two_windows():
    obs = steady_track(3, np.zeros(2), np.zeros((3, 2)), 30)
    with pytest.raises(ValueError, match="too short"):
        detect_steady_time(obs, 20, 0.01)


def test_accelerating_track_only_matches_the_benchmark_window():
    # an accelerating track never truly settles; the scan can only match at
    # the benchmark window itself, which is the latest possible answer
    frames, window_len = 120, 30
    steps = np.arange(frames, dtype=float)
    track = 0.01 * steps[:, None] ** 2
    obs = np.tile(track[:, None, :], (1, 3, 1)) * np.array([1.0, 0.0])
    obs = obs + np.zeros((frames, 3, 2))
    detection = detect_steady_time(obs, window_len, 1e-4)
    assert detection.k_steady == frames - 1 - window_len


def test_finalize_pattern_reference_is_lowest_member():
    c = np.array([0.02, 0.0])
    offsets = np.array([[0.5, 1.0], [2.0, -1.0], [3.5, 0.25], [9.9, 9.9]])
    obs = steady_track(4, c, offsets, 80)
    obs[:, 3] = np.nan  # robot 3 never visible
    members = np.array([0, 1, 2])
    pattern = finalize_pattern(obs, 10, 79, members, epsilon=0.01)
    assert pattern.reference == 0
    assert np.allclose(pattern.h_hat[0], 0.0, atol=1e-12)
    assert np.allclose(pattern.h_hat[1], offsets[1] - offsets[0], atol=1e-12)
    assert np.all(np.isnan(pattern.h_hat[3]))
    assert pattern.window_len == 69


def test_identify_leader_basic_and_tie_break():
    c = np.array([0.05, 0.0])
    frames, k_s = 90, 30
    steps = np.arange(frames, dtype=float)
    obs = np.zeros((frames, 3, 2))
    # robots 0 and 1 move exactly at c from the start; robot 2 converges late
    for i in (0, 1):
        obs[:, i, 0] = i * 2.0 + c[0] * steps
    obs[:, 2, 0] = 4.0 + c[0] * steps + 5.0 * 0.85 ** steps
    leader, scores = identify_leader(obs, k_s, c, window_len=40, epsilon=0.01, members=np.arange(3))
    assert leader == 0  # tie between 0 and 1 goes to the lowest id
    assert scores[0] == pytest.approx(0.0, abs=1e-12)
    assert scores[2] > 8 * 0.01 / np.sqrt(40)


def test_identify_leader_requires_both_dimensions():
    c = np.array([0.05, 0.02])
    frames, k_s = 80, 25
    steps = np.arange(frames, dtype=float)
    obs = np.zeros((frames, 2, 2))
    # robot 0 matches the x speed but drifts in y early on
    obs[:, 0, 0] = c[0] * steps
    obs[:, 0, 1] = c[1] * steps + 3.0 * 0.8 ** steps
    obs[:, 1] = np.stack([c[0] * steps + 1.0, c[1] * steps - 2.0], axis=1)
    leader, _ = identify_leader(obs, k_s, c, window_len=40, epsilon=0.005, members=np.arange(2))
    assert leader == 1


def test_identify_leader_absence_is_valid():
    c = np.array([0.05, 0.0])
    frames, k_s = 80, 25
    steps = np.arange(frames, dtype=float)
    obs = np.zeros((frames, 2, 2))
    for i in range(2):
        obs[:, i, 0] = c[0] * steps + 4.0 * 0.8 ** steps  # everyone converges late
    leader, _ = identify_leader(obs, k_s, c, window_len=40, epsilon=0.001, members=np.arange(2))
    assert leader is None


def test_default_epsilon_rule():
    assert default_epsilon(0.1) == pytest.approx(0.08)
    assert default_epsilon(0.0) == pytest.approx(1e-6)


def test_estimator_end_to_end_on_simulated_launch():
    spec = chain_network(n=5, weight=0.4, control_period=0.5, speed=(0.12, 0.0))
    sigma = 0.05
    window_len = 120
    trace = run_scenario(
        spec,
        None,
        700,
        seed=42,
        observer=ObserverConfig(noise_sigma=sigma, observation_range=60.0),
        launch_offset=(-14.0, 6.0),
        launch_jitter=0.2,
    )
    est = SteadyPatternEstimator(window_len=window_len, sigma=sigma)
    est.fit(trace.readings)
    pattern = est.pattern_
    exact = exact_pattern(spec)

    assert est.k_steady_ > 0
    assert pattern.leader == spec.leader
    # collective speed within the windowed-mean bound
    bound = 4 * default_epsilon(sigma) / np.sqrt(window_len)
    assert np.all(np.abs(pattern.c_hat - exact.c_hat) <= bound)
    # offset differences track the true steady offsets (which include lag)
    for i in range(1, spec.n):
        est_rel = pattern.h_hat[i] - pattern.h_hat[0]
        true_rel = exact.s_hat[i] - exact.s_hat[0]
        assert np.allclose(est_rel, true_rel, atol=5 * sigma)
