"""Topology stage: filtering identity, estimators, range search."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from swarmtopo.network import build_perron, random_network
from swarmtopo.simulate import ObserverConfig, run_scenario
from swarmtopo.steady import exact_pattern
from swarmtopo.topology import (
    TopologyEstimator,
    average_observer_distances,
    average_pairwise_distances,
    build_filtered,
    conservative_sets,
    constrained_estimate,
    empirical_bias_fn,
    estimate_bias_floor,
    observable_interior,
    ols_estimate,
    rowwise_estimate,
    search_rc,
    true_block,
    truncated_estimate,
)

from conftest import chain_network


def full_view_trace(spec, horizon=60, seed=0, sigma=0.0, jitter=0.4):
    return run_scenario(
        spec,
        None,
        horizon,
        seed=seed,
        observer=ObserverConfig(noise_sigma=sigma, observation_range=1e3),
        launch_offset=(-1.0, 0.5),
        launch_jitter=jitter,
    )


# ---------------------------------------------------------------------------
# filtering identity


def test_filtered_relation_is_exact_with_commanded_offsets():
    # nonzero drift bends the steady offsets away from the commanded shape,
    # yet the regression built on the commanded shape must be exact
    spec = chain_network(n=5, weight=0.8, control_period=0.4, speed=(0.25, 0.1))
    trace = full_view_trace(spec, horizon=40, seed=1)
    pattern = exact_pattern(spec)
    filtered = build_filtered(trace.readings, pattern, pattern.members, k_steady=30)
    w = build_perron(spec)
    residual = filtered.y - w @ filtered.x
    assert np.max(np.abs(residual)) < 1e-10


def test_filtered_relation_with_steady_offsets_carries_drift_residual():
    # plugging the *steady* offsets in instead leaves a constant per-column
    # residual proportional to the drift
    spec = chain_network(n=5, weight=0.8, control_period=0.4, speed=(0.25, 0.0))
    trace = full_view_trace(spec, horizon=40, seed=2)
    pattern = exact_pattern(spec)
    lagged = replace(pattern, h_hat=pattern.s_hat.copy())
    filtered = build_filtered(trace.readings, lagged, pattern.members, k_steady=30)
    w = build_perron(spec)
    residual = filtered.y - w @ filtered.x
    assert np.max(np.abs(residual)) > 1e-4
    # constant across the columns of each dimension block
    k_s = filtered.k_steady
    for block in (residual[:, :k_s], residual[:, k_s:]):
        assert np.max(np.ptp(block, axis=1)) < 1e-10


def test_build_filtered_preconditions():
    spec = chain_network(n=4)
    trace = full_view_trace(spec, horizon=30, seed=3)
    pattern = exact_pattern(spec)
    with pytest.raises(ValueError, match="pre-steady"):
        build_filtered(trace.readings, pattern, pattern.members, k_steady=3)
    readings = trace.readings.copy()
    readings[2, 1] = np.nan
    with pytest.raises(ValueError, match="missing"):
        build_filtered(readings, pattern, pattern.members, k_steady=10)


# ---------------------------------------------------------------------------
# estimators


def test_ols_recovers_full_matrix_exactly():
    for seed in (0, 1, 2):
        spec = random_network(n=6, seed=seed)
        trace = full_view_trace(spec, horizon=30, seed=seed + 10)
        pattern = exact_pattern(spec)
        filtered = build_filtered(
            trace.readings, pattern, pattern.members, k_steady=spec.n + 1
        )
        w_hat, cond = ols_estimate(filtered.x, filtered.y)
        assert cond < 1e8
        assert np.max(np.abs(w_hat - build_perron(spec))) < 1e-9


def test_ols_refuses_ill_conditioned_regressors():
    x = np.ones((3, 10))  # rank one
    y = np.zeros((3, 10))
    with pytest.raises(ValueError, match="condition"):
        ols_estimate(x, y)


def test_ols_refuses_underdetermined_fit():
    with pytest.raises(ValueError, match="underdetermined"):
        ols_estimate(np.ones((5, 3)), np.ones((2, 3)))


def test_truncated_baseline_is_biased_on_partial_observation():
    # observe only the chain's tail; its first observed robot keeps hearing
    # an unobserved one, which the naive baseline cannot represent
    spec = chain_network(n=4, weight=0.5, control_period=0.5, speed=(0.2, 0.0))
    trace = run_scenario(
        spec,
        None,
        60,
        seed=4,
        observer=ObserverConfig(
            noise_sigma=0.0,
            observation_range=1.8,
            start=(-5.0, 0.0),
            # the tracker sits 1 m from the tail pair on purpose; leave the
            # keep-away reflex off so it holds that post
            keep_distance_factor=0.0,
        ),
        launch_jitter=0.05,
    )
    assert trace.visible[:, 2:].all() and not trace.visible[:, :2].any()
    pattern = replace(exact_pattern(spec), members=np.array([2, 3]))
    filtered = build_filtered(trace.readings, pattern, np.array([2, 3]), k_steady=20)
    w_naive, _ = truncated_estimate(filtered.x, filtered.y)
    truth_ff = true_block(spec, [2, 3], [2, 3])
    assert np.linalg.norm(w_naive - truth_ff) > 1e-2

    # the interior row (robot 3 hears only robot 2) stays exact
    interior = build_filtered(trace.readings, pattern, np.array([3]), k_steady=20)
    w_int, _ = ols_estimate(interior.x, interior.y)
    assert np.max(np.abs(w_int - true_block(spec, [3], [2, 3]))) < 1e-9


def test_constrained_estimate_zeroes_far_pairs_and_recovers_truth():
    # nonzero speed keeps the leader column identifiable (a parked leader
    # contributes an all-zero regressor row and its self-weight is lost)
    spec = chain_network(n=5, weight=0.6, control_period=0.5, speed=(0.1, 0.0))
    trace = full_view_trace(spec, horizon=40, seed=5)
    pattern = exact_pattern(spec)
    filtered = build_filtered(trace.readings, pattern, pattern.members, k_steady=20)
    pairwise = average_pairwise_distances(trace.readings, 10)
    # chain spacing is 2 m plus a 0.17 m drift lag; 2.5 m keeps exactly neighbors
    w = constrained_estimate(filtered, 2.5, pairwise)
    assert np.max(np.abs(w - build_perron(spec))) < 1e-9
    # far entries are structurally zero, not merely small
    assert w[0, 3] == 0.0 and w[4, 0] == 0.0


def test_constrained_estimate_with_tight_radius_breaks_cut_rows():
    spec = chain_network(n=4, weight=0.6, control_period=0.5)
    trace = full_view_trace(spec, horizon=40, seed=6)
    pattern = exact_pattern(spec)
    filtered = build_filtered(trace.readings, pattern, pattern.members, k_steady=20)
    pairwise = average_pairwise_distances(trace.readings, 10)
    w = constrained_estimate(filtered, 1.0, pairwise)  # cuts every true edge
    truth = build_perron(spec)
    assert np.linalg.norm(w - truth) > 0.1


def test_rowwise_equals_joint_ols_with_full_windows():
    for seed in range(6):
        spec = random_network(n=5, seed=40 + seed)
        trace = full_view_trace(spec, horizon=30, seed=seed)
        pattern = exact_pattern(spec)
        filtered = build_filtered(trace.readings, pattern, pattern.members, k_steady=12)
        w_joint, _ = ols_estimate(filtered.x, filtered.y)
        rw = rowwise_estimate(
            trace.readings, pattern, None, pattern.members, k_steady=12
        )
        assert rw.resolved.all()
        assert np.max(np.abs(rw.w_hat - w_joint)) < 1e-9


def test_rowwise_flags_unresolvable_rows():
    spec = chain_network(n=4, weight=0.5, control_period=0.5)
    trace = full_view_trace(spec, horizon=30, seed=7)
    pattern = exact_pattern(spec)
    k_f = np.array([0, 0, 10, 0])  # robot 2 appears too late for k_steady=12
    rw = rowwise_estimate(
        trace.readings, pattern, None, pattern.members, k_steady=12, k_f=k_f
    )
    row2 = int(np.flatnonzero(rw.index_h == 2)[0])
    assert not rw.resolved[row2]
    assert np.all(np.isnan(rw.w_hat[row2]))
    assert rw.resolved[[0, 1, 3]].all() if rw.index_h.size == 4 else True


def test_estimator_wrapper_params_and_fit():
    spec = chain_network(n=4, weight=0.5, control_period=0.5)
    trace = full_view_trace(spec, horizon=30, seed=8)
    pattern = exact_pattern(spec)
    filtered = build_filtered(trace.readings, pattern, pattern.members, k_steady=12)
    est = TopologyEstimator(method="ols")
    assert est.get_params()["method"] == "ols"
    est.fit(filtered)
    assert np.max(np.abs(est.w_hat_ - build_perron(spec))) < 1e-9
    pred = est.predict(filtered.x)
    assert np.max(np.abs(pred - filtered.y)) < 1e-9


# ---------------------------------------------------------------------------
# visibility sets and distances


def test_distance_helpers_match_hand_computation():
    readings = np.zeros((4, 2, 2))
    readings[:, 0] = [0.0, 0.0]
    readings[:, 1] = [3.0, 4.0]
    observer = np.tile([0.0, -1.0], (4, 1))
    d_obs = average_observer_distances(readings, observer, window_len=2)
    assert d_obs[0] == pytest.approx(1.0)
    assert d_obs[1] == pytest.approx(np.hypot(3.0, 5.0))
    pairwise = average_pairwise_distances(readings, window_len=3)
    assert pairwise[0, 1] == pytest.approx(5.0)
    assert pairwise[1, 0] == pytest.approx(5.0)
    assert pairwise[0, 0] == 0.0


def test_observable_interior_thresholds():
    distances = np.array([1.0, 3.9, 4.1, 8.0])
    members = np.arange(4)
    inside = observable_interior(distances, members, observation_range=9.0, rc_hat=5.0)
    assert inside.tolist() == [0, 1]


def test_conservative_sets_and_empty_error():
    distances = np.array([2.0, 3.0, 6.0])
    members = np.arange(3)
    v_h0, v_f0 = conservative_sets(distances, members, 9.0, rc_upper=5.5, rc_hat=4.0)
    assert v_h0.tolist() == [0, 1]
    assert v_f0.tolist() == [0, 1, 2]
    with pytest.raises(ValueError, match="safely observable"):
        conservative_sets(distances, members, 9.0, rc_upper=9.0, rc_hat=4.0)


# ---------------------------------------------------------------------------
# range search


def brute_force_search(lb, ub, eps_w, n_w, fn, min_width=0.05, streak=0):
    """The search contract written as a recursion, for cross-checking."""
    if streak >= n_w or (ub - lb) <= min_width:
        return lb, ub
    mid = 0.5 * (lb + ub)
    if fn(mid) > eps_w:
        return brute_force_search(mid, ub, eps_w, n_w, fn, min_width, 0)
    return brute_force_search(lb, mid, eps_w, n_w, fn, min_width, streak + 1)


def test_search_rc_flat_zero_bias_frozen_value():
    est = search_rc(1.0, 9.0, eps_w=0.01, n_w=3, bias_fn=lambda rc: 0.0)
    assert est.rc_hat == pytest.approx(1.0 + 8.0 / 2**3)
    lb, ub = brute_force_search(1.0, 9.0, 0.01, 3, lambda rc: 0.0)
    assert est.rc_hat == pytest.approx(ub)
    assert est.rc_lb == pytest.approx(lb)


def test_search_rc_never_returns_below_a_cliff():
    # a step-shaped bias: zero above the cliff, large below it
    for cliff in (2.31, 4.0, 4.97, 6.5):
        fn = lambda rc: 0.0 if rc >= cliff else 1.0
        est = search_rc(1.0, 9.0, eps_w=0.05, n_w=4, bias_fn=fn)
        assert est.rc_hat >= cliff - 1e-12
        assert est.rc_hat <= cliff + (9.0 - 1.0) / 2**2  # within coarse resolution
        lb, ub = brute_force_search(1.0, 9.0, 0.05, 4, fn)
        assert est.rc_hat == pytest.approx(ub)


def test_search_rc_respects_min_width_guard():
    est = search_rc(4.0, 4.2, eps_w=0.05, n_w=50, bias_fn=lambda rc: 0.0)
    assert est.rc_ub - est.rc_lb <= 0.1
    assert est.rc_hat == est.rc_ub


def test_search_rc_rejects_empty_interval():
    with pytest.raises(ValueError, match="interval"):
        search_rc(5.0, 5.0, 0.01, 3, lambda rc: 0.0)


def test_empirical_bias_zero_when_no_robot_is_dropped():
    spec = chain_network(n=5, weight=0.6, control_period=0.5, speed=(0.1, 0.0))
    trace = run_scenario(
        spec,
        None,
        40,
        seed=9,
        observer=ObserverConfig(noise_sigma=0.0, observation_range=1e3, start=(2.0, 0.0)),
        launch_jitter=0.3,
    )
    pattern = exact_pattern(spec)
    filtered = build_filtered(trace.readings, pattern, pattern.members, k_steady=15)
    d_obs = average_observer_distances(trace.readings, trace.observer, 5)
    fn = empirical_bias_fn(filtered, d_obs, observation_range=1e3, rc_upper=20.0)
    # shrinking the candidate range without changing the admitted set is free
    assert fn(19.0) == pytest.approx(0.0, abs=1e-12)


def test_bias_floor_positive_under_noise():
    spec = chain_network(n=5, weight=0.6, control_period=0.5)
    trace = full_view_trace(spec, horizon=80, seed=10, sigma=0.05)
    pattern = exact_pattern(spec)
    filtered = build_filtered(trace.readings, pattern, pattern.members, k_steady=40)
    d_obs = average_observer_distances(trace.readings, trace.observer, 10)
    floor = estimate_bias_floor(filtered, d_obs, observation_range=1e3, rc_upper=20.0, seed=3)
    assert floor > 0
    assert np.isfinite(floor)
