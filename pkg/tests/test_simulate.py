"""World stepping, observation frames, determinism, trace persistence."""

from __future__ import annotations

import numpy as np
import pytest

from swarmtopo.network import build_perron, formation_input, random_network
from swarmtopo.simulate import (
    ObserverConfig,
    Simulation,
    WorldState,
    load_trace,
    observe,
    obstacle_response,
    run_scenario,
    save_trace,
    step_formation,
    trace_to_csv,
)
from swarmtopo.steady import exact_pattern

from conftest import chain_network


def test_step_formation_is_exact_linear_update(chain4):
    w = build_perron(chain4)
    u = formation_input(chain4, w)
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 2))
    world = WorldState(k=3, positions=z.copy(), observer=np.zeros(2))
    nxt = step_formation(world, w, u)
    assert nxt.k == 4
    assert np.allclose(nxt.positions, w @ z + u, atol=1e-14)


def test_step_formation_applies_pushes_to_named_robots(chain4):
    w = build_perron(chain4)
    u = formation_input(chain4, w)
    world = WorldState(k=0, positions=chain4.shape.copy(), observer=np.zeros(2))
    push = np.array([0.05, -0.02])
    with_push = step_formation(world, w, u, {2: push})
    without = step_formation(world, w, u)
    delta = with_push.positions - without.positions
    assert np.allclose(delta[2], push)
    delta[2] = 0
    assert np.allclose(delta, 0)


def test_obstacle_response_profile(chain4):
    target = np.array([1.0, 0.0])
    # outside the range: nothing
    assert np.allclose(obstacle_response(chain4, target, np.array([3.0, 0.0])), 0)
    # at half range: gain * (2 - 1) = gain, directed away from the obstacle
    half = np.array([1.0 - chain4.obstacle_range / 2, 0.0])
    push = obstacle_response(chain4, target, half)
    assert push[1] == 0
    assert push[0] == pytest.approx(0.1)
    # very close: capped
    near = target - np.array([1e-4, 0.0])
    assert np.linalg.norm(obstacle_response(chain4, target, near)) == pytest.approx(0.2)


def test_observe_masks_and_noise(chain4):
    world = WorldState(k=0, positions=chain4.shape.copy(), observer=np.array([0.0, 0.0]))
    rng = np.random.default_rng(1)
    frame = observe(world, chain4, observation_range=3.0, sigma=0.0, rng=rng)
    # robots sit at x = 0, -2, -4, -6: only the first two are within 3 m
    assert frame.visible.tolist() == [True, True, False, False]
    assert np.allclose(frame.readings[:2], chain4.shape[:2])
    assert np.all(np.isnan(frame.readings[2:]))


def test_noise_stream_does_not_depend_on_visibility(chain4):
    # same seed, different observation radius: common robots read identically
    t1 = run_scenario(chain4, None, 40, seed=7, observer=ObserverConfig(observation_range=3.0, noise_sigma=0.1))
    t2 = run_scenario(chain4, None, 40, seed=7, observer=ObserverConfig(observation_range=30.0, noise_sigma=0.1))
    both = t1.visible & t2.visible
    assert both.any()
    assert np.array_equal(t1.readings[both], t2.readings[both])


def test_run_scenario_rejects_bad_horizon(chain4):
    with pytest.raises(ValueError, match="horizon"):
        run_scenario(chain4, None, 0, seed=0)


def test_run_scenario_is_deterministic(chain4):
    a = run_scenario(chain4, None, 60, seed=123)
    b = run_scenario(chain4, None, 60, seed=123)
    assert np.array_equal(a.true_positions, b.true_positions)
    assert np.array_equal(a.readings, b.readings, equal_nan=True)
    assert np.array_equal(a.observer, b.observer)
    c = run_scenario(chain4, None, 60, seed=124)
    assert not np.array_equal(a.readings, c.readings, equal_nan=True)


def test_simulation_continues_seamlessly(chain4):
    cfg = ObserverConfig(noise_sigma=0.05)
    whole = run_scenario(chain4, None, 50, seed=9, observer=cfg)

    sim = Simulation(chain4, ObserverConfig(noise_sigma=0.05), seed=9)
    from swarmtopo.simulate import PassiveTracker

    tracker = PassiveTracker(sim.observer_config)
    sim.run(tracker, 20)
    sim.run(tracker, 30)
    split = sim.trace()
    assert np.array_equal(whole.readings, split.readings, equal_nan=True)
    assert np.array_equal(whole.true_positions, split.true_positions)


def test_passive_tracker_keeps_clear_and_never_excites():
    spec = random_network(n=6, seed=5)
    trace = run_scenario(
        spec, None, 300, seed=11, observer=ObserverConfig(noise_sigma=0.05)
    )
    assert not trace.excited.any()
    # after the transient the observer should respect the keep-away margin
    rel = trace.true_positions[100:] - trace.observer[100:, None, :]
    dists = np.hypot(rel[..., 0], rel[..., 1])
    assert dists.min() > spec.obstacle_range


def test_formation_converges_to_exact_pattern(chain4):
    trace = run_scenario(
        chain4,
        None,
        400,
        seed=2,
        observer=ObserverConfig(noise_sigma=0.0, observation_range=50.0),
        launch_offset=(-3.0, 2.0),
    )
    pattern = exact_pattern(chain4)
    final = trace.true_positions[-1]
    rel = final - final[chain4.leader]
    assert np.allclose(rel, pattern.s_hat, atol=1e-8)
    # and the leader advanced at exactly the commanded per-step displacement
    leader_track = trace.true_positions[:, chain4.leader]
    steps = np.diff(leader_track, axis=0)
    assert np.allclose(steps, pattern.c_hat, atol=1e-12)


def test_trace_round_trip(tmp_path, chain4):
    trace = run_scenario(chain4, None, 30, seed=3, observer=ObserverConfig(noise_sigma=0.1))
    trace.meta["scenario"] = {"name": "chain", "seed": 3}
    path = tmp_path / "trace.npz"
    save_trace(trace, path)
    back = load_trace(path)
    assert np.array_equal(back.true_positions, trace.true_positions)
    assert np.array_equal(back.readings, trace.readings, equal_nan=True)
    assert np.array_equal(back.visible, trace.visible)
    assert np.array_equal(back.observer, trace.observer)
    assert np.array_equal(back.excited, trace.excited)
    assert back.meta == trace.meta
    assert back.spec.n == chain4.n
    assert np.array_equal(back.spec.adjacency, chain4.adjacency)


def test_trace_csv_layout(tmp_path, chain4):
    trace = run_scenario(chain4, None, 5, seed=3)
    path = tmp_path / "trace.csv"
    trace_to_csv(trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,robot,true_x,true_y,obs_x,obs_y,visible,excited"
    # header + (observer + n robots) per frame
    assert len(lines) == 1 + 6 * (chain4.n + 1)
    assert lines[1].startswith("0,-1,")
