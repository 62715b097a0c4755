"""Closed-loop world simulation: formation dynamics, observer, noisy frames.

Per-step ordering (fixed, relied on by replay determinism):

1. the current frame is already on record (noise drawn when it was built);
2. the observer strategy plans its next position from that frame;
3. if the obstacle is live, every robot within the obstacle range of the
   *current* observer position receives a repulsive input;
4. the formation advances one step;
5. the observer jumps to its planned position and the new frame is observed.

Observation noise is drawn as a full (n, 2) block every step regardless of
visibility so the stream a robot consumes never depends on who else is in
view.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ._validate import as_float_array, check_rng
from .network import (
    NetworkSpec,
    build_perron,
    check_stability,
    formation_input,
    network_from_text,
    network_to_text,
)

__all__ = [
    "ObservationFrame",
    "ObserverConfig",
    "PassiveTracker",
    "ScenarioTrace",
    "Simulation",
    "WorldState",
    "load_trace",
    "observe",
    "obstacle_response",
    "run_scenario",
    "save_trace",
    "step_formation",
    "step_inference_robot",
    "trace_to_csv",
]


# ---------------------------------------------------------------------------
# state containers


@dataclass
class WorldState:
    """Mutable snapshot of the world at one step."""

    k: int
    positions: np.ndarray  # (n, 2) true robot positions
    observer: np.ndarray  # (2,) inference robot position


@dataclass
class ObservationFrame:
    """What the inference robot records at one step."""

    k: int
    readings: np.ndarray  # (n, 2), NaN where not visible
    visible: np.ndarray  # (n,) bool
    observer: np.ndarray  # (2,) its own exact position


@dataclass
class ObserverConfig:
    """Inference-robot parameters.

    `passive_excitation` controls whether the observer's mere presence makes
    nearby robots react while no excitation strategy is driving; the default
    keeps passive observation inert.
    """

    observation_range: float = 9.0
    noise_sigma: float = 0.1
    start: tuple[float, float] | None = None
    keep_distance_factor: float = 1.5
    avoid_gain: float = 0.5
    track_gain: float = 1.0
    max_speed: float = 1.0
    passive_excitation: bool = False


@dataclass
class ScenarioTrace:
    """Full record of a scenario run.

    Arrays are indexed by frame; `excited[k]` flags robots that received an
    obstacle response during the transition leaving frame k (the last frame
    has no transition, so its row is all False).
    """

    spec: NetworkSpec
    true_positions: np.ndarray  # (T + 1, n, 2)
    readings: np.ndarray  # (T + 1, n, 2), NaN where not visible
    visible: np.ndarray  # (T + 1, n) bool
    observer: np.ndarray  # (T + 1, 2)
    excited: np.ndarray  # (T + 1, n) bool
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.true_positions.shape[0] - 1

    def frame(self, k: int) -> ObservationFrame:
        return ObservationFrame(
            k=k,
            readings=self.readings[k],
            visible=self.visible[k],
            observer=self.observer[k],
        )


# ---------------------------------------------------------------------------
# physics


def step_formation(
    world: WorldState,
    perron: np.ndarray,
    input_term: np.ndarray,
    excitations: dict[int, np.ndarray] | None = None,
) -> WorldState:
    """Advance the formation one step: positions <- W positions + u (+ pushes)."""
    nxt = perron @ world.positions + input_term
    if excitations:
        for i, push in excitations.items():
            nxt[i] += push
    return WorldState(k=world.k + 1, positions=nxt, observer=world.observer)


def obstacle_response(
    spec: NetworkSpec,
    target_state: np.ndarray,
    obstacle_pos: np.ndarray,
    rel_velocity: np.ndarray | None = None,
    gain: float = 0.1,
    max_push: float = 0.2,
) -> np.ndarray:
    """Repulsive displacement a robot applies when an obstacle is inside R_o.

    Magnitude gain * (R_o / d - 1) capped at `max_push`, directed from the
    obstacle toward the robot; zero outside the range. The response depends
    on separation only; `rel_velocity` is accepted because callers have it
    on hand, but it does not shape the push.
    """
    target_state = np.asarray(target_state, dtype=float)
    obstacle_pos = np.asarray(obstacle_pos, dtype=float)
    away = target_state - obstacle_pos
    d = float(np.hypot(*away))
    if d >= spec.obstacle_range:
        return np.zeros(2)
    if d < 1e-12:
        return np.zeros(2)  # coincident points give no direction to push along
    magnitude = min(gain * (spec.obstacle_range / d - 1.0), max_push)
    return magnitude * away / d


def observe(
    world: WorldState,
    spec: NetworkSpec,
    observation_range: float,
    sigma: float,
    rng: np.random.Generator,
) -> ObservationFrame:
    """Build the noisy frame the inference robot sees at the current step."""
    noise = sigma * rng.standard_normal((spec.n, 2)) if sigma > 0 else np.zeros((spec.n, 2))
    offsets = world.positions - world.observer
    visible = np.hypot(offsets[:, 0], offsets[:, 1]) <= observation_range
    readings = np.where(visible[:, None], world.positions + noise, np.nan)
    return ObservationFrame(
        k=world.k,
        readings=readings,
        visible=visible,
        observer=world.observer.copy(),
    )


def step_inference_robot(
    world: WorldState,
    frames: list[ObservationFrame],
    config: ObserverConfig,
    obstacle_range: float = 1.5,
) -> np.ndarray:
    """Default passive motion: follow the visible crowd, keep a safe margin.

    Velocity is estimated from the two most recent frames over robots visible
    in both; with fewer than two frames (or nothing visible twice) the
    observer holds still. A repulsion away from the nearest reading keeps the
    observer outside the excitation range unless `passive_excitation` allows
    drifting in.
    """
    pos = world.observer
    step = np.zeros(2)
    if len(frames) >= 2:
        prev, cur = frames[-2], frames[-1]
        both = prev.visible & cur.visible
        if both.any():
            step = config.track_gain * np.mean(
                cur.readings[both] - prev.readings[both], axis=0
            )
    if not config.passive_excitation and frames:
        cur = frames[-1]
        if cur.visible.any():
            rel = cur.readings[cur.visible] - pos
            dists = np.hypot(rel[:, 0], rel[:, 1])
            nearest = int(np.argmin(dists))
            margin = config.keep_distance_factor * obstacle_range
            if dists[nearest] < margin and dists[nearest] > 1e-9:
                step -= (
                    config.avoid_gain
                    * (margin - dists[nearest])
                    * rel[nearest]
                    / dists[nearest]
                )
    speed = float(np.hypot(*step))
    if speed > config.max_speed:
        step *= config.max_speed / speed
    return pos + step


# ---------------------------------------------------------------------------
# strategies


class PassiveTracker:
    """Observer strategy that only follows the formation."""

    def __init__(self, config: ObserverConfig):
        self.config = config

    def begin(self, sim: "Simulation") -> None:
        self._sim = sim

    def plan(self, frame: ObservationFrame) -> tuple[np.ndarray, bool]:
        nxt = step_inference_robot(
            self._sim.world, self._sim.frames, self.config, self._sim.spec.obstacle_range
        )
        return nxt, self.config.passive_excitation


# ---------------------------------------------------------------------------
# simulation driver


class Simulation:
    """Owns the world, the rng, and the growing frame record.

    The first frame is observed on construction; each `run` step consumes the
    latest frame, advances the world, and observes the next one, so after
    `run(h)` there are h + 1 frames and the generator state is a pure
    function of (seed, decisions so far).
    """

    def __init__(
        self,
        spec: NetworkSpec,
        observer: ObserverConfig,
        seed,
        init_positions: np.ndarray | None = None,
        launch_offset: tuple[float, float] | None = None,
        launch_jitter: float = 0.0,
        launch_robots: list[int] | None = None,
        require_stable: bool = True,
    ):
        self.spec = spec
        self.observer_config = observer
        self.perron = build_perron(spec)
        if require_stable:
            report = check_stability(self.perron)
            if not report.stable:
                raise ValueError(
                    "network does not converge: unit eigenvalue multiplicity "
                    f"{report.unit_multiplicity}, second modulus {report.second_modulus}"
                )
        self.input_term = formation_input(spec, self.perron)
        self.rng = check_rng(seed)

        if init_positions is not None:
            positions = as_float_array(init_positions, "init_positions", (spec.n, 2)).copy()
        else:
            positions = spec.shape.copy()
            movers = (
                [i for i in range(spec.n) if i != spec.leader]
                if launch_robots is None
                else list(launch_robots)
            )
            if launch_offset is not None:
                positions[movers] += np.asarray(launch_offset, dtype=float)
            if launch_jitter > 0:
                positions[movers] += launch_jitter * self.rng.standard_normal(
                    (len(movers), 2)
                )
        if observer.start is not None:
            start = np.asarray(observer.start, dtype=float)
        else:
            start = positions.mean(axis=0)
        self.world = WorldState(k=0, positions=positions, observer=start.copy())
        self.frames: list[ObservationFrame] = []
        self._excited: list[np.ndarray] = []
        self._true: list[np.ndarray] = [positions.copy()]
        self._observe_current()

    # -- internals ----------------------------------------------------------

    def _observe_current(self) -> None:
        frame = observe(
            self.world,
            self.spec,
            self.observer_config.observation_range,
            self.observer_config.noise_sigma,
            self.rng,
        )
        self.frames.append(frame)

    def _apply_obstacle(self) -> tuple[dict[int, np.ndarray], np.ndarray]:
        flags = np.zeros(self.spec.n, dtype=bool)
        pushes: dict[int, np.ndarray] = {}
        pos = self.world.positions
        rel = pos - self.world.observer
        dists = np.hypot(rel[:, 0], rel[:, 1])
        for i in np.flatnonzero(dists < self.spec.obstacle_range):
            push = obstacle_response(self.spec, pos[i], self.world.observer)
            if np.any(push != 0):
                pushes[int(i)] = push
                flags[i] = True
        return pushes, flags

    # -- public -------------------------------------------------------------

    @property
    def k(self) -> int:
        return self.world.k

    def run(self, strategy, steps: int) -> None:
        """Advance `steps` transitions under the given observer strategy."""
        if steps <= 0:
            raise ValueError(f"steps must be positive, got {steps}")
        strategy.begin(self)
        for _ in range(steps):
            next_pos, obstacle_live = strategy.plan(self.frames[-1])
            if obstacle_live:
                pushes, flags = self._apply_obstacle()
            else:
                pushes, flags = {}, np.zeros(self.spec.n, dtype=bool)
            self._excited.append(flags)
            self.world = step_formation(self.world, self.perron, self.input_term, pushes)
            self.world.observer = np.asarray(next_pos, dtype=float).copy()
            self._true.append(self.world.positions.copy())
            self._observe_current()

    def trace(self, meta: dict | None = None) -> ScenarioTrace:
        """Snapshot everything recorded so far."""
        t = len(self.frames)
        excited = np.zeros((t, self.spec.n), dtype=bool)
        if self._excited:
            excited[: len(self._excited)] = np.stack(self._excited)
        return ScenarioTrace(
            spec=self.spec,
            true_positions=np.stack(self._true),
            readings=np.stack([f.readings for f in self.frames]),
            visible=np.stack([f.visible for f in self.frames]),
            observer=np.stack([f.observer for f in self.frames]),
            excited=excited,
            meta=dict(meta or {}),
        )


def run_scenario(
    spec: NetworkSpec,
    strategy,
    horizon: int,
    seed,
    observer: ObserverConfig | None = None,
    **init_kwargs,
) -> ScenarioTrace:
    """Run a complete scenario and return its trace.

    `strategy` may be None for plain passive tracking. A non-positive
    horizon is an error rather than an empty trace.
    """
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    observer = observer if observer is not None else ObserverConfig()
    sim = Simulation(spec, observer, seed, **init_kwargs)
    if strategy is None:
        strategy = PassiveTracker(observer)
    sim.run(strategy, horizon)
    return sim.trace()


# ---------------------------------------------------------------------------
# persistence


def save_trace(trace: ScenarioTrace, path) -> None:
    """Write a trace to a compressed binary archive (replayable)."""
    np.savez_compressed(
        path,
        true_positions=trace.true_positions,
        readings=trace.readings,
        visible=trace.visible,
        observer=trace.observer,
        excited=trace.excited,
        network=np.frombuffer(network_to_text(trace.spec).encode(), dtype=np.uint8),
        meta=np.frombuffer(json.dumps(trace.meta).encode(), dtype=np.uint8),
    )


def load_trace(path) -> ScenarioTrace:
    """Read back a trace written by :func:`save_trace`."""
    with np.load(path) as data:
        spec = network_from_text(bytes(data["network"]).decode(), origin=str(path))
        meta = json.loads(bytes(data["meta"]).decode())
        return ScenarioTrace(
            spec=spec,
            true_positions=data["true_positions"],
            readings=data["readings"],
            visible=data["visible"],
            observer=data["observer"],
            excited=data["excited"],
            meta=meta,
        )


def trace_to_csv(trace: ScenarioTrace, path) -> None:
    """Flat CSV: one row per (step, robot); the observer is robot -1."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,robot,true_x,true_y,obs_x,obs_y,visible,excited\n")
        for k in range(trace.horizon + 1):
            ox, oy = trace.observer[k]
            fh.write(f"{k},-1,{ox!r},{oy!r},{ox!r},{oy!r},1,0\n")
            for i in range(trace.spec.n):
                tx, ty = trace.true_positions[k, i]
                rx, ry = trace.readings[k, i]
                obs = ("", "") if np.isnan(rx) else (repr(rx), repr(ry))
                fh.write(
                    f"{k},{i},{tx!r},{ty!r},{obs[0]},{obs[1]},"
                    f"{int(trace.visible[k, i])},{int(trace.excited[k, i])}\n"
                )
