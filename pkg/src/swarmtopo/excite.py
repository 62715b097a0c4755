"""Active excitation: poke one robot and watch who else answers.

The observer closes in on a chosen robot until that robot's velocity
prediction error jumps (its obstacle reflex fired), records the reaction
distance, then keeps hopping around the robot for m steps so the reflex
stays engaged. Robots whose average velocity over that window shifted are
flagged as listeners of the target, and the largest observed distance
between the target and any flagged listener bounds the interaction range
from below.

Thresholds live here as small named helpers; both stages flag on either
spatial dimension crossing its scalar threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .simulate import ScenarioTrace, Simulation
from .steady import SteadyPattern, default_epsilon

__all__ = [
    "ExcitationConfig",
    "ExcitationController",
    "ExcitationSession",
    "classification_threshold",
    "classify_out_neighbors",
    "detect_reaction",
    "excitation_strategy",
    "range_lower_bound",
    "reaction_threshold",
    "run_excitation_stage",
    "velocity_prediction_error",
]


def reaction_threshold(epsilon: float, sigma: float) -> float:
    """Per-dimension bound on the one-step prediction error when unexcited."""
    return float(np.sqrt(3.0 * epsilon**2 + 2.0 * sigma**2))


def classification_threshold(epsilon: float, window_len: int, m: int) -> float:
    """Per-dimension bound on the m-step average velocity shift when unexcited."""
    if window_len <= 0 or m <= 0:
        raise ValueError(
            f"window_len and m must be positive, got {window_len} and {m}"
        )
    return (4.0 / np.sqrt(window_len) + 4.0 / np.sqrt(m)) * epsilon


def velocity_prediction_error(current, previous, c_hat) -> np.ndarray:
    """One-step velocity prediction error: observed step minus expected step."""
    return np.asarray(current, dtype=float) - np.asarray(previous, dtype=float) - np.asarray(c_hat, dtype=float)


def detect_reaction(
    trace: ScenarioTrace,
    target: int,
    c_hat: np.ndarray,
    epsilon: float,
    sigma: float,
    start: int = 1,
) -> tuple[int, float]:
    """First step where the target's prediction error crosses the threshold.

    Scans consecutive frames from `start` (pairs with a visibility gap are
    skipped) and returns (k_e, reaction distance), the distance being between
    the target's reading and the observer at the crossing frame. Raises if
    the threshold is never crossed.
    """
    thr = reaction_threshold(epsilon, sigma)
    readings = trace.readings
    for k in range(max(start, 1), readings.shape[0]):
        prev = readings[k - 1, target]
        cur = readings[k, target]
        if not (np.isfinite(prev).all() and np.isfinite(cur).all()):
            continue
        delta = velocity_prediction_error(cur, prev, c_hat)
        if np.any(np.abs(delta) > thr):
            gap = cur - trace.observer[k]
            return k, float(np.hypot(gap[0], gap[1]))
    raise ValueError(
        f"robot {target} never crossed the reaction threshold {thr:.3g}; "
        "it was never excited or the thresholds are mis-set"
    )


def excitation_strategy(
    observer_pos,
    target_prediction,
    r_o_hat: float,
    rng: np.random.Generator,
    previous_motion=None,
    max_tries: int = 40,
) -> np.ndarray:
    """Next observer position: random point near the target, same heading.

    Samples uniformly from the disc of radius `r_o_hat` around the predicted
    target position, keeping per-dimension sign agreement between the
    resulting step and `previous_motion` (a zero component is compatible
    with anything). When rejection sampling finds nothing, heads for the
    disc center with the disagreeing components dropped and pulls the point
    back onto the disc boundary; staying inside the disc is the hard
    constraint, heading is best-effort.
    """
    center = np.asarray(target_prediction, dtype=float)
    if r_o_hat <= 0:
        return center.copy()
    pos = np.asarray(observer_pos, dtype=float)
    prev = np.zeros(2) if previous_motion is None else np.asarray(previous_motion, dtype=float)
    for _ in range(max_tries):
        radius = r_o_hat * np.sqrt(rng.random())
        angle = 2.0 * np.pi * rng.random()
        cand = center + radius * np.array([np.cos(angle), np.sin(angle)])
        if np.all((cand - pos) * prev >= -1e-12):
            return cand
    step = center - pos
    step[step * prev < 0] = 0.0
    cand = pos + step
    off = cand - center
    dist = float(np.hypot(off[0], off[1]))
    if dist > r_o_hat:
        cand = center + off * (r_o_hat / dist)
    return cand


def classify_out_neighbors(
    readings: np.ndarray,
    target: int,
    k_e: int,
    m: int,
    c_hat: np.ndarray,
    epsilon: float,
    window_len: int,
    members,
) -> dict[int, int | None]:
    """Flag robots whose m-step average velocity shifted during excitation.

    For each candidate the accumulated prediction error between frames k_e
    and k_e + m is averaged and compared against the classification
    threshold (either dimension). Candidates missing at either endpoint map
    to None (unclassifiable). The target itself is classified too; its own
    entry reflects the excitation it absorbed and is ignored by the
    downstream range bound.
    """
    readings = np.asarray(readings, dtype=float)
    if k_e + m >= readings.shape[0]:
        raise ValueError(
            f"need frame {k_e + m} to classify but the trace ends at "
            f"{readings.shape[0] - 1}"
        )
    thr = classification_threshold(epsilon, window_len, m)
    c_hat = np.asarray(c_hat, dtype=float)
    out: dict[int, int | None] = {}
    for i in members:
        i = int(i)
        a = readings[k_e, i]
        b = readings[k_e + m, i]
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            out[i] = None
            continue
        shift = (b - a - m * c_hat) / m
        out[i] = int(np.any(np.abs(shift) > thr))
    return out


def range_lower_bound(
    readings: np.ndarray,
    target: int,
    indicators: dict[int, int | None],
    k_end: int,
    r_o_hat: float = 0.0,
) -> float:
    """Largest observed target-to-flagged-listener distance up to k_end.

    Every flagged listener stayed within interaction range of the target
    for the whole run, so the maximum of their observed separations (frames
    1..k_end where both were visible) bounds the range from below. The
    reaction distance is folded in for the same reason: the reflex fired,
    so interaction reaches at least that far.
    """
    flagged = [i for i, v in indicators.items() if v == 1 and i != target]
    if not flagged:
        raise ValueError(
            f"no listeners of robot {target} were flagged; re-select a target"
        )
    readings = np.asarray(readings, dtype=float)
    k_end = min(k_end, readings.shape[0] - 1)
    best = float(r_o_hat)
    seen_any = False
    for i in flagged:
        diff = readings[1 : k_end + 1, i] - readings[1 : k_end + 1, target]
        good = np.isfinite(diff).all(axis=1)
        if not good.any():
            continue
        seen_any = True
        d = np.hypot(diff[good, 0], diff[good, 1])
        best = max(best, float(d.max()))
    if not seen_any:
        raise ValueError(
            f"flagged listeners {flagged} and robot {target} were never "
            "visible together; cannot bound the range"
        )
    return best


# ---------------------------------------------------------------------------
# closed-loop stage


@dataclass
class ExcitationConfig:
    """Knobs for the closed-loop excitation stage.

    `approach_speed` None means collective speed plus `approach_margin`.
    `epsilon` / `window_len` None fall back to the steady pattern's values
    (and to the noise-based default when the pattern carries none).
    """

    approach_speed: float | None = None
    approach_margin: float = 0.05
    approach_budget: int = 600
    epsilon: float | None = None
    window_len: int | None = None
    max_tries: int = 40


class ExcitationController:
    """Observer strategy for one target: close in, then orbit inside R_o.

    The obstacle is live in both phases. Motion is planned from the latest
    frame only; the predicted target position is its last reading advanced
    by the collective speed.
    """

    # the excitation disc sits STANDOFF_FRACTION of the estimated reaction
    # radius behind the target with SPREAD_FRACTION as its own radius, so
    # every sample keeps a positive gap to the target (overshooting onto it
    # would flip the repulsion) while staying well inside the reaction disc,
    # where the repulsion is strongest
    STANDOFF_FRACTION = 0.35
    SPREAD_FRACTION = 0.15

    def __init__(self, target: int, c_hat, speed: float, rng, max_tries: int = 40):
        self.target = int(target)
        self.c_hat = np.asarray(c_hat, dtype=float)
        self.speed = float(speed)
        self.rng = rng
        self.max_tries = max_tries
        self.phase = "approach"
        self.r_o_hat: float | None = None
        self._standoff: float | None = None
        self._spread: float | None = None
        self._heading = np.zeros(2)
        self._last_seen: tuple[int, np.ndarray] | None = None
        self._prev_motion = np.zeros(2)

    def begin(self, sim: Simulation) -> None:
        self._sim = sim

    def start_excite(self, r_o_hat: float) -> None:
        self.phase = "excite"
        self.r_o_hat = float(r_o_hat)
        self._standoff = self.STANDOFF_FRACTION * self.r_o_hat
        self._spread = self.SPREAD_FRACTION * self.r_o_hat
        # the stage keeps one direction of movement throughout: staying on
        # the trailing side of the target makes the repulsion push it the
        # same way every step, so its out-neighbors drift measurably within
        # m steps instead of jittering in place. Snapped to the dominant
        # approach axis, the drift lands on a single reading dimension
        # (the per-dimension displacement test sees all of it) and the zero
        # component leaves the cross-axis free for tracking the target.
        motion = self._prev_motion
        axis = int(abs(motion[1]) > abs(motion[0]))
        self._heading = np.zeros(2)
        self._heading[axis] = 1.0 if motion[axis] >= 0 else -1.0

    def _predict(self, frame) -> np.ndarray:
        if frame.visible[self.target]:
            self._last_seen = (frame.k, frame.readings[self.target].copy())
        if self._last_seen is None:
            raise ValueError(f"robot {self.target} has never been visible")
        k0, z0 = self._last_seen
        return z0 + (frame.k + 1 - k0) * self.c_hat

    def plan(self, frame) -> tuple[np.ndarray, bool]:
        zhat = self._predict(frame)
        pos = frame.observer
        if self.phase == "approach":
            gap = zhat - pos
            dist = float(np.hypot(gap[0], gap[1]))
            nxt = zhat.copy() if dist <= self.speed else pos + gap * (self.speed / dist)
        else:
            # sample a small disc tucked behind the prediction: every point
            # in it is within the reaction disc but never on the target, so
            # the repulsion always points along the stage heading
            back = zhat - self._standoff * self._heading
            nxt = excitation_strategy(
                pos, back, self._spread, self.rng, self._heading, self.max_tries
            )
        self._prev_motion = nxt - pos
        return nxt, True


@dataclass
class ExcitationSession:
    """Everything one completed excitation stage produced.

    `delta_series` holds the per-frame one-step prediction error for every
    robot (NaN where a frame is missing), `indicators` the classification
    map (None = unclassifiable), `attempts` the targets tried in order.
    """

    target: int
    k_excite: int
    m: int
    r_o_hat: float
    delta_series: np.ndarray  # (T + 1, n, 2)
    indicators: dict[int, int | None]
    rc_lower: float
    k_steady: int = 0
    attempts: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.m <= 0:
            raise ValueError(f"excitation count must be positive, got {self.m}")
        if self.k_excite < self.k_steady:
            raise ValueError(
                f"excitation started at step {self.k_excite}, before the "
                f"steady stage at {self.k_steady}"
            )
        flagged = [i for i, v in self.indicators.items() if v == 1 and i != self.target]
        if flagged and self.rc_lower < self.r_o_hat - 1e-9:
            raise ValueError(
                "range lower bound fell below the reaction distance with "
                "listeners flagged"
            )


def run_excitation_stage(
    sim: Simulation,
    pattern: SteadyPattern,
    m: int = 200,
    k_steady: int | None = None,
    targets=None,
    config: ExcitationConfig | None = None,
) -> ExcitationSession:
    """Drive the full stage on a live simulation and bound the range.

    Targets are tried nearest-first (then by id) unless given explicitly.
    For each: approach until the reaction threshold trips (budgeted), then
    m excitation steps, then classification; the first target with a
    flagged listener other than itself yields the session. Raises when the
    budget runs out mid-approach or every target comes up empty.
    """
    if m <= 0:
        raise ValueError(f"excitation count must be positive, got {m}")
    config = config or ExcitationConfig()
    sigma = sim.observer_config.noise_sigma
    epsilon = config.epsilon
    if epsilon is None:
        epsilon = pattern.epsilon if pattern.epsilon > 0 else default_epsilon(sigma)
    window_len = config.window_len
    if window_len is None:
        window_len = pattern.window_len
    if window_len <= 0:
        raise ValueError(
            "no usable averaging window length: set ExcitationConfig.window_len"
        )
    k_steady = pattern.k_steady if k_steady is None else int(k_steady)
    if sim.k < k_steady:
        raise ValueError(
            f"simulation is at step {sim.k}, before the steady stage at {k_steady}"
        )
    c_hat = np.asarray(pattern.c_hat, dtype=float)
    members = [int(i) for i in pattern.members if pattern.leader is None or int(i) != pattern.leader]
    if targets is None:
        frame = sim.frames[-1]
        rel = frame.readings[members] - frame.observer
        dist = np.hypot(rel[:, 0], rel[:, 1])
        dist = np.where(np.isfinite(dist), dist, np.inf)
        pool = [members[j] for j in sorted(range(len(members)), key=lambda j: (dist[j], members[j]))]
    else:
        pool = [int(t) for t in targets]
    if not pool:
        raise ValueError("no candidate targets to excite")

    thr = reaction_threshold(epsilon, sigma)
    speed = config.approach_speed
    if speed is None:
        speed = float(np.hypot(c_hat[0], c_hat[1])) + config.approach_margin
    attempts: list[int] = []

    for target in pool:
        attempts.append(target)
        controller = ExcitationController(target, c_hat, speed, sim.rng, config.max_tries)
        k_start = sim.k
        k_e = None
        r_o_hat = 0.0
        while sim.k - k_start < config.approach_budget:
            sim.run(controller, 1)
            prev, cur = sim.frames[-2], sim.frames[-1]
            if not (prev.visible[target] and cur.visible[target]):
                continue
            delta = velocity_prediction_error(
                cur.readings[target], prev.readings[target], c_hat
            )
            if np.any(np.abs(delta) > thr):
                k_e = cur.k
                gap = cur.readings[target] - cur.observer
                r_o_hat = float(np.hypot(gap[0], gap[1]))
                break
        if k_e is None:
            raise RuntimeError(
                f"robot {target} showed no reaction within "
                f"{config.approach_budget} approach steps"
            )
        controller.start_excite(r_o_hat)
        sim.run(controller, m)
        readings = np.stack([f.readings for f in sim.frames])
        indicators = classify_out_neighbors(
            readings, target, k_e, m, c_hat, epsilon, window_len, members
        )
        if not any(v == 1 for i, v in indicators.items() if i != target):
            continue
        rc_lower = range_lower_bound(readings, target, indicators, k_e + m, r_o_hat)
        delta_series = np.full_like(readings, np.nan)
        delta_series[1:] = readings[1:] - readings[:-1] - c_hat
        return ExcitationSession(
            target=target,
            k_excite=k_e,
            m=m,
            r_o_hat=r_o_hat,
            delta_series=delta_series,
            indicators=indicators,
            rc_lower=rc_lower,
            k_steady=k_steady,
            attempts=attempts,
        )
    raise RuntimeError(
        f"no listeners detected for any candidate target {attempts}; "
        "cannot bound the interaction range"
    )
