"""Steady-pattern identification from noisy position streams.

The formation converges to a rigid pattern translating at constant speed.
This module detects when the windowed speed estimate has settled, extracts
the collective speed and per-robot offsets, and picks out the leader (the
robot whose whole track moved at the collective speed from the start).

All observation arrays are (T + 1, n, 2) with NaN marking frames where a
robot was out of view.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validate import check_window
from .network import NetworkSpec, build_perron, left_perron

__all__ = [
    "SteadyDetection",
    "SteadyPattern",
    "SteadyPatternEstimator",
    "default_epsilon",
    "detect_steady_time",
    "determine_constant_subset",
    "estimate_steady_window",
    "exact_pattern",
    "finalize_pattern",
    "identify_leader",
]

# epsilon floor used when the noise level is zero, so thresholds stay
# meaningful instead of collapsing onto machine noise
EPS_FLOOR = 1e-6


def default_epsilon(sigma: float, floor: float = EPS_FLOOR) -> float:
    """Steadiness margin tied to the noise level (0.8 sigma, floored)."""
    return max(0.8 * sigma, floor)


# ---------------------------------------------------------------------------
# result containers


@dataclass
class SteadyPattern:
    """Estimated steady pattern of the observed sub-formation.

    `s_hat` holds per-robot track intercepts (position minus c_hat * step),
    `h_hat` the same shifted so the reference robot sits at zero. Rows
    outside `members` are NaN. `leader` is None when no robot qualified.
    """

    c_hat: np.ndarray  # (2,)
    s_hat: np.ndarray  # (n, 2)
    h_hat: np.ndarray  # (n, 2)
    k_steady: int
    window_len: int
    epsilon: float
    members: np.ndarray  # sorted robot ids
    reference: int
    leader: int | None = None
    leader_scores: np.ndarray | None = None  # (n,) max-over-dims drift score
    c_err: float | None = None
    s_err: float | None = None

    def indicator(self, ids: np.ndarray) -> np.ndarray:
        """Leader indicator restricted to `ids` (zeros when leader absent)."""
        ids = np.asarray(ids)
        out = np.zeros(len(ids))
        if self.leader is not None:
            out[ids == self.leader] = 1.0
        return out


@dataclass
class SteadyDetection:
    """Outcome of the steady-time scan."""

    k_steady: int
    c_benchmark: np.ndarray  # (2,)
    threshold: float
    speed_series: np.ndarray  # (T + 1 - L_c, 2), windowed speed at each k
    window_len: int


# ---------------------------------------------------------------------------
# constant-visibility bookkeeping


def determine_constant_subset(visible: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Robots visible through the end of the trace, with their entry steps.

    Returns (members, k_f) where members lists robots visible at the final
    frame and k_f[i] is the first step of robot i's final unbroken
    visibility run (n-length array, -1 for non-members).
    """
    visible = np.asarray(visible, dtype=bool)
    t_plus_1, n = visible.shape
    k_f = np.full(n, -1, dtype=int)
    for i in range(n):
        if not visible[-1, i]:
            continue
        gaps = np.flatnonzero(~visible[:, i])
        k_f[i] = int(gaps[-1]) + 1 if gaps.size else 0
    members = np.flatnonzero(k_f >= 0)
    return members, k_f


def _window_view(observations: np.ndarray, members: np.ndarray | None) -> np.ndarray:
    obs = np.asarray(observations, dtype=float)
    if obs.ndim != 3 or obs.shape[2] != 2:
        raise ValueError(f"observations must be (T+1, n, 2), got {obs.shape}")
    if members is not None:
        obs = obs[:, np.asarray(members, dtype=int)]
    return obs


# ---------------------------------------------------------------------------
# windowed estimates


def estimate_steady_window(
    observations: np.ndarray,
    k: int,
    window_len: int,
    members: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Speed and intercept estimates from frames k .. k + window_len.

    Speed: average one-step increment across robots and the window.
    Intercepts: per-robot mean of (reading - speed * step) over the window's
    interior frames. Frames with missing members raise.
    """
    obs = _window_view(observations, members)
    check_window(k, window_len, obs.shape[0])
    window = obs[k : k + window_len + 1]
    if not np.all(np.isfinite(window)):
        raise ValueError(
            f"window [{k}, {k + window_len}] has missing observations; "
            "restrict to the constantly visible subset first"
        )
    c_hat = (window[-1] - window[0]).mean(axis=0) / window_len
    steps = np.arange(k + 1, k + window_len + 1, dtype=float)
    tail = window[1:]  # frames k+1 .. k+window_len
    s = (tail - c_hat[None, None, :] * steps[:, None, None]).mean(axis=0)
    if members is None:
        return c_hat, s
    full = np.full((np.asarray(observations).shape[1], 2), np.nan)
    full[np.asarray(members, dtype=int)] = s
    return c_hat, full


def detect_steady_time(
    observations: np.ndarray,
    window_len: int,
    epsilon: float,
    members: np.ndarray | None = None,
) -> SteadyDetection:
    """First step whose windowed speed matches the end-of-trace benchmark.

    The benchmark is the windowed speed over the final window; a step
    qualifies when both coordinates sit within 8 epsilon / sqrt(window_len)
    of it. Needs at least two windows of trace; raises if no step qualifies
    (the formation never looked steady).
    """
    obs = _window_view(observations, members)
    t_end = obs.shape[0] - 1
    if t_end + 1 < 2 * window_len:
        raise ValueError(
            f"trace too short for window {window_len}: {t_end + 1} frames, "
            f"need at least {2 * window_len}"
        )
    if not np.all(np.isfinite(obs)):
        raise ValueError("speed scan requires the constantly visible subset")
    diffs = obs[window_len:] - obs[:-window_len]  # (T+1-L, nf, 2)
    series = diffs.mean(axis=1) / window_len
    c_benchmark = series[t_end - window_len]
    threshold = 8.0 * epsilon / np.sqrt(window_len)
    ok = np.all(np.abs(series - c_benchmark) <= threshold, axis=1)
    hits = np.flatnonzero(ok)
    if hits.size == 0:
        raise ValueError("windowed speed never settled within the threshold")
    return SteadyDetection(
        k_steady=int(hits[0]),
        c_benchmark=c_benchmark.copy(),
        threshold=float(threshold),
        speed_series=series,
        window_len=window_len,
    )


def finalize_pattern(
    observations: np.ndarray,
    k_steady: int,
    k_end: int,
    members: np.ndarray,
    epsilon: float,
) -> SteadyPattern:
    """Pattern over the whole steady stretch [k_steady, k_end].

    The reference robot is the lowest member id; offsets are shifted so its
    row is zero.
    """
    members = np.asarray(members, dtype=int)
    window_len = k_end - k_steady
    c_hat, s_hat = estimate_steady_window(observations, k_steady, window_len, members)
    reference = int(members.min())
    h_hat = s_hat - s_hat[reference]
    return SteadyPattern(
        c_hat=c_hat,
        s_hat=s_hat,
        h_hat=h_hat,
        k_steady=k_steady,
        window_len=window_len,
        epsilon=epsilon,
        members=members,
        reference=reference,
    )


def identify_leader(
    observations: np.ndarray,
    k_steady: int,
    c_benchmark: np.ndarray,
    window_len: int,
    epsilon: float,
    members: np.ndarray,
) -> tuple[int | None, np.ndarray]:
    """Pick the robot that already moved at the collective speed before k_steady.

    Score per robot: average magnitude of the pre-steady increments net of
    the benchmark speed (per dimension). Qualification demands both
    dimensions under 8 epsilon / sqrt(window_len); the winner is the lowest
    score (max over dimensions), ties to the lowest id. Returns
    (leader_or_None, scores) with non-qualifying scores still reported.
    """
    obs = np.asarray(observations, dtype=float)
    members = np.asarray(members, dtype=int)
    n = obs.shape[1]
    scores = np.full(n, np.nan)
    if k_steady < 1:
        return None, scores
    c_benchmark = np.asarray(c_benchmark, dtype=float)
    threshold = 8.0 * epsilon / np.sqrt(window_len)
    best: tuple[float, int] | None = None
    for i in members:
        head = obs[: k_steady + 1, i]
        if not np.all(np.isfinite(head)):
            continue
        drift = np.abs((head[-1] - head[0]) / k_steady - c_benchmark)
        scores[i] = float(drift.max())
        if np.all(drift <= threshold):
            cand = (scores[i], int(i))
            if best is None or cand < best:
                best = cand
    return (best[1] if best is not None else None), scores


# ---------------------------------------------------------------------------
# exact pattern from a model


def exact_pattern(spec: NetworkSpec) -> SteadyPattern:
    """Noise-free steady pattern implied by the model itself.

    The collective speed is the leader's commanded displacement weighted by
    its share of the stationary distribution (exactly the commanded value
    for leader-rooted networks). Offsets are the commanded shape plus the
    motion-induced lag, both referenced to the leader; `h_hat` is the
    commanded shape itself, which is the vector that makes the filtered
    one-step regression exact.
    """
    w = build_perron(spec)
    pi = left_perron(w)
    c = spec.control_period * pi[spec.leader] * spec.leader_velocity
    # lag: (I - W) lag = c (e_leader - 1), pinned to zero at the leader
    followers = [i for i in range(spec.n) if i != spec.leader]
    a = (np.eye(spec.n) - w)[np.ix_(followers, followers)]
    rhs = -np.tile(c, (len(followers), 1))
    lag = np.zeros((spec.n, 2))
    lag[followers] = np.linalg.solve(a, rhs)
    h0 = spec.shape - spec.shape[spec.leader]
    s = h0 + lag
    return SteadyPattern(
        c_hat=c,
        s_hat=s,
        h_hat=h0.copy(),
        k_steady=0,
        window_len=0,
        epsilon=0.0,
        members=np.arange(spec.n),
        reference=spec.leader,
        leader=spec.leader,
    )


# ---------------------------------------------------------------------------
# estimator wrapper


class SteadyPatternEstimator(BaseEstimator):
    """Steady-pattern stage with a fit/params interface.

    Parameters
    ----------
    window_len : int
        Length L_c of the speed-estimation window.
    sigma : float
        Assumed observation noise level; sets epsilon = max(0.8 sigma, floor).
    epsilon : float or None
        Explicit steadiness margin; overrides the sigma rule when given.

    After `fit(observations, visible=...)` the instance carries `pattern_`,
    `detection_`, `members_`, `k_f_`, and `k_steady_`.
    """

    def __init__(self, window_len: int = 500, sigma: float = 0.1, epsilon: float | None = None):
        self.window_len = window_len
        self.sigma = sigma
        self.epsilon = epsilon

    def _epsilon(self) -> float:
        return self.epsilon if self.epsilon is not None else default_epsilon(self.sigma)

    def fit(self, observations: np.ndarray, visible: np.ndarray | None = None):
        obs = np.asarray(observations, dtype=float)
        if visible is None:
            visible = np.all(np.isfinite(obs), axis=2)
        members, k_f = determine_constant_subset(visible)
        if members.size == 0:
            raise ValueError("no robot stays visible through the end of the trace")
        eps = self._epsilon()
        late_entry = int(k_f[members].max())
        usable = obs[late_entry:]
        detection = detect_steady_time(usable, self.window_len, eps, members)
        k_steady = detection.k_steady + late_entry
        k_end = obs.shape[0] - 1
        pattern = finalize_pattern(obs, k_steady, k_end, members, eps)
        leader, scores = identify_leader(
            obs, k_steady, detection.c_benchmark, self.window_len, eps, members
        )
        pattern.leader = leader
        pattern.leader_scores = scores
        self.pattern_ = pattern
        self.detection_ = detection
        self.members_ = members
        self.k_f_ = k_f
        self.k_steady_ = k_steady
        return self

    def transform(self, observations: np.ndarray) -> np.ndarray:
        """Subtract the fitted drift and offsets from a stream of frames."""
        pattern = self.pattern_
        obs = np.asarray(observations, dtype=float)
        steps = np.arange(obs.shape[0], dtype=float)
        return obs - pattern.h_hat[None] - np.multiply.outer(steps, pattern.c_hat)[:, None, :]
