"""Local topology estimation from filtered observations.

The one-step relation y = W_HF x holds exactly for rows whose in-neighbors
are all observed, once the drift and the shape offsets are filtered out of
the raw readings. Everything here builds on that: the plain least-squares
fit, the distance-constrained and rowwise variants, the naive baseline that
ignores unobserved inflow, and the range-shrinking search that finds how far
the regressor set can be cut down before the fit visibly moves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .network import NetworkSpec, build_perron
from .steady import SteadyPattern

__all__ = [
    "FilteredObservations",
    "RangeEstimate",
    "TopologyEstimate",
    "TopologyEstimator",
    "asymptotic_bias_probe",
    "average_observer_distances",
    "average_pairwise_distances",
    "build_filtered",
    "conservative_sets",
    "constrained_estimate",
    "empirical_bias_fn",
    "estimate_bias_floor",
    "observable_interior",
    "ols_estimate",
    "rowwise_estimate",
    "search_rc",
    "true_block",
    "truncated_estimate",
]


# ---------------------------------------------------------------------------
# containers


@dataclass
class FilteredObservations:
    """Drift- and shape-filtered regression data.

    `x` has one row per observed robot and one column per (step, dimension);
    `y` matches on the interior rows. Column k of `y` is the step after
    column k of `x`.
    """

    x: np.ndarray  # (n_f, 2 k_s)
    y: np.ndarray  # (n_h, 2 k_s)
    index_f: np.ndarray  # robot ids of x rows
    index_h: np.ndarray  # robot ids of y rows
    k_steady: int


@dataclass
class TopologyEstimate:
    """Fitted interaction block with bookkeeping."""

    w_hat: np.ndarray  # (n_h, n_f), NaN rows where unresolved
    method: str  # "ols" | "truncated" | "constrained" | "rowwise"
    index_f: np.ndarray
    index_h: np.ndarray
    rc_used: float | None = None
    cond: float | None = None
    resolved: np.ndarray | None = None  # rowwise: which rows were solvable
    error_vs_truth: float | None = None


@dataclass
class RangeEstimate:
    """Outcome of the interaction-range search."""

    rc_lb: float
    rc_ub: float
    rc_hat: float
    fe_history: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not (self.rc_lb - 1e-12 <= self.rc_hat <= self.rc_ub + 1e-12):
            raise ValueError(
                f"range estimate {self.rc_hat} outside [{self.rc_lb}, {self.rc_ub}]"
            )


# ---------------------------------------------------------------------------
# filtering


def build_filtered(
    observations: np.ndarray,
    pattern: SteadyPattern,
    v_h: np.ndarray,
    k_steady: int,
) -> FilteredObservations:
    """Assemble the regression matrices from raw readings.

    x columns are readings at steps 0 .. k_steady-1 minus the pattern
    offsets; y columns are the interior rows one step later, additionally
    stripped of the collective drift on the leader's row if the leader sits
    inside. Both coordinate dimensions are stacked as extra columns.
    """
    obs = np.asarray(observations, dtype=float)
    index_f = np.asarray(pattern.members, dtype=int)
    index_h = np.unique(np.asarray(v_h, dtype=int))
    if not np.isin(index_h, index_f).all():
        raise ValueError("interior rows must be a subset of the observed set")
    n_f = index_f.size
    if k_steady < n_f + 1:
        raise ValueError(
            f"need at least {n_f + 1} pre-steady steps for {n_f} observed robots, "
            f"got k_steady={k_steady}"
        )
    if k_steady >= obs.shape[0]:
        raise ValueError(f"k_steady={k_steady} beyond the trace")
    head = obs[: k_steady + 1, index_f]
    if not np.all(np.isfinite(head)):
        bad = index_f[np.any(~np.isfinite(head), axis=(0, 2))]
        raise ValueError(
            f"robots {bad.tolist()} missing from early frames; "
            "filtered regression needs full visibility up to k_steady"
        )
    h_f = pattern.h_hat[index_f]
    x3 = head[:-1] - h_f[None]  # (k_s, n_f, 2)
    pos_h = np.searchsorted(index_f, index_h)
    drift = np.outer(pattern.indicator(index_h), pattern.c_hat)  # (n_h, 2)
    y3 = head[1:, pos_h] - pattern.h_hat[index_h][None] - drift[None]
    x = np.hstack([x3[:, :, 0].T, x3[:, :, 1].T])
    y = np.hstack([y3[:, :, 0].T, y3[:, :, 1].T])
    return FilteredObservations(x=x, y=y, index_f=index_f, index_h=index_h, k_steady=k_steady)


# ---------------------------------------------------------------------------
# estimators


def ols_estimate(
    x: np.ndarray, y: np.ndarray, cond_limit: float = 1e10
) -> tuple[np.ndarray, float]:
    """Least-squares fit of y = W x, refusing ill-posed regressor matrices."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"incompatible shapes {x.shape} and {y.shape}")
    if x.shape[1] < x.shape[0]:
        raise ValueError(
            f"underdetermined: {x.shape[1]} columns for {x.shape[0]} regressor rows"
        )
    cond = float(np.linalg.cond(x))
    if not np.isfinite(cond) or cond > cond_limit:
        raise ValueError(f"regressor condition number {cond:.3g} exceeds {cond_limit:.3g}")
    w_t, *_ = np.linalg.lstsq(x.T, y.T, rcond=None)
    return w_t.T, cond


def truncated_estimate(x_f: np.ndarray, y_f: np.ndarray) -> tuple[np.ndarray, float]:
    """Naive baseline: fit every observed row against the observed set only.

    Identical math to :func:`ols_estimate`; the separate name marks that the
    caller supplied *all* observed rows as responses, including rows whose
    true update pulls in robots outside the observed set. Those rows come
    back biased no matter how much data arrives.
    """
    return ols_estimate(x_f, y_f)


def constrained_estimate(
    filtered: FilteredObservations,
    rc_hat: float,
    pairwise: np.ndarray,
) -> np.ndarray:
    """Per-row least squares with far-apart coefficients pinned to zero.

    `pairwise` holds average observed inter-robot distances (full n x n).
    A row's support is every observed robot within `rc_hat` of it (itself
    included); rows with empty support come back zero.
    """
    x, y = filtered.x, filtered.y
    w = np.zeros((len(filtered.index_h), len(filtered.index_f)))
    for r, i in enumerate(filtered.index_h):
        support = np.flatnonzero(
            (pairwise[i, filtered.index_f] <= rc_hat)
            | (filtered.index_f == i)
        )
        if support.size == 0:
            continue
        sol, *_ = np.linalg.lstsq(x[support].T, y[r], rcond=None)
        w[r, support] = sol
    return w


def rowwise_estimate(
    observations: np.ndarray,
    pattern: SteadyPattern,
    rc_hat: float,
    v_h: np.ndarray,
    k_steady: int,
    k_f: np.ndarray | None = None,
    pairwise: np.ndarray | None = None,
) -> TopologyEstimate:
    """Row-at-a-time fit tolerating staggered visibility.

    Each interior row uses only the steps after its own entry and only the
    regressors within `rc_hat` by average distance (itself always included).
    A row is resolved when its window is at least as long as its support;
    unresolved rows are NaN and flagged, never silently zeroed.
    """
    obs = np.asarray(observations, dtype=float)
    index_f = np.asarray(pattern.members, dtype=int)
    v_h = np.asarray(v_h, dtype=int)
    if k_f is None:
        k_f = np.zeros(obs.shape[1], dtype=int)
    if rc_hat is None:
        rc_hat = np.inf
    if pairwise is None:
        pairwise = np.zeros((obs.shape[1], obs.shape[1]))
    w = np.full((v_h.size, index_f.size), np.nan)
    resolved = np.zeros(v_h.size, dtype=bool)
    drift_rows = pattern.indicator(v_h)
    for r, i in enumerate(v_h):
        start = int(k_f[i])
        support_ids = index_f[
            (pairwise[i, index_f] <= rc_hat) | (index_f == i)
        ]
        window = k_steady - start
        if window < 1 or support_ids.size > window:
            continue
        head = obs[start : k_steady + 1, support_ids]
        own = obs[start : k_steady + 1, i]
        if not (np.all(np.isfinite(head)) and np.all(np.isfinite(own))):
            continue
        x3 = head[:-1] - pattern.h_hat[support_ids][None]
        y2 = own[1:] - pattern.h_hat[i][None] - drift_rows[r] * pattern.c_hat[None]
        x = np.hstack([x3[:, :, 0].T, x3[:, :, 1].T])
        yv = np.concatenate([y2[:, 0], y2[:, 1]])
        sol, *_ = np.linalg.lstsq(x.T, yv, rcond=None)
        w[r] = 0.0
        w[r, np.searchsorted(index_f, support_ids)] = sol
        resolved[r] = True
    return TopologyEstimate(
        w_hat=w,
        method="rowwise",
        index_f=index_f,
        index_h=v_h,
        rc_used=None if not np.isfinite(rc_hat) else float(rc_hat),
        resolved=resolved,
    )


# ---------------------------------------------------------------------------
# visibility sets and distances


def average_observer_distances(
    trace_readings: np.ndarray,
    trace_observer: np.ndarray,
    window_len: int,
) -> np.ndarray:
    """Mean observed distance to the observer over the trailing window."""
    tail = trace_readings[-window_len:]
    obs_tail = trace_observer[-window_len:, None, :]
    d = np.hypot(*(tail - obs_tail).transpose(2, 0, 1))
    return d.mean(axis=0)


def average_pairwise_distances(trace_readings: np.ndarray, window_len: int) -> np.ndarray:
    """Mean observed robot-to-robot distances over the trailing window."""
    tail = trace_readings[-window_len:]  # (L, n, 2)
    diff = tail[:, :, None, :] - tail[:, None, :, :]
    return np.hypot(diff[..., 0], diff[..., 1]).mean(axis=0)


def observable_interior(
    observer_distances: np.ndarray,
    members: np.ndarray,
    observation_range: float,
    rc_hat: float,
) -> np.ndarray:
    """Rows whose whole in-neighborhood is guaranteed observed.

    A robot within (observation range - rc_hat) of the observer can only be
    influenced from inside the observed ball, provided rc_hat really bounds
    the interaction range.
    """
    members = np.asarray(members, dtype=int)
    radius = observation_range - rc_hat
    inside = members[observer_distances[members] <= radius]
    return inside


def conservative_sets(
    observer_distances: np.ndarray,
    members: np.ndarray,
    observation_range: float,
    rc_upper: float,
    rc_hat: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Interior rows under the range upper bound, and their regressor set.

    Returns (v_h0, v_f0): v_h0 uses the known-safe upper bound; v_f0 keeps
    every observed robot near enough to matter for v_h0 under the candidate
    range rc_hat. v_h0 empty is an error: the upper bound leaves no robot
    with a fully observed neighborhood.
    """
    members = np.asarray(members, dtype=int)
    r_h0 = observation_range - rc_upper
    v_h0 = members[observer_distances[members] <= r_h0]
    if v_h0.size == 0:
        raise ValueError(
            f"no observed robot sits within {r_h0:.3g} of the observer; "
            "the range upper bound leaves nothing safely observable"
        )
    v_f0 = members[observer_distances[members] <= r_h0 + rc_hat]
    return v_h0, v_f0


# ---------------------------------------------------------------------------
# range search


def _padded_fit(
    filtered: FilteredObservations,
    v_h0: np.ndarray,
    v_f0: np.ndarray,
    cond_limit: float = 1e10,
) -> np.ndarray:
    """OLS on (v_h0 x v_f0), zero-padded back to the full observed columns."""
    pos_f = np.searchsorted(filtered.index_f, v_f0)
    pos_h = np.searchsorted(filtered.index_h, v_h0)
    w_sub, _ = ols_estimate(filtered.x[pos_f], filtered.y[pos_h], cond_limit)
    w = np.zeros((v_h0.size, filtered.index_f.size))
    w[:, pos_f] = w_sub
    return w


def empirical_bias_fn(
    filtered: FilteredObservations,
    observer_distances: np.ndarray,
    observation_range: float,
    rc_upper: float,
    cond_limit: float = 1e10,
):
    """Callable f_e(rc): shift of the interior fit when the regressor set
    shrinks from the upper bound down to rc.

    The reference fit uses every robot admissible at the upper bound; both
    fits are zero-padded onto the full observed column set before the
    Frobenius difference, so a smaller regressor set shows up as mass on the
    columns it dropped.
    """
    v_h0, v_f0_ref = conservative_sets(
        observer_distances, filtered.index_f, observation_range, rc_upper, rc_upper
    )
    if not np.isin(v_h0, filtered.index_h).all():
        raise ValueError("interior rows under the upper bound must be fitted rows")
    w_ref = _padded_fit(filtered, v_h0, v_f0_ref, cond_limit)

    def f_e(rc_hat: float) -> float:
        _, v_f0 = conservative_sets(
            observer_distances, filtered.index_f, observation_range, rc_upper, rc_hat
        )
        w = _padded_fit(filtered, v_h0, v_f0, cond_limit)
        return float(np.linalg.norm(w - w_ref))

    f_e.v_h0 = v_h0  # type: ignore[attr-defined]
    f_e.w_reference = w_ref  # type: ignore[attr-defined]
    return f_e


def estimate_bias_floor(
    filtered: FilteredObservations,
    observer_distances: np.ndarray,
    observation_range: float,
    rc_upper: float,
    draws: int = 16,
    seed=0,
    cond_limit: float = 1e10,
) -> float:
    """Noise floor for the empirical bias: 2x the median fit shift under
    half-column subsampling at the upper-bound regressor set."""
    rng = np.random.default_rng(seed)
    v_h0, v_f0 = conservative_sets(
        observer_distances, filtered.index_f, observation_range, rc_upper, rc_upper
    )
    w_full = _padded_fit(filtered, v_h0, v_f0, cond_limit)
    pos_f = np.searchsorted(filtered.index_f, v_f0)
    pos_h = np.searchsorted(filtered.index_h, v_h0)
    k = filtered.x.shape[1]
    shifts = []
    for _ in range(draws):
        cols = rng.choice(k, size=max(k // 2, v_f0.size + 1), replace=False)
        try:
            w_sub, _ = ols_estimate(
                filtered.x[np.ix_(pos_f, cols)], filtered.y[np.ix_(pos_h, cols)], cond_limit
            )
        except ValueError:
            continue
        w_pad = np.zeros_like(w_full)
        w_pad[:, pos_f] = w_sub
        shifts.append(float(np.linalg.norm(w_pad - w_full)))
    if not shifts:
        raise ValueError("bias floor estimation failed on every subsample")
    return 2.0 * float(np.median(shifts))


def search_rc(
    rc_lb: float,
    rc_ub: float,
    eps_w: float,
    n_w: int,
    bias_fn,
    min_width: float = 0.05,
) -> RangeEstimate:
    """Shrink the interaction-range upper bound by bisection.

    Midpoints whose fit shift stays at the noise floor are accepted as new
    upper bounds; a shift above `eps_w` means the cut dropped a real
    regressor, so the lower bound moves up and the confirmation counter
    restarts. The search returns after `n_w` consecutive confirmations or
    when the interval is thinner than `min_width`.
    """
    if rc_lb >= rc_ub:
        raise ValueError(f"empty search interval [{rc_lb}, {rc_ub}]")
    if n_w < 1:
        raise ValueError("need at least one confirmation")
    lb, ub = float(rc_lb), float(rc_ub)
    history: list[tuple[float, float]] = []
    confirmations = 0
    while confirmations < n_w and (ub - lb) > min_width:
        mid = 0.5 * (lb + ub)
        shift = float(bias_fn(mid))
        history.append((mid, shift))
        if shift > eps_w:
            lb = mid
            confirmations = 0
        else:
            ub = mid
            confirmations += 1
    return RangeEstimate(rc_lb=lb, rc_ub=ub, rc_hat=ub, fe_history=history)


# ---------------------------------------------------------------------------
# ground-truth diagnostics


def true_block(spec: NetworkSpec, index_h, index_f) -> np.ndarray:
    """True update sub-block for error reporting."""
    w = build_perron(spec)
    return w[np.ix_(np.asarray(index_h, dtype=int), np.asarray(index_f, dtype=int))]


def asymptotic_bias_probe(
    observations: np.ndarray,
    pattern: SteadyPattern,
    spec: NetworkSpec,
    rc_hat: float,
    ks_schedule: list[int],
    observer_distances: np.ndarray,
    observation_range: float,
    rc_upper: float,
    cond_limit: float = 1e10,
) -> list[tuple[int, float]]:
    """Ground-truth distance of the interior fit as data accumulates.

    For each window length in the schedule, fit the interior block with the
    regressor set admitted by `rc_hat` and report the Frobenius distance to
    the true weights over the full observed column set. Flat-at-zero curves
    mean `rc_hat` kept every real in-neighbor; a floor that refuses to decay
    is the truncation bias showing through.
    """
    out: list[tuple[int, float]] = []
    for k_s in ks_schedule:
        filtered = build_filtered(observations, pattern, pattern.members, k_s)
        v_h0, v_f0 = conservative_sets(
            observer_distances, filtered.index_f, observation_range, rc_upper, rc_hat
        )
        w = _padded_fit(filtered, v_h0, v_f0, cond_limit)
        truth = true_block(spec, v_h0, filtered.index_f)
        out.append((k_s, float(np.linalg.norm(w - truth))))
    return out


# ---------------------------------------------------------------------------
# estimator wrapper


class TopologyEstimator(BaseEstimator):
    """Topology stage with a fit/params interface.

    Parameters
    ----------
    method : str
        One of "ols", "truncated", "constrained", "rowwise".
    rc_hat : float or None
        Interaction-range bound used by the constrained and rowwise methods.
    cond_limit : float
        Regressor condition-number refusal threshold.

    `fit` consumes a FilteredObservations bundle (plus distances for the
    constrained method) and exposes `estimate_` / `w_hat_`.
    """

    def __init__(self, method: str = "ols", rc_hat: float | None = None, cond_limit: float = 1e10):
        self.method = method
        self.rc_hat = rc_hat
        self.cond_limit = cond_limit

    def fit(self, filtered: FilteredObservations, pairwise: np.ndarray | None = None):
        if self.method in ("ols", "truncated"):
            w, cond = ols_estimate(filtered.x, filtered.y, self.cond_limit)
            est = TopologyEstimate(
                w_hat=w,
                method=self.method,
                index_f=filtered.index_f,
                index_h=filtered.index_h,
                cond=cond,
            )
        elif self.method == "constrained":
            if self.rc_hat is None or pairwise is None:
                raise ValueError("constrained fit needs rc_hat and pairwise distances")
            w = constrained_estimate(filtered, self.rc_hat, pairwise)
            est = TopologyEstimate(
                w_hat=w,
                method="constrained",
                index_f=filtered.index_f,
                index_h=filtered.index_h,
                rc_used=float(self.rc_hat),
            )
        else:
            raise ValueError(f"unknown method {self.method!r} (rowwise fits from raw traces)")
        self.estimate_ = est
        self.w_hat_ = est.w_hat
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Apply the fitted block to filtered regressor columns."""
        return self.w_hat_ @ np.asarray(x, dtype=float)
