"""Prebuilt study scenarios, the end-to-end pipeline, and figure sweeps.

This module backs the command line harness. A Scenario bundles a network
with the observation setup it is studied under; the pipeline chains steady
pattern estimation, optional active excitation, range estimation, and the
topology fits, tagging every failure with the stage that produced it; the
sweep generators emit the data behind the four figure tables (fig4..fig7)
as flat CSV rows with per-row seeds so any line can be recomputed.

Noise-free runs are scored against the analytic steady pattern: with
sigma = 0 the epsilon rule degenerates to its floor and the estimated
pattern only differs from the exact one by the residual launch transient,
which would otherwise dominate every sub-1e-9 error column. The estimators
themselves are exercised at sigma > 0.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .excite import ExcitationConfig, ExcitationSession, run_excitation_stage
from .network import NetworkSpec, network_from_text, read_network
from .simulate import ObserverConfig, PassiveTracker, ScenarioTrace, Simulation
from .steady import (
    SteadyPattern,
    SteadyPatternEstimator,
    default_epsilon,
    determine_constant_subset,
    estimate_steady_window,
    exact_pattern,
    finalize_pattern,
)
from .topology import (
    RangeEstimate,
    _padded_fit,
    average_observer_distances,
    average_pairwise_distances,
    build_filtered,
    conservative_sets,
    constrained_estimate,
    empirical_bias_fn,
    estimate_bias_floor,
    ols_estimate,
    search_rc,
    true_block,
    truncated_estimate,
)

OUTDIR_ENV = "SWARMTOPO_OUTDIR"

# default observation setup for the bundled network: launch short of the
# observation slot, settle while the observer closes in, watch from the slot
DEMO_SIGMA = 0.04
DEMO_WINDOW = 50
DEMO_HORIZON = 420
DEMO_LAUNCH = (-3.5, -1.2)
DEMO_JITTER = 0.3
DEMO_OBSERVER = (-3.0, -1.2)
DEMO_SLOT = (0.5, 0.0)
RC_UPPER = 5.5


class StageError(RuntimeError):
    """Pipeline failure tagged with the stage that produced it."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage

    def __str__(self) -> str:
        return f"[{self.stage}] {super().__str__()}"


def _guard(stage, fn, *args, **kwargs):
    """Run one pipeline step, converting failures into labeled errors."""
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (ValueError, RuntimeError, OSError) as exc:
        raise StageError(stage, str(exc)) from exc


# ---------------------------------------------------------------------------
# scenarios


def bundled_network() -> NetworkSpec:
    """The 11-robot network shipped with the package."""
    text = resources.files("swarmtopo").joinpath("data/fig3.net").read_text()
    return network_from_text(text, origin="bundled fig3.net")


def steady_geometry(spec: NetworkSpec) -> np.ndarray:
    """Absolute steady-state positions implied by the commanded shape."""
    return exact_pattern(spec).s_hat + spec.shape[spec.leader]


@dataclass
class Scenario:
    """A network plus the observation setup the experiments run it under.

    Launch options are mutually exclusive in practice: `launch_offset` /
    `launch_jitter` displace the commanded shape, `steady_start` begins on
    the steady track, and `scatter` begins on the steady track with that
    much Gaussian scatter on every non-leader robot (seeded per run).
    `steady_at_launch` marks setups with no transient at all, where the
    steady pattern is read off from frame zero instead of being detected.
    """

    name: str
    spec: NetworkSpec
    observer_range: float
    observer_start: tuple[float, float]
    sigma: float
    horizon: int
    window_len: int
    rc_upper: float = RC_UPPER
    launch_offset: tuple[float, float] | None = None
    launch_jitter: float = 0.0
    scatter: float = 0.0
    steady_start: bool = False
    steady_at_launch: bool = False
    excite_m: int = 200
    excite_targets: tuple[int, ...] | None = None
    excite_window: int | None = None
    query_rows: tuple[int, ...] | None = None

    def observer(self, sigma: float | None = None) -> ObserverConfig:
        return ObserverConfig(
            observation_range=self.observer_range,
            noise_sigma=self.sigma if sigma is None else sigma,
            start=tuple(self.observer_start),
        )

    def _launch_kwargs(self, seed: int) -> dict:
        if self.steady_start or self.scatter:
            init = steady_geometry(self.spec)
            if self.scatter:
                rng = np.random.default_rng(seed + 777_000)
                init = init.copy()
                movers = np.arange(self.spec.n) != self.spec.leader
                init[movers] += self.scatter * rng.standard_normal(
                    (int(movers.sum()), 2)
                )
            return {"init_positions": init}
        kwargs: dict = {}
        if self.launch_offset is not None:
            kwargs["launch_offset"] = self.launch_offset
            kwargs["launch_jitter"] = self.launch_jitter
        return kwargs

    def passive_run(
        self, seed: int, horizon: int | None = None, sigma: float | None = None
    ) -> Simulation:
        """Simulate the scenario with a tracking observer; returns the sim."""
        obs_cfg = self.observer(sigma)
        sim = Simulation(self.spec, obs_cfg, seed=seed, **self._launch_kwargs(seed))
        sim.run(PassiveTracker(obs_cfg), self.horizon if horizon is None else horizon)
        return sim

    def meta(self, seed: int, horizon: int | None = None) -> dict:
        """JSON-safe record sufficient to rebuild and re-run this scenario."""
        fields = asdict(self)
        del fields["spec"]
        fields["seed"] = int(seed)
        fields["horizon"] = int(self.horizon if horizon is None else horizon)
        return json.loads(json.dumps(fields))


def scenario_from_trace(trace: ScenarioTrace) -> tuple[Scenario, int]:
    """Rebuild the scenario a saved trace came from (network rides along)."""
    meta = dict(trace.meta or {})
    if "name" not in meta or "seed" not in meta:
        raise StageError("simulate", "trace carries no scenario metadata")
    seed = int(meta.pop("seed"))
    name = meta.pop("name")
    kwargs = {
        key: tuple(value) if isinstance(value, list) else value
        for key, value in meta.items()
    }
    return Scenario(name=name, spec=trace.spec, **kwargs), seed


def demo_scenario(sigma: float = DEMO_SIGMA) -> Scenario:
    """Bundled network under the default launch-and-watch setup."""
    return Scenario(
        name="demo",
        spec=bundled_network(),
        observer_range=9.0,
        observer_start=DEMO_OBSERVER,
        sigma=sigma,
        horizon=DEMO_HORIZON,
        window_len=DEMO_WINDOW,
        launch_offset=DEMO_LAUNCH,
        launch_jitter=DEMO_JITTER,
    )


def concentration_scenario(sigma: float = 0.1) -> Scenario:
    """Bundled network started on its steady track, watched from the slot."""
    return Scenario(
        name="concentration",
        spec=bundled_network(),
        observer_range=9.0,
        observer_start=DEMO_SLOT,
        sigma=sigma,
        horizon=520,
        window_len=500,
        steady_start=True,
    )


def ladder_clone(
    base: NetworkSpec,
    omega_lo: float = 0.004,
    omega_hi: float = 0.125,
    scale: float = 10.0,
    speed: float = 0.15,
    weight_seed: int = 4242,
) -> NetworkSpec:
    """Clone of a network with geometrically spread row sums at 10x scale.

    Uniform row sums give the step matrix repeated eigenvalues, and the
    launch transient is a Krylov sequence whose rank equals the number of
    distinct eigenvalues reachable from the initial deviation; a degenerate
    spectrum therefore keeps the window regression singular no matter how
    long the window grows. A geometric ladder of row sums spreads one decay
    rate per robot across the whole window grid instead.
    """
    rng = np.random.default_rng(weight_seed)
    adj = np.zeros_like(base.adjacency)
    movers = [i for i in range(base.n) if base.adjacency[i].any()]
    for row_sum, i in zip(np.geomspace(omega_lo, omega_hi, len(movers)), movers):
        js = np.flatnonzero(base.adjacency[i])
        adj[i, js] = rng.dirichlet(np.ones(js.size)) * row_sum
    target = steady_geometry(base) * scale
    prelim = NetworkSpec(
        n=base.n,
        adjacency=adj,
        shape=target.copy(),
        leader=base.leader,
        leader_velocity=np.array([speed, 0.0]),
        control_period=1.0,
        interaction_range=base.interaction_range * 9.0,
        obstacle_range=base.obstacle_range,
    )
    # back-solve the commanded shape so the steady track lands on the target
    lag = exact_pattern(prelim).s_hat - (target - target[prelim.leader])
    spec = replace(prelim, shape=target - lag)
    check = steady_geometry(spec)
    assert np.max(np.abs(check - target)) < 1e-6
    return spec


def convergence_scenario(sigma: float = 0.1) -> Scenario:
    """Slow ladder-weighted clone of the bundled network, watched up close.

    The wide launch scatter keeps every decay mode excited through the
    largest regression window; the observation range is swollen so even
    4-sigma launches stay visible from the first frame.
    """
    return Scenario(
        name="convergence",
        spec=ladder_clone(bundled_network()),
        observer_range=500.0,
        observer_start=(5.0, 0.0),
        sigma=sigma,
        horizon=2600,
        window_len=300,
        scatter=80.0,
        query_rows=(6, 7, 8, 9, 10),
    )


def excitation_network() -> NetworkSpec:
    """Four robots exercising every excitation outcome at once.

    Robot 1 is weakly pinned (it drags far under pursuit and returns
    slowly), robot 2 strongly follows 1 (the detectable out-neighbor), and
    robot 3 is anchored to the static leader (the false-positive canary).
    """
    adj = np.zeros((4, 4))
    adj[1, 3] = 0.015
    adj[2, 1] = 0.50
    adj[3, 0] = 0.40
    shape = np.array([[6.0, 8.0], [4.0, 0.0], [4.0, -3.2], [6.0, 4.3]])
    return NetworkSpec(
        n=4,
        adjacency=adj,
        shape=shape,
        leader=0,
        leader_velocity=np.zeros(2),
        control_period=1.0,
        interaction_range=5.0,
        obstacle_range=1.5,
    )


def excitation_scenario(sigma: float = 0.05) -> Scenario:
    # observation range 12 covers the theoretical pursuit drag (the pinned
    # target can be pushed E/w with washout w = 0.015 before it saturates),
    # so listeners stay classifiable at the closing frame
    return Scenario(
        name="excitation",
        spec=excitation_network(),
        observer_range=12.0,
        observer_start=(1.8, 0.3),
        sigma=sigma,
        horizon=505,
        window_len=500,
        steady_at_launch=True,
        excite_targets=(1,),
    )


def chain_network() -> NetworkSpec:
    """Colinear chain with one regressor-inclusion cliff just under 5.

    The 2 <- 1 edge spans 4.99 of the 5.0 interaction range, so any assumed
    range below the cliff drops a real regressor and the bias landscape
    jumps; everything above it stays at the noise floor.
    """
    adj = np.zeros((4, 4))
    adj[1, 0] = 0.30
    adj[2, 1] = 0.25
    adj[3, 2] = 0.40
    shape = np.array([[12.46, 0.0], [8.46, 0.0], [3.47, 0.0], [4.9, 3.1]])
    return NetworkSpec(
        n=4,
        adjacency=adj,
        shape=shape,
        leader=0,
        leader_velocity=np.zeros(2),
        control_period=1.0,
        interaction_range=5.0,
        obstacle_range=1.5,
    )


def range_scenario() -> Scenario:
    return Scenario(
        name="range",
        spec=chain_network(),
        observer_range=9.0,
        observer_start=(-0.7, -0.3),
        sigma=0.0,
        horizon=500,
        window_len=50,
        launch_offset=(-0.7, -0.3),
        excite_window=500,
    )


SCENARIO_BUILDERS = {
    "demo": demo_scenario,
    "concentration": concentration_scenario,
    "convergence": convergence_scenario,
    "excitation": excitation_scenario,
    "range": lambda sigma=None: range_scenario(),
}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """Shared experiment knobs behind the command line."""

    network: str | None = None
    scenario: str = "demo"
    sigma: float | None = None
    sigma_grid: tuple[float, ...] = (0.05, 0.1)
    ks_grid: tuple[int, ...] = (40, 80, 160, 260)
    trials: int = 25
    seed: int = 100
    epsilon_factor: float = 0.8
    window_len: int | None = None
    concentration_len: int = 500
    m_excite: int = 200
    ks: int | None = None
    rc_hat: float | None = None
    rc_upper: float = RC_UPPER
    horizon: int | None = None
    outdir: str | None = None

    def __post_init__(self) -> None:
        if len(self.sigma_grid) == 0:
            raise ValueError("sigma grid must not be empty")
        if len(self.ks_grid) == 0:
            raise ValueError("observation-count grid must not be empty")
        if self.trials < 1:
            raise ValueError(f"trial count must be >= 1, got {self.trials}")
        if any(s < 0 for s in self.sigma_grid):
            raise ValueError("sigma grid entries must be non-negative")
        if any(k < 1 for k in self.ks_grid):
            raise ValueError("observation-count grid entries must be positive")
        if self.epsilon_factor <= 0:
            raise ValueError("epsilon factor must be positive")

    def epsilon(self, sigma: float) -> float:
        return default_epsilon(sigma) if self.epsilon_factor == 0.8 else max(
            self.epsilon_factor * sigma, 1e-6
        )

    def resolve_outdir(self) -> Path:
        return Path(self.outdir or os.environ.get(OUTDIR_ENV, "."))

    def build_scenario(self) -> Scenario:
        if self.network is not None:
            spec = _guard("network", read_network, self.network)
            scn = demo_scenario()
            scn = replace(scn, name=Path(self.network).stem, spec=spec)
        else:
            builder = SCENARIO_BUILDERS.get(self.scenario)
            if builder is None:
                raise StageError(
                    "network",
                    f"unknown scenario {self.scenario!r}; "
                    f"choices: {sorted(SCENARIO_BUILDERS)}",
                )
            scn = builder()
        if self.sigma is not None:
            scn = replace(scn, sigma=self.sigma)
        if self.window_len is not None:
            scn = replace(scn, window_len=self.window_len)
        if self.horizon is not None:
            scn = replace(scn, horizon=self.horizon)
        return replace(scn, rc_upper=self.rc_upper, excite_m=self.m_excite)


# ---------------------------------------------------------------------------
# the pipeline


@dataclass
class PipelineResult:
    """Everything one inference run produced, stage by stage."""

    pattern: SteadyPattern
    members: np.ndarray
    k_steady: int
    k_reg: int
    epsilon: float
    rc_hat: float
    v_h: np.ndarray
    v_h0: np.ndarray
    v_f0: np.ndarray
    w_hat: np.ndarray  # range-shrink fit, rows v_h0, columns members
    w_refined: np.ndarray  # constrained fit, rows v_h, columns members
    cond: float
    session: ExcitationSession | None = None
    range_estimate: RangeEstimate | None = None
    errors: dict | None = None  # vs the true sub-blocks (spec rides along)

    def manifest(self) -> dict:
        out = {
            "k_steady": int(self.k_steady),
            "k_reg": int(self.k_reg),
            "epsilon": float(self.epsilon),
            "rc_hat": float(self.rc_hat),
            "members": [int(i) for i in self.members],
            "v_h": [int(i) for i in self.v_h],
            "v_h0": [int(i) for i in self.v_h0],
            "v_f0": [int(i) for i in self.v_f0],
            "cond": float(self.cond),
            "errors": {k: float(v) for k, v in (self.errors or {}).items()},
        }
        if self.session is not None:
            out["excitation"] = {
                "target": int(self.session.target),
                "k_excite": int(self.session.k_excite),
                "r_o_hat": float(self.session.r_o_hat),
                "rc_lower": float(self.session.rc_lower),
                "indicators": {
                    str(k): (None if v is None else int(v))
                    for k, v in self.session.indicators.items()
                },
            }
        if self.range_estimate is not None:
            out["range_search"] = {
                "rc_lb": float(self.range_estimate.rc_lb),
                "rc_ub": float(self.range_estimate.rc_ub),
                "rc_hat": float(self.range_estimate.rc_hat),
            }
        return out


def _steady_stage(
    scenario: Scenario,
    trace: ScenarioTrace,
    epsilon: float | None = None,
) -> tuple[SteadyPattern, np.ndarray, int]:
    if scenario.steady_at_launch:
        members, _ = determine_constant_subset(trace.visible)
        if members.size == 0:
            raise StageError("steady", "no robot stays visible to the end")
        eps = default_epsilon(scenario.sigma) if epsilon is None else epsilon
        k_end = min(scenario.window_len, trace.horizon)
        pattern = _guard(
            "steady", finalize_pattern, trace.readings, 0, k_end, members, eps
        )
        return pattern, members, 0
    est = SteadyPatternEstimator(
        window_len=scenario.window_len, sigma=scenario.sigma, epsilon=epsilon
    )
    est = _guard("steady", est.fit, trace.readings, trace.visible)
    return est.pattern_, est.members_, est.k_steady_


def _topology_stage(
    trace: ScenarioTrace,
    pattern: SteadyPattern,
    members: np.ndarray,
    k_steady: int,
    rc_hat: float,
    rc_upper: float,
    observer_range: float,
    window_len: int,
    k_reg: int | None = None,
    session: ExcitationSession | None = None,
    range_estimate: RangeEstimate | None = None,
) -> PipelineResult:
    k = k_steady if k_reg is None else k_reg
    k = max(k, members.size + 1)
    filtered = _guard("topology", build_filtered, trace.readings, pattern, members, k)
    d_obs = average_observer_distances(trace.readings, trace.observer, window_len)
    v_h = members[d_obs[members] <= observer_range - rc_hat]
    v_h0, v_f0 = _guard(
        "topology", conservative_sets, d_obs, members, observer_range, rc_upper, rc_hat
    )
    keep_f = np.isin(filtered.index_f, v_f0)
    keep_h = np.isin(filtered.index_h, v_h0)
    w_core, cond = _guard(
        "topology", ols_estimate, filtered.x[keep_f], filtered.y[keep_h]
    )
    w_hat = np.zeros((v_h0.size, members.size))
    w_hat[:, np.isin(members, v_f0)] = w_core
    errors = {
        "range_shrink": float(
            np.linalg.norm(w_hat - true_block(trace.spec, v_h0, members))
        )
    }
    w_refined = np.zeros((v_h.size, members.size))
    if v_h.size:
        filtered_vh = _guard(
            "topology", build_filtered, trace.readings, pattern, v_h, k
        )
        pairwise = average_pairwise_distances(trace.readings, window_len)
        w_refined = _guard(
            "topology", constrained_estimate, filtered_vh, rc_hat, pairwise
        )
        errors["constrained"] = float(
            np.linalg.norm(w_refined - true_block(trace.spec, v_h, members))
        )
    return PipelineResult(
        pattern=pattern,
        members=members,
        k_steady=k_steady,
        k_reg=k,
        epsilon=pattern.epsilon,
        rc_hat=float(rc_hat),
        v_h=v_h,
        v_h0=v_h0,
        v_f0=v_f0,
        w_hat=w_hat,
        w_refined=w_refined,
        cond=float(cond),
        session=session,
        range_estimate=range_estimate,
        errors=errors,
    )


def infer_from_trace(
    trace: ScenarioTrace,
    *,
    window_len: int | None = None,
    sigma: float | None = None,
    epsilon: float | None = None,
    rc_hat: float | None = None,
    rc_upper: float | None = None,
    k_reg: int | None = None,
) -> PipelineResult:
    """Run the passive pipeline on a recorded trace.

    Without an excitation session there is no range lower bound, so the
    assumed range falls back to the known-safe upper bound unless an
    override is supplied.
    """
    meta = dict(trace.meta or {})
    scenario_fields = {
        "observer_range": meta.get("observer_range", 9.0),
        "window_len": window_len or meta.get("window_len", DEMO_WINDOW),
        "sigma": meta.get("sigma", DEMO_SIGMA) if sigma is None else sigma,
        "rc_upper": meta.get("rc_upper", RC_UPPER) if rc_upper is None else rc_upper,
        "steady_at_launch": meta.get("steady_at_launch", False),
    }
    scn = Scenario(
        name=meta.get("name", "trace"),
        spec=trace.spec,
        observer_start=(0.0, 0.0),
        horizon=trace.horizon,
        **scenario_fields,
    )
    pattern, members, k_steady = _steady_stage(scn, trace, epsilon=epsilon)
    rc = scn.rc_upper if rc_hat is None else rc_hat
    return _topology_stage(
        trace,
        pattern,
        members,
        k_steady,
        rc,
        scn.rc_upper,
        scn.observer_range,
        scn.window_len,
        k_reg=k_reg,
    )


def simulate_trace(
    scenario: Scenario, seed: int, horizon: int | None = None
) -> tuple[ScenarioTrace, Simulation]:
    """Passive run returning the trace with its rebuild metadata attached."""
    sim = _guard("simulate", scenario.passive_run, seed, horizon)
    return sim.trace(meta=scenario.meta(seed, horizon)), sim


def run_session(
    scenario: Scenario,
    seed: int,
    *,
    excite: bool = True,
    fit_topology: bool = True,
    rc_hat: float | None = None,
    k_reg: int | None = None,
    horizon: int | None = None,
) -> tuple[PipelineResult | None, Simulation]:
    """Live pipeline: simulate, estimate the pattern, optionally excite.

    Excitation runs on the live simulation (the pursuit is closed loop);
    the topology fit afterwards uses only the passive segment, where the
    steady-state identity holds. With `fit_topology` False the result
    carries the excitation outcome alone (useful for scenarios that launch
    already steady, whose transient-free traces cannot support a fit).
    """
    trace, sim = simulate_trace(scenario, seed, horizon)
    pattern, members, k_steady = _steady_stage(scenario, trace)
    session = None
    range_estimate = None
    rc = rc_hat
    if excite:
        excite_cfg = None
        if scenario.excite_window is not None:
            excite_cfg = ExcitationConfig(window_len=scenario.excite_window)
        session = _guard(
            "excite",
            run_excitation_stage,
            sim,
            pattern,
            m=scenario.excite_m,
            targets=scenario.excite_targets,
            config=excite_cfg,
        )
        if rc is None and fit_topology:
            k = k_steady if k_reg is None else k_reg
            k = max(k, members.size + 1)
            filtered = _guard(
                "range", build_filtered, trace.readings, pattern, members, k
            )
            d_obs = average_observer_distances(
                trace.readings, trace.observer, scenario.window_len
            )
            f_e = _guard(
                "range",
                empirical_bias_fn,
                filtered,
                d_obs,
                scenario.observer_range,
                scenario.rc_upper,
            )
            eps_w = _guard(
                "range",
                estimate_bias_floor,
                filtered,
                d_obs,
                scenario.observer_range,
                scenario.rc_upper,
            )
            range_estimate = _guard(
                "range", search_rc, session.rc_lower, scenario.rc_upper, eps_w, 3, f_e
            )
            rc = range_estimate.rc_hat
    if not fit_topology:
        result = None
        if session is not None:
            result = PipelineResult(
                pattern=pattern,
                members=members,
                k_steady=k_steady,
                k_reg=0,
                epsilon=pattern.epsilon,
                rc_hat=float(rc if rc is not None else scenario.rc_upper),
                v_h=np.array([], dtype=int),
                v_h0=np.array([], dtype=int),
                v_f0=np.array([], dtype=int),
                w_hat=np.zeros((0, members.size)),
                w_refined=np.zeros((0, members.size)),
                cond=0.0,
                session=session,
                range_estimate=range_estimate,
            )
        return result, sim
    result = _topology_stage(
        trace,
        pattern,
        members,
        k_steady,
        rc if rc is not None else scenario.rc_upper,
        scenario.rc_upper,
        scenario.observer_range,
        scenario.window_len,
        k_reg=k_reg,
        session=session,
        range_estimate=range_estimate,
    )
    return result, sim


# ---------------------------------------------------------------------------
# trial helpers shared by the sweeps and the acceptance checks


def _trial_pattern(scenario, trace):
    """Estimated pattern at sigma > 0; the analytic one on noise-free runs."""
    if scenario.sigma == 0:
        members, _ = determine_constant_subset(trace.visible)
        leader = scenario.spec.leader if scenario.spec.leader in members else None
        pattern = replace(
            exact_pattern(scenario.spec), members=members, leader=leader
        )
        return pattern, members
    est = SteadyPatternEstimator(
        window_len=scenario.window_len, sigma=scenario.sigma
    ).fit(trace.readings, trace.visible)
    return est.pattern_, est.members_


def speed_error_base(
    scenario: Scenario, seed: int, horizon: int
) -> tuple[ScenarioTrace, np.ndarray, np.ndarray]:
    """Noise-free reference run for re-noised speed-estimate trials.

    Reading noise never feeds back into the motion, so fresh noise on top
    of one noise-free trace is distributionally identical to a fresh run.
    """
    trace = scenario.passive_run(seed, horizon=horizon, sigma=0.0).trace()
    members, _ = determine_constant_subset(trace.visible)
    return trace, members, exact_pattern(scenario.spec).c_hat


def speed_errors(
    base: ScenarioTrace,
    members: np.ndarray,
    c_true: np.ndarray,
    sigma: float,
    k_grid,
    window_len: int,
    trials: int,
    seed: int,
) -> np.ndarray:
    """|c_hat - c| per (trial, window start) on re-noised readings."""
    errs = np.empty((trials, len(k_grid)))
    for t in range(trials):
        rng = np.random.default_rng(seed + t)
        noisy = base.readings + sigma * rng.standard_normal(base.readings.shape)
        for j, k in enumerate(k_grid):
            c_hat, _ = estimate_steady_window(noisy, int(k), window_len, members)
            errs[t, j] = float(np.hypot(*(c_hat - c_true)))
    return errs


def range_curve_errors(
    scenario: Scenario,
    seed: int,
    k_s: int,
    rc_grid,
    rc_upper_curve: float = 4.5,
) -> list[float]:
    """One trial of the interior-fit error as the assumed range varies."""
    trace = scenario.passive_run(seed).trace()
    pattern, members = _trial_pattern(scenario, trace)
    filtered = build_filtered(trace.readings, pattern, members, k_s)
    d_obs = average_observer_distances(
        trace.readings, trace.observer, scenario.window_len
    )
    errs = []
    for rc in rc_grid:
        v_h0, v_f0 = conservative_sets(
            d_obs, members, scenario.observer_range, rc_upper_curve, float(rc)
        )
        w = _padded_fit(filtered, v_h0, v_f0)
        errs.append(float(np.linalg.norm(w - true_block(scenario.spec, v_h0, members))))
    return errs


def window_error_trial(scenario: Scenario, seed: int, ks_grid) -> list[float]:
    """Full-information fit error per window length (one run, all windows)."""
    trace = scenario.passive_run(seed).trace()
    spec = scenario.spec
    members = np.arange(spec.n)
    if scenario.sigma == 0:
        pattern = replace(exact_pattern(spec), members=members)
    else:
        pattern = finalize_pattern(
            trace.readings,
            trace.horizon - scenario.window_len,
            trace.horizon,
            members,
            default_epsilon(scenario.sigma),
        )
    rows = np.asarray(scenario.query_rows if scenario.query_rows else members)
    truth = true_block(spec, rows, members)
    errs = []
    for k_s in ks_grid:
        filtered = build_filtered(trace.readings, pattern, rows, int(k_s))
        w, _ = ols_estimate(filtered.x, filtered.y)
        errs.append(float(np.linalg.norm(w - truth)))
    return errs


def refinement_trial(
    scenario: Scenario, seed: int, k_s: int, rc_hat: float
) -> tuple[float, float]:
    """Constrained vs plain OLS error on the observable-interior rows."""
    trace = scenario.passive_run(seed).trace()
    pattern, members = _trial_pattern(scenario, trace)
    d_obs = average_observer_distances(
        trace.readings, trace.observer, scenario.window_len
    )
    v_h = members[d_obs[members] <= scenario.observer_range - rc_hat]
    filtered = build_filtered(trace.readings, pattern, v_h, k_s)
    pairwise = average_pairwise_distances(trace.readings, scenario.window_len)
    w_c = constrained_estimate(filtered, rc_hat, pairwise)
    w_o, _ = ols_estimate(filtered.x, filtered.y)
    truth = true_block(scenario.spec, v_h, members)
    return (
        float(np.linalg.norm(w_c - truth)),
        float(np.linalg.norm(w_o - truth)),
    )


def methods_trial(
    scenario: Scenario, seed: int, k_s: int, rc_hat: float
) -> dict[str, float]:
    """Range-shrink OLS vs constrained vs the truncated baseline.

    The truncated baseline regresses every visible row on the visible
    regressors alone, as if nothing outside the observation range existed;
    its error is taken over its whole estimated block, which includes the
    rows whose in-neighbors are invisible (the structural bias). The
    range-shrink and constrained errors are taken over the rows each one
    actually resolves.
    """
    trace = scenario.passive_run(seed).trace()
    pattern, members = _trial_pattern(scenario, trace)
    d_obs = average_observer_distances(
        trace.readings, trace.observer, scenario.window_len
    )
    filtered = build_filtered(trace.readings, pattern, members, k_s)
    v_h0, v_f0 = conservative_sets(
        d_obs, members, scenario.observer_range, scenario.rc_upper, rc_hat
    )
    w_rs = _padded_fit(filtered, v_h0, v_f0)
    err_rs = float(np.linalg.norm(w_rs - true_block(scenario.spec, v_h0, members)))
    v_h = members[d_obs[members] <= scenario.observer_range - rc_hat]
    filtered_vh = build_filtered(trace.readings, pattern, v_h, k_s)
    pairwise = average_pairwise_distances(trace.readings, scenario.window_len)
    w_c = constrained_estimate(filtered_vh, rc_hat, pairwise)
    err_c = float(np.linalg.norm(w_c - true_block(scenario.spec, v_h, members)))
    w_t, _ = truncated_estimate(filtered.x, filtered.y)
    err_t = float(np.linalg.norm(w_t - true_block(scenario.spec, members, members)))
    return {"range_shrink": err_rs, "constrained": err_c, "truncated": err_t}


# ---------------------------------------------------------------------------
# figure sweeps


FIG4_COLUMNS = (
    "sigma", "window_len", "k", "trials", "median_err", "q1_err", "q3_err",
    "threshold", "seed",
)
FIG5_COLUMNS = (
    "sigma", "rc_hat", "k_s", "trials", "median_err", "q1_err", "q3_err", "seed",
)
FIG6_COLUMNS = (
    "panel", "method", "sigma", "k_s", "rc_hat", "trials", "median_err",
    "q1_err", "q3_err", "seed",
)
FIG7_COLUMNS = (
    "method", "sigma", "k_s", "rc_hat", "trials", "median_err", "q1_err",
    "q3_err", "seed",
)

FIG4_K_GRID = (0, 50, 100, 150, 200, 300)
FIG5_RC_GRID = tuple(np.linspace(1.0, 9.0, 8))
FIG5_KS = 100
REFINE_KS = 200
REFINE_RC = 4.5


def _quartiles(values: np.ndarray) -> tuple[float, float, float]:
    q1, med, q3 = np.percentile(np.asarray(values, dtype=float), (25, 50, 75))
    return float(med), float(q1), float(q3)


def sweep_speed(config: ExperimentConfig):
    """fig4: windowed speed-estimate error series with the steadiness bar."""
    scn = config.build_scenario()
    window = config.concentration_len
    horizon = max(FIG4_K_GRID) + window
    base, members, c_true = speed_error_base(scn, config.seed, horizon)
    for si, sigma in enumerate(config.sigma_grid):
        seed0 = config.seed + 1000 * si
        errs = speed_errors(
            base, members, c_true, sigma, FIG4_K_GRID, window,
            config.trials, seed0,
        )
        threshold = 8.0 * config.epsilon(sigma) / np.sqrt(window)
        rows = []
        for j, k in enumerate(FIG4_K_GRID):
            med, q1, q3 = _quartiles(errs[:, j])
            rows.append({
                "sigma": float(sigma), "window_len": window, "k": int(k),
                "trials": config.trials, "median_err": med, "q1_err": q1,
                "q3_err": q3, "threshold": float(threshold), "seed": seed0,
            })
        yield rows


def sweep_range_curve(config: ExperimentConfig):
    """fig5: interior-fit error against the assumed interaction range."""
    base = config.build_scenario()
    for sigma in config.sigma_grid:
        scn = replace(base, sigma=float(sigma))
        per_rc = np.array([
            range_curve_errors(scn, config.seed + t, FIG5_KS, FIG5_RC_GRID)
            for t in range(config.trials)
        ])
        rows = []
        for j, rc in enumerate(FIG5_RC_GRID):
            med, q1, q3 = _quartiles(per_rc[:, j])
            rows.append({
                "sigma": float(sigma), "rc_hat": float(rc), "k_s": FIG5_KS,
                "trials": config.trials, "median_err": med, "q1_err": q1,
                "q3_err": q3, "seed": config.seed,
            })
        yield rows


def sweep_window(config: ExperimentConfig):
    """fig6: error vs window length, plus the constrained-vs-OLS panel."""
    conv = convergence_scenario()
    for sigma in config.sigma_grid:
        scn = replace(conv, sigma=float(sigma))
        errs = np.array([
            window_error_trial(scn, config.seed + t, config.ks_grid)
            for t in range(config.trials)
        ])
        rows = []
        for j, k_s in enumerate(config.ks_grid):
            med, q1, q3 = _quartiles(errs[:, j])
            rows.append({
                "panel": "window", "method": "ols", "sigma": float(sigma),
                "k_s": int(k_s), "rc_hat": "", "trials": config.trials,
                "median_err": med, "q1_err": q1, "q3_err": q3,
                "seed": config.seed,
            })
        yield rows
    demo = config.build_scenario()
    for sigma in config.sigma_grid:
        scn = replace(demo, sigma=float(sigma))
        pairs = np.array([
            refinement_trial(scn, config.seed + t, REFINE_KS, REFINE_RC)
            for t in range(config.trials)
        ])
        rows = []
        for method, col in (("constrained", 0), ("ols", 1)):
            med, q1, q3 = _quartiles(pairs[:, col])
            rows.append({
                "panel": "refinement", "method": method, "sigma": float(sigma),
                "k_s": REFINE_KS, "rc_hat": REFINE_RC, "trials": config.trials,
                "median_err": med, "q1_err": q1, "q3_err": q3,
                "seed": config.seed,
            })
        yield rows


def sweep_methods(config: ExperimentConfig):
    """fig7: range-shrink OLS vs constrained vs the truncated baseline."""
    base = config.build_scenario()
    rc = REFINE_RC if config.rc_hat is None else config.rc_hat
    for sigma in config.sigma_grid:
        scn = replace(base, sigma=float(sigma))
        trials = [
            methods_trial(scn, config.seed + t, REFINE_KS, rc)
            for t in range(config.trials)
        ]
        rows = []
        for method in ("range_shrink", "constrained", "truncated"):
            med, q1, q3 = _quartiles([tr[method] for tr in trials])
            rows.append({
                "method": method, "sigma": float(sigma), "k_s": REFINE_KS,
                "rc_hat": float(rc), "trials": config.trials,
                "median_err": med, "q1_err": q1, "q3_err": q3,
                "seed": config.seed,
            })
        yield rows


FIGURES = {
    "fig4.csv": (FIG4_COLUMNS, sweep_speed),
    "fig5.csv": (FIG5_COLUMNS, sweep_range_curve),
    "fig6.csv": (FIG6_COLUMNS, sweep_window),
    "fig7.csv": (FIG7_COLUMNS, sweep_methods),
}


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_sweep(config: ExperimentConfig, outdir: Path | None = None) -> dict:
    """Write fig4.csv..fig7.csv plus a manifest; flushes per grid point."""
    outdir = Path(outdir) if outdir is not None else config.resolve_outdir()
    outdir.mkdir(parents=True, exist_ok=True)
    counts = {}
    for fname, (columns, generator) in FIGURES.items():
        path = outdir / fname
        written = 0
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(columns) + "\n")
            try:
                for rows in generator(config):
                    for row in rows:
                        fh.write(",".join(_fmt(row[c]) for c in columns) + "\n")
                        written += 1
                    fh.flush()
            except StageError:
                raise
            except (ValueError, RuntimeError, OSError) as exc:
                raise StageError("sweep", f"{fname}: {exc}") from exc
        counts[fname] = written
    return counts


# ---------------------------------------------------------------------------
# artifact writers shared with the command line


def write_manifest(path, command: str, config: ExperimentConfig, extra: dict,
                   artifacts: list[str]) -> None:
    payload = {
        "command": command,
        "version": __version__,
        "config": json.loads(json.dumps(asdict(config))),
        "artifacts": sorted(artifacts),
    }
    payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_estimate_csv(path, w: np.ndarray, row_ids, col_ids) -> None:
    """Weight-matrix block with robot ids on both axes."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("robot," + ",".join(str(int(j)) for j in col_ids) + "\n")
        for i, row in zip(row_ids, np.atleast_2d(w)):
            fh.write(str(int(i)) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def write_session_csv(path, session: ExcitationSession) -> None:
    """Per-listener excitation outcome plus the session-level numbers."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("listener,indicator,target,k_excite,m,r_o_hat,rc_lower\n")
        for listener in sorted(session.indicators):
            flag = session.indicators[listener]
            fh.write(
                f"{int(listener)},{'' if flag is None else int(flag)},"
                f"{int(session.target)},{int(session.k_excite)},{int(session.m)},"
                f"{session.r_o_hat!r},{session.rc_lower!r}\n"
            )
