"""Mobile-network formation simulator and local topology inference."""

from .network import (
    NetworkSpec,
    StabilityReport,
    build_perron,
    check_stability,
    formation_input,
    left_perron,
    random_network,
    read_network,
    write_network,
)
from .simulate import (
    ObservationFrame,
    ObserverConfig,
    ScenarioTrace,
    Simulation,
    WorldState,
    load_trace,
    observe,
    obstacle_response,
    run_scenario,
    save_trace,
    step_formation,
)
from .steady import (
    SteadyPattern,
    SteadyPatternEstimator,
    detect_steady_time,
    exact_pattern,
    finalize_pattern,
    identify_leader,
)
from .excite import (
    ExcitationConfig,
    ExcitationSession,
    classify_out_neighbors,
    detect_reaction,
    excitation_strategy,
    range_lower_bound,
    run_excitation_stage,
)
from .topology import (
    FilteredObservations,
    RangeEstimate,
    TopologyEstimate,
    TopologyEstimator,
    build_filtered,
    constrained_estimate,
    ols_estimate,
    rowwise_estimate,
    search_rc,
    truncated_estimate,
)

__version__ = "0.1.0"

from .experiments import (  # noqa: E402  (needs __version__ above)
    ExperimentConfig,
    PipelineResult,
    Scenario,
    StageError,
    bundled_network,
    infer_from_trace,
    run_session,
    run_sweep,
)
