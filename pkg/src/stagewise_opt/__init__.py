"""Stagewise stochastic optimization for weakly convex problems."""

from .diagnostics import (
    RateFit,
    StationarityReport,
    envelope_value,
    fit_rate,
    moreau_gradient,
    projected_gradient,
    prox_point,
    stage_stationarity,
    weak_convexity_margin,
    weighted_stationarity,
)
from .errors import (
    ConvexityError,
    DimensionError,
    DomainError,
    NumericError,
    ParameterError,
    StagewiseError,
    ToleranceNotMetError,
    UnsupportedDomainError,
    UnsupportedError,
)
from .harness import ExperimentConfig, RunRecord, emit_csv, run_experiment
from .cli import parse_cli
from .problems import (
    FAMILIES,
    Domain,
    OracleMetadata,
    ProblemInstance,
    full_objective,
    make_problem,
    project,
    sample_subgradient,
)
from .solvers import (
    AdaGradState,
    AdmmParams,
    MomentumParams,
    ProxSubproblem,
    SolverReport,
    adagrad_solve,
    adagrad_stop_satisfied,
    admm_solve,
    sgd_solve,
    soft_threshold,
    sum_solve,
)
from .stagewise import (
    BaselineParams,
    RunTrace,
    SamplingDistribution,
    StageConfig,
    baseline_run,
    run_stagewise,
    sampling_probs,
    schedule,
)

__version__ = "0.1.0"
