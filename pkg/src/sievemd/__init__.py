"""Sieve minimum-distance estimation and GN-QLR inference for time-series
conditional moment restrictions, with NPIV, NPQIV, and off-policy-evaluation
models and a Monte Carlo study harness."""

from .basis import (
    BasisSpec,
    BSplineBasis1D,
    InstrumentDesign,
    InstrumentProjector,
    bspline_design,
    bspline_eval,
    build_design,
    fit_projector,
)
from .criterion import (
    EPSILON_OPT,
    EstimationResult,
    OptimizationError,
    OptimizerConfig,
    WeightFunction,
    estimate_sigma,
    gd_optimize,
    make_md_loss,
    mhat,
    qn,
    restricted_estimate,
    two_step_estimate,
)
from .data import LagFrame, TimeSeriesDataset, build_lag_frame, load_csv, write_csv
from .functionals import (
    AvgPartialDerivative,
    CorrectedFunctional,
    CorrectionWeights,
    ExpectationFunctional,
    ValueFunctional,
    avg_partial_derivative,
    forward_filtered_residuals,
    gamma_hat,
    phi_hat,
    value_functional,
)
from .inference import (
    CHI2_CRIT_95,
    ConfidenceInterval,
    LongRunVarianceConfig,
    QLRTestResult,
    auto_bandwidth,
    chi2_p,
    invert_ci,
    newey_west,
    qlr_known,
    qlr_unknown,
)
from .mc import (
    DgpConfig,
    ReplicationSummary,
    RlStudyConfig,
    StudyConfig,
    analyze_frame,
    build_study_frame,
    random_mdp,
    report,
    run_replications,
    run_rl_ope,
    run_single,
    simulate_dgp,
    simulate_mdp,
    tabular_q_oracle,
)
from .models import (
    BellmanModel,
    NpivModel,
    NpqivModel,
    RlModel,
    SmoothingConfig,
    TabularEncoding,
    default_tau,
    transition_frame,
)
from .sieves import (
    LinearSieve,
    MlpSieve,
    PenaltyConfig,
    RbfSieve,
    SieveFunction,
    penalty,
    sieve_from_json,
)

__version__ = "0.1.0"
