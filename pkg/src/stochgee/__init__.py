"""GEE estimation with stochastic regressors.

Estimating-function evaluation and root-solving for longitudinal or
clustered data whose regressors are generated from history, plus seeded
martingale-structured simulation and finite-sample diagnostics of the
optimality and strong-consistency conditions.
"""

from .correlation import (
    PseudoLikelihoodState,
    TrueCorrelation,
    WorkingCorrelationSpec,
    corr_beta_derivative,
    pseudo_likelihood_update,
    true_correlation,
    working_corr,
)
from .diagnostics import (
    ConditionReport,
    DiagnosticsParams,
    a1_gap,
    a1_gap_study,
    ball_lattice,
    condition_trajectories,
    consistency_study,
    optimality_study,
    slln_decay_study,
    slln_monitor,
)
from .estimating import (
    ConditionalVariance,
    CorrelationTruth,
    EstimatingFunction,
    OptimalityMatrices,
    Perturbation,
    a2_schedule,
    conditional_variance,
    corr_trajectory,
    det_ratio,
    eval_g,
    eval_g_perturbed,
    integrability_summary,
    jacobian,
    optimality_matrices,
    path_information_increments,
    resolve_estimator,
)
from .exceptions import (
    ConfigError,
    DatasetParseError,
    InconsistentMomentsError,
    InvalidInputError,
    InvalidVarianceError,
    MisspecificationWarning,
    NotPositiveDefiniteError,
    SingularDenominatorError,
    SingularDesignError,
    SingularJacobianError,
    StochGeeError,
    SymmetryViolationError,
    UnsupportedMethodError,
)
from .linalg import (
    EigenExtremes,
    numerical_radius,
    spd_inverse,
    spd_solve,
    spectral_norm,
    sym_eigen_extremes,
    sym_eigenvalues,
    sym_eigh,
    sym_sqrt,
)
from .model import (
    Cluster,
    ConditionalMoments,
    Dataset,
    LinkFunction,
    Parameter,
    conditional_moments,
    dataset_from_arrays,
    get_link,
    link_eval,
    load_dataset,
    write_dataset,
)
from .simulation import (
    GENERATOR_ID,
    RegressorProcess,
    ReplicationResult,
    ScenarioConfig,
    SizeSchedule,
    TruthSpec,
    effective_truth,
    regenerate_regressors,
    replication_seed,
    run_replications,
    simulate_scenario,
    splitmix64,
    substream,
)
from .solver import GeeFit, SolverConfig, default_init, linear_closed_form, solve_gee

__version__ = "0.1.0"
