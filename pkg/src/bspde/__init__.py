"""Completely discrete backward schemes for vector-valued terminal-value
stochastic systems with high-order spatial operators, plus the verification
harness around them: convergence-rate studies and Malliavin-derivative
representation diagnostics on analytically solvable instances."""

from .analysis import (
    ConvergenceFit,
    ErrorReport,
    IdentityReport,
    MalliavinLattice,
    MalliavinSystem,
    build_malliavin_lattices,
    build_malliavin_system,
    check_representation_identity,
    compare_algorithms,
    convergence_study,
    discrete_error,
    increment_regularity,
    reference_step_residual,
    solve_malliavin_system,
)
from .errors import (
    BspdeError,
    CapacityError,
    ConfigError,
    DivergenceError,
    FixedPointDivergenceError,
    InvalidAxisError,
    InvalidDomainError,
    InvalidPartitionError,
    OperatorEvaluationError,
    OrderTooHighError,
    ReferenceRequiredError,
    SingularDesignError,
)
from .grid import (
    DerivativeStack,
    GridField,
    MultiIndexSet,
    NormWeights,
    Partition,
    build_derivative_stack,
    build_partition,
    cinf_truncated_norm,
    ck_norm,
    enumerate_multi_indices,
    first_difference,
    multi_index_key,
    refine_partition,
)
from .model import (
    OperatorArguments,
    ProblemSpec,
    builtin_problem,
    evaluate_diffusion_driver,
    evaluate_driver,
    operator_jacobians,
    probe_lipschitz,
    random_argument_bundles,
    time_homogenize,
)
from .solver import (
    SolutionLattice,
    SolverConfig,
    export_lattice_csv,
    solve,
    solve_algorithm_one,
    solve_algorithm_two,
    terminal_stage,
)
from .stochastics import (
    BrownianPaths,
    EstimatorSpec,
    condexp_nested,
    condexp_regression,
    permute_future_increments,
    simulate_increments,
)

__version__ = "0.1.0"
