"""Sparse-grid combination technique with multivariate extrapolation.

Solves the d-dimensional Poisson problem with homogeneous Dirichlet data by
second-order finite differences on anisotropic tensor grids, combines the
grid solutions with exact rational weights (classical and higher-order
plans), and ships a CLI harness for convergence studies plus exact checks of
the weight identities.
"""

from .grid import (
    GridFunction,
    LevelIndex,
    Point,
    enumerate_nodes,
    mesh_widths,
    multilinear_eval,
    refine,
)
from .pde import (
    DegenerateGridError,
    ProblemSpec,
    SolverConvergenceError,
    SolverReport,
    apply_operator,
    builtin_sine_problem,
    solve_poisson,
)
from .combine import (
    DEFAULT_NODE_BUDGET,
    STUDY_METHODS,
    BudgetExceededError,
    CombinationPlan,
    ConvergenceRecord,
    EvaluationResult,
    GridCache,
    PlanEvaluationError,
    Rational,
    default_eval_point,
    evaluate_plan,
    extrapolation_plan,
    extrapolation_weights,
    hierarchical_surplus_study,
    ho_plan,
    observed_order,
    per_level_mass,
    plan_dof,
    plan_to_dict,
    projected_dof_total,
    richardson_full,
    splitting_extrapolation_2d,
    standard_plan,
    surplus_order,
)
from .verify import (
    IdentityReport,
    SyntheticExpansion,
    check_cancellation_system,
    check_hosg_vs_bl_export,
    check_lemma_cancel,
    check_normalization,
    extrapolated_value,
    model_value,
    random_expansion,
    residual_bound,
    synthetic_expansion_check,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # grid
    "LevelIndex",
    "GridFunction",
    "Point",
    "mesh_widths",
    "refine",
    "enumerate_nodes",
    "multilinear_eval",
    # pde
    "ProblemSpec",
    "SolverReport",
    "DegenerateGridError",
    "SolverConvergenceError",
    "builtin_sine_problem",
    "solve_poisson",
    "apply_operator",
    # combine
    "Rational",
    "CombinationPlan",
    "EvaluationResult",
    "ConvergenceRecord",
    "GridCache",
    "BudgetExceededError",
    "PlanEvaluationError",
    "DEFAULT_NODE_BUDGET",
    "STUDY_METHODS",
    "standard_plan",
    "extrapolation_weights",
    "extrapolation_plan",
    "ho_plan",
    "evaluate_plan",
    "hierarchical_surplus_study",
    "richardson_full",
    "splitting_extrapolation_2d",
    "plan_dof",
    "per_level_mass",
    "plan_to_dict",
    "projected_dof_total",
    "observed_order",
    "surplus_order",
    "default_eval_point",
    # verify
    "IdentityReport",
    "SyntheticExpansion",
    "check_normalization",
    "check_cancellation_system",
    "check_lemma_cancel",
    "model_value",
    "extrapolated_value",
    "synthetic_expansion_check",
    "residual_bound",
    "random_expansion",
    "check_hosg_vs_bl_export",
]
