"""Penalized policy iteration for stochastic control.

Each iterate freezes the policy at the previous adjoint estimate and solves
the resulting linear-quadratic problem in closed form as a weighted
log-exponential expectation; the package provides the Monte-Carlo and grid
realizations of that scheme, reference solvers, benchmarks, and a batch CLI.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import (
    BasisError,
    EmptyLevelSetError,
    EvaluationError,
    InstabilityError,
    InsufficientDataError,
    OracleUnstableError,
    PenpiaError,
    PositivityError,
    RegistryError,
    SimulationError,
    ValidationError,
)
from .problems import (
    ActionGrid,
    ControlProblem,
    PenaltySchedule,
    check_vol_smallness,
    eval_H_argmax,
    eval_full_H_argmax,
    eval_h,
    make_problem,
    register_problem,
    registered_problems,
)
from .paths import (
    BrownianBatch,
    PathEnsemble,
    TimeGrid,
    derive_seed,
    girsanov_log_weights,
    load_ensemble,
    save_ensemble,
    simulate_controlled_forward,
    simulate_driftless,
)
from .lsmc import (
    BackwardSolution,
    PolicyFields,
    RegressionBasis,
    ZRepresentation,
    compute_policy_fields,
    estimate_Z,
    explicit_iterate_value,
    solve_reference_bsde,
    terminal_functional,
)
from .report import (
    ConvergenceReport,
    CrosscheckResult,
    IterationRecord,
    ReferenceValue,
    fit_rate,
    write_report,
)
from .pde import (
    GridField,
    GridSpec,
    run_pia_pde,
    solve_colehopf_iterate,
    solve_hjb_reference,
    solve_quadratic_iterate,
    solve_vol_hjb_reference,
)
from .bench import (
    BenchmarkSpec,
    OracleRecipe,
    benchmark,
    benchmark_names,
    lin_control,
    lin_iterates,
    lin_value,
    oracle_value,
)
from .driver import (
    SchemeConfig,
    entropic_crosscheck,
    run_experiment,
    run_pia_mc,
    run_pia_vol,
)
from .cli import ExperimentConfig, main

__all__ = [
    "__version__",
    "PenpiaError",
    "ValidationError",
    "RegistryError",
    "EvaluationError",
    "SimulationError",
    "EmptyLevelSetError",
    "BasisError",
    "InstabilityError",
    "PositivityError",
    "OracleUnstableError",
    "InsufficientDataError",
    "ActionGrid",
    "ControlProblem",
    "PenaltySchedule",
    "eval_h",
    "eval_H_argmax",
    "eval_full_H_argmax",
    "check_vol_smallness",
    "register_problem",
    "make_problem",
    "registered_problems",
    "TimeGrid",
    "BrownianBatch",
    "PathEnsemble",
    "simulate_driftless",
    "girsanov_log_weights",
    "simulate_controlled_forward",
    "save_ensemble",
    "load_ensemble",
    "derive_seed",
    "RegressionBasis",
    "ZRepresentation",
    "BackwardSolution",
    "PolicyFields",
    "compute_policy_fields",
    "terminal_functional",
    "explicit_iterate_value",
    "estimate_Z",
    "solve_reference_bsde",
    "ReferenceValue",
    "IterationRecord",
    "CrosscheckResult",
    "ConvergenceReport",
    "fit_rate",
    "write_report",
    "GridSpec",
    "GridField",
    "solve_colehopf_iterate",
    "solve_quadratic_iterate",
    "solve_hjb_reference",
    "solve_vol_hjb_reference",
    "run_pia_pde",
    "BenchmarkSpec",
    "OracleRecipe",
    "benchmark",
    "benchmark_names",
    "lin_value",
    "lin_iterates",
    "lin_control",
    "oracle_value",
    "SchemeConfig",
    "run_experiment",
    "run_pia_mc",
    "run_pia_vol",
    "entropic_crosscheck",
    "ExperimentConfig",
    "main",
]
