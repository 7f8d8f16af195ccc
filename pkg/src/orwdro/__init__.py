"""Outlier-robust Wasserstein distributionally robust optimization.

Exact robust optimal-transport distances on discrete measures, conic dual
reformulations of the trimmed worst-case problem, worst-case distribution
extraction, robust mean preprocessing, corruption simulators, and a grid
experiment harness.
"""

from .conic import Ball, Box, ConicProgram, FullSpace, SolveReport, solve
from .corruption import (
    CorruptionPlanB,
    CorruptionPlanBPrime,
    RegressionCorruption,
    corrupt_classification,
    corrupt_multiregression,
    corrupt_regression,
    corrupt_setting_b,
    corrupt_setting_b_prime,
)
from .experiments import (
    ExperimentConfig,
    MethodSpec,
    ResultRow,
    bootstrap_quantiles,
    load_config,
    overlay_bounds,
    parse_config,
    parse_method,
    results_csv,
    results_gnuplot,
    run_experiment,
    run_manifest,
    write_outputs,
)
from .losses import (
    AffinePiece,
    LossFamily,
    SeminormReport,
    argmax_piece,
    custom_loss,
    evaluate,
    hinge,
    l1_multiregression,
    load_custom_loss,
    mad_regression,
    pieces_at,
    save_custom_loss,
    seminorms,
)
from .measures import (
    DiscreteMeasure,
    GroundCost,
    TransportMask,
    centered_covariance_cap_check,
    empirical,
    full_mask,
    load_dataset_csv,
    load_weighted_csv,
    save_dataset_csv,
    save_weighted_csv,
    second_moment_about,
)
from .reformulate import (
    AmbiguitySpec,
    DualSolutionI,
    DualSolutionII,
    FitResult,
    G2,
    Gcov,
    InnerSolution,
    RiskBoundInputs,
    WorstCaseSolution,
    build_inner_dual_I,
    build_inner_dual_II,
    build_worst_case_primal,
    closed_form_value_p1,
    cvar,
    eval_inner,
    extract_worst_case,
    joint_fit,
    resolve_z0,
    risk_bound,
    solve_inner,
    solve_worst_case,
)
from .robust_ot import (
    ResilienceQuery,
    gamma_trim_1d,
    resilience_bound,
    rwp_one_sided,
    rwp_two_sided,
    tau_p_exhaustive,
    wasserstein,
)
from .robust_stats import (
    FilterState,
    TrimSpec,
    iterative_filter,
    iterative_filter_mean,
    trimmed_mean,
    tune_sigma,
)

__version__ = "0.1.0"
