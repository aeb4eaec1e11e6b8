"""Grid solver for stochastic control under expected-loss budget constraints.

The value of interest is recovered as the smallest terminal budget for which
an auxiliary penalized value function hits zero; the auxiliary function is
computed backward on a grid and queried through the level-set helpers.
"""

from .hamiltonian import (
    JetPoint,
    ScalingFns,
    barrier_increments,
    g_matrix_check,
    make_scaling,
    one_vee_scaling,
    strict_supersolution_gap,
    sup_hamiltonian,
    sup_over_sphere_exact,
    unit_scaling,
)
from .levelset import (
    INFEASIBLE,
    CorruptedSliceError,
    LevelSetQuery,
    ValueExtraction,
    extract_value,
    feasibility_report,
    write_feasibility_csv,
)
from .model import (
    ControlSet,
    ConvexityCertificate,
    LossSpec,
    ProblemSpec,
    SdeCoefficients,
    TimeGrid,
    VariantKey,
    build_variant_lattice,
    check_convexity_preconditions,
)
from .montecarlo import (
    ConditionalMeans,
    Estimate,
    PathBatch,
    PolicyFn,
    brute_force_dp,
    closed_form_uncontrolled,
    delta_hedge_policy,
    estimate_J,
    simulate_paths,
    solver_argmin_policy,
    zero_policy,
)
from .solver import (
    GridSpec,
    PolicyGrid,
    ResidualStats,
    SolveResult,
    ValueSlice,
    check_slice_invariants,
    hjb_residual,
    jump_slice,
    read_slice_csv,
    residual_sample_nodes,
    solve_problem,
    terminal_gap_report,
    terminal_slice,
    write_result_csvs,
    write_slice_csv,
)

__version__ = "0.1.0"

__all__ = [
    "ControlSet",
    "ConditionalMeans",
    "ConvexityCertificate",
    "Estimate",
    "GridSpec",
    "INFEASIBLE",
    "JetPoint",
    "LevelSetQuery",
    "LossSpec",
    "PathBatch",
    "PolicyFn",
    "PolicyGrid",
    "ProblemSpec",
    "ResidualStats",
    "ScalingFns",
    "SdeCoefficients",
    "SolveResult",
    "TimeGrid",
    "ValueExtraction",
    "ValueSlice",
    "VariantKey",
    "barrier_increments",
    "brute_force_dp",
    "build_variant_lattice",
    "check_convexity_preconditions",
    "check_slice_invariants",
    "closed_form_uncontrolled",
    "delta_hedge_policy",
    "estimate_J",
    "extract_value",
    "feasibility_report",
    "g_matrix_check",
    "hjb_residual",
    "jump_slice",
    "make_scaling",
    "one_vee_scaling",
    "read_slice_csv",
    "residual_sample_nodes",
    "simulate_paths",
    "solve_problem",
    "solver_argmin_policy",
    "strict_supersolution_gap",
    "sup_hamiltonian",
    "sup_over_sphere_exact",
    "terminal_gap_report",
    "terminal_slice",
    "unit_scaling",
    "write_feasibility_csv",
    "write_result_csvs",
    "write_slice_csv",
    "zero_policy",
]
