"""Finite-horizon portfolio selection with proportional transaction costs
and goal-type (non-concave) terminal payoffs.

The solver marches a penalized variational inequality backward in
time-to-maturity on a transformed (wealth, scaled-position) grid, classifies
buy/sell/no-trade regions from the residuals, and cross-checks values with
closed forms and Monte Carlo strategy rollouts.
"""

from .analytic import (
    AsymptoteQuery,
    RiccatiExplosionError,
    browne_target,
    crra_frictionless_value,
    first_passage_prob,
    riccati_abc,
    terminal_asymptote,
)
from .config import ConfigError, PRESETS, RunConfig, preset, preset_names
from .grid import (
    DegenerateTimeError,
    TransformedGrid,
    inverse_transform,
    refined_z_nodes,
    stretched_v_nodes,
    tau_ladder,
    transform_point,
    uniform_nodes,
)
from .market import CostSpec, MarketModel, ModelCoefficients, Position, model_coefficients
from .mc import McEstimate, StrategySpec, simulate_strategy
from .operators import AssemblyError, BoundaryData, DampingLog, LevelSystem, assemble_level, boundary_and_terminal_data
from .problem import BoundaryKind, ProblemSpec
from .regions import (
    AMBIGUOUS,
    BR,
    EDGE,
    NR,
    REGION_NAMES,
    SR,
    RegionMap,
    classify_regions,
    compare_frictionless,
    export_fields,
    write_plot_script,
)
from .snapshot import SnapshotError, load_solution, save_solution
from .solver import (
    MMatrixReport,
    NewtonError,
    Solution,
    SolveDiagnostics,
    SolverParams,
    StudyRow,
    convergence_study,
    m_matrix_check,
    solve_qvi,
)
from .utility import (
    Utility,
    UtilityValidationError,
    aspiration,
    constant,
    crra,
    goal_reaching,
    make_utility,
    s_shaped,
    validate_assumption,
)

__version__ = "0.1.0"

__all__ = [
    "AMBIGUOUS",
    "AssemblyError",
    "AsymptoteQuery",
    "BR",
    "BoundaryData",
    "BoundaryKind",
    "ConfigError",
    "CostSpec",
    "DampingLog",
    "DegenerateTimeError",
    "EDGE",
    "LevelSystem",
    "MMatrixReport",
    "MarketModel",
    "McEstimate",
    "ModelCoefficients",
    "NR",
    "NewtonError",
    "PRESETS",
    "Position",
    "ProblemSpec",
    "REGION_NAMES",
    "RegionMap",
    "RiccatiExplosionError",
    "RunConfig",
    "SR",
    "SnapshotError",
    "Solution",
    "SolveDiagnostics",
    "SolverParams",
    "StrategySpec",
    "StudyRow",
    "TransformedGrid",
    "Utility",
    "UtilityValidationError",
    "aspiration",
    "assemble_level",
    "boundary_and_terminal_data",
    "browne_target",
    "classify_regions",
    "compare_frictionless",
    "constant",
    "convergence_study",
    "crra",
    "crra_frictionless_value",
    "export_fields",
    "first_passage_prob",
    "goal_reaching",
    "inverse_transform",
    "load_solution",
    "m_matrix_check",
    "make_utility",
    "model_coefficients",
    "preset",
    "preset_names",
    "refined_z_nodes",
    "riccati_abc",
    "s_shaped",
    "save_solution",
    "simulate_strategy",
    "solve_qvi",
    "stretched_v_nodes",
    "tau_ladder",
    "terminal_asymptote",
    "transform_point",
    "uniform_nodes",
    "validate_assumption",
    "write_plot_script",
]
