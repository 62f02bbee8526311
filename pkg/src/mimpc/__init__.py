"""Mixed-integer nonlinear MPC with a learned quadratic cost-to-go.

Pipeline: generate expert state-action demonstrations offline (full-horizon
mixed-integer MPC or its continuous relaxation), fit a positive-definite
value matrix by minimizing first-order optimality residuals over the
demonstrations, then run a one-step mixed-integer controller online with
the learned terminal cost.
"""

from mimpc.config import ConfigError, RunConfig, load_config
from mimpc.controller import (
    FullHorizonController,
    MyopicController,
    StepResult,
    enumerate_integer_grid,
    full_minmpc_step,
    myopic_step,
    short_horizon_controller,
)
from mimpc.harness import (
    Dataset,
    DemoPair,
    PlantSpec,
    SimConfig,
    SimResult,
    ViolationEvent,
    compute_metrics,
    fishing_plant,
    generate_demonstrations,
    load_demonstrations,
    satellite_plant,
    simulate_closed_loop,
    variable_thrust_efficiency,
)
from mimpc.learner import (
    LearnedValue,
    LearnerOptions,
    ResidualSystem,
    assemble_residuals,
    evaluate_residual_norms,
    project_psd,
    solve_psd_ls,
)
from mimpc.minlp import (
    BnbOptions,
    MinlpResult,
    branch_and_bound,
    sum_up_rounding,
)
from mimpc.models import (
    DiscreteMap,
    ModelSpec,
    get_model,
    lotka_volterra_model,
    rk4_step,
    rk4_step_with_jacobians,
    satellite_model,
)
from mimpc.nlp import SolveOptions, SolveResult, solve_nlp
from mimpc.ocp import (
    FullOcp,
    InfeasibleInputError,
    MyopicOcp,
    OcpSpec,
    build_full_ocp,
    build_myopic_ocp,
    rollout_guess,
)

__version__ = "0.1.0"

__all__ = [
    "BnbOptions",
    "ConfigError",
    "Dataset",
    "DemoPair",
    "DiscreteMap",
    "FullHorizonController",
    "FullOcp",
    "InfeasibleInputError",
    "LearnedValue",
    "LearnerOptions",
    "MinlpResult",
    "ModelSpec",
    "MyopicController",
    "MyopicOcp",
    "OcpSpec",
    "PlantSpec",
    "ResidualSystem",
    "RunConfig",
    "SimConfig",
    "SimResult",
    "SolveOptions",
    "SolveResult",
    "StepResult",
    "ViolationEvent",
    "assemble_residuals",
    "branch_and_bound",
    "build_full_ocp",
    "build_myopic_ocp",
    "compute_metrics",
    "enumerate_integer_grid",
    "evaluate_residual_norms",
    "fishing_plant",
    "full_minmpc_step",
    "generate_demonstrations",
    "get_model",
    "load_config",
    "load_demonstrations",
    "lotka_volterra_model",
    "myopic_step",
    "project_psd",
    "rk4_step",
    "rk4_step_with_jacobians",
    "rollout_guess",
    "satellite_model",
    "satellite_plant",
    "short_horizon_controller",
    "simulate_closed_loop",
    "solve_nlp",
    "solve_psd_ls",
    "sum_up_rounding",
    "variable_thrust_efficiency",
]
