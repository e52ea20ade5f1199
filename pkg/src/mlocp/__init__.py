"""Multilevel Monte Carlo for optimal control of elliptic PDEs with random coefficients."""
from .errors import BudgetError, ConfigurationError, ConvergenceError, FormatError
from .fem import NodalField, build_mesh
from .multilevel import LevelPlan, mc_plan, mlmc_plan, multilevel_control, single_level_control
from .ocp import Control, OcpSpec, solve_sao
from .stochastic import StreamKey, gauss_tensor_rule, monte_carlo_rule

__version__ = "0.1.0"

__all__ = [
    "BudgetError", "ConfigurationError", "ConvergenceError", "FormatError", "NodalField",
    "build_mesh", "LevelPlan", "mc_plan", "mlmc_plan", "multilevel_control",
    "single_level_control", "Control", "OcpSpec", "solve_sao", "StreamKey",
    "gauss_tensor_rule", "monte_carlo_rule",
]
