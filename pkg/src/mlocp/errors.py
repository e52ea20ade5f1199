"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid mesh, rule, problem or run configuration."""


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before meeting its tolerance.

    Attributes
    ----------
    residual : float
        Last residual reached by the solver.
    context : dict
        Optional extra diagnostics (level, node index, active sets, ...).
    """

    def __init__(self, message, residual=float("nan"), **context):
        super().__init__(message)
        self.residual = residual
        self.context = context


class BudgetError(RuntimeError):
    """A level plan exceeds the configured hard caps."""


class FormatError(ConfigurationError):
    """A control-field file is truncated, has a bad header or wrong size."""
