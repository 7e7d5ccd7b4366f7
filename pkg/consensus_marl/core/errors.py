"""Exception hierarchy shared by every consensus_marl module."""


class ConsensusMarlError(Exception):
    """Base class for all errors raised by consensus_marl."""
    pass


class ConfigurationError(ConsensusMarlError, ValueError):
    """Invalid configuration: dimensions, roles, step sizes or file contents."""
    pass


class AssumptionViolation(ConfigurationError):
    """A runtime-checkable convergence assumption does not hold.

    Attributes:
        assumption: number of the violated assumption (1-7)
    """

    def __init__(self, assumption: int, message: str):
        self.assumption = assumption
        super().__init__(f"Assumption {assumption} violated: {message}")


class GraphError(ConfigurationError):
    """Communication graph or consensus matrix is malformed."""
    pass


class InputError(ConsensusMarlError, ValueError):
    """State/action index or vector argument out of range."""
    pass


class ParameterError(ConsensusMarlError, ValueError):
    """Approximator parameters are non-finite or have the wrong shape."""
    pass


class IrreducibilityError(ConsensusMarlError):
    """Markov chain is reducible or periodic.

    Attributes:
        states: the offending state indices
    """

    def __init__(self, message: str, states=()):
        self.states = tuple(int(s) for s in states)
        super().__init__(message)


class RankError(ConsensusMarlError):
    """A feature matrix or normal matrix is (numerically) rank deficient."""
    pass


class ConvergenceError(ConsensusMarlError):
    """An iterative routine hit its iteration cap.

    Attributes:
        residual: last successive-iterate difference
    """

    def __init__(self, message: str, residual: float):
        self.residual = float(residual)
        super().__init__(f"{message} (residual {residual:.3e})")


class DivergenceError(ConsensusMarlError):
    """Training produced non-finite or unbounded parameters.

    Attributes:
        step: global step index at which divergence was detected
    """

    def __init__(self, message: str, step: int):
        self.step = int(step)
        super().__init__(f"step {step}: {message}")


class ScaleError(ConsensusMarlError):
    """Problem too large for exact enumeration."""
    pass
