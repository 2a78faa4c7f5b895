"""Exception types raised across the package."""


class FgError(Exception):
    """Base class for all package errors."""


class DimensionError(FgError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ParameterError(FgError, ValueError):
    """A scalar argument lies outside its admissible range."""


class GraphError(FgError, RuntimeError):
    """The computation graph cannot be evaluated (e.g. unbound placeholder)."""


class ContractError(FgError, RuntimeError):
    """A call violates an operation's precondition."""


class SpecError(FgError, ValueError):
    """A network description is inconsistent."""


class FormatError(FgError, ValueError):
    """A dataset file does not follow its binary format."""


class DomainError(FgError, ValueError):
    """Input values lie outside the domain of a function."""


class NonFiniteError(FgError, FloatingPointError):
    """A loss or gradient became NaN or infinite."""


class UsageError(FgError, ValueError):
    """Bad user-facing configuration (unknown preset, missing field, ...)."""
