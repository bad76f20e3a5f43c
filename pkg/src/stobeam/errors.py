"""Exception types shared across the package."""


class StobeamError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(StobeamError, ValueError):
    """An argument violates a documented precondition."""


class ShapeError(StobeamError, ValueError):
    """Mismatched grids or array shapes."""


class PreconditionError(StobeamError, ValueError):
    """Input state violates a boundary-condition or membership precondition."""


class AssemblyError(StobeamError, RuntimeError):
    """Operator assembly failed (singular or ill-conditioned matrix)."""


class NonConvergenceError(StobeamError, RuntimeError):
    """An iteration hit its cap before reaching tolerance."""

    def __init__(self, message, last_defect=None):
        super().__init__(message)
        self.last_defect = last_defect


class BlowupError(StobeamError, RuntimeError):
    """Non-finite values appeared during time stepping."""


class ConfigError(StobeamError, ValueError):
    """Configuration text could not be parsed or violates a constraint."""

    def __init__(self, message, key=None, line=None):
        loc = []
        if key is not None:
            loc.append(f"key '{key}'")
        if line is not None:
            loc.append(f"line {line}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.key = key
        self.line = line
