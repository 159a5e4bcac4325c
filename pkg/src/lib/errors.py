"""Exception hierarchy shared by every xavt module."""


class XavtError(Exception):
    """Root of all project errors."""


class ContractError(XavtError, ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Tensor extents are incompatible for the requested operation."""


class ConfigError(XavtError, ValueError):
    """Configuration is invalid or describes an infeasible geometry."""


class NumericError(XavtError, ArithmeticError):
    """Non-finite values reached a kernel that requires finite input."""


class CheckpointError(XavtError, RuntimeError):
    """A binary container could not be read, written or matched to a model."""


class VerificationError(XavtError, RuntimeError):
    """A verification harness (gradient check, determinism check) failed."""
