"""Exception types shared across the package."""


class MMDiffError(Exception):
    """Base class for all package errors."""


class ShapeError(MMDiffError, ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(MMDiffError, FloatingPointError):
    """A NaN or Inf appeared in a computed value."""


class ContractError(MMDiffError, ValueError):
    """A call violated an operation's precondition."""


class ConfigError(MMDiffError, ValueError):
    """Invalid or inconsistent configuration."""


class InputError(MMDiffError, ValueError):
    """Malformed input data (CSV, JSONL, timestamps)."""


class CheckpointError(MMDiffError, ValueError):
    """Checkpoint file is corrupt, truncated, or incompatible."""
