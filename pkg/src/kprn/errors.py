"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract
    (shape mismatch, wrong rank, out-of-range value)."""


class NumericDomainError(ArithmeticError):
    """A non-finite value entered or left a computation."""


class ParseError(ValueError):
    """A text input (embedding file, dataset line, config) is malformed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(ValueError):
    """Invalid or unsatisfiable configuration."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupt, truncated, or from another format version."""
