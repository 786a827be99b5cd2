"""Exception types shared across the package."""


class ProtLMError(Exception):
    """Base class for all package errors."""


class DimensionError(ProtLMError, ValueError):
    pass


class ContractError(ProtLMError, ValueError):
    """A precondition of an operation was violated by the caller."""


class EmptySelectionError(ContractError):
    pass


class NonFiniteError(ProtLMError, FloatingPointError):
    pass


class ConfigError(ProtLMError, ValueError):
    pass


class FormatError(ProtLMError, ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DivergenceError(ProtLMError, RuntimeError):
    def __init__(self, step, lr, loss):
        self.step = step
        self.lr = lr
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step} (lr={lr:.3g})")


class CheckpointError(ProtLMError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError, ValueError):
    pass
