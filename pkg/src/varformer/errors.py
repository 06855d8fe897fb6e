"""Exception types shared across the package."""


class VarformerError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(VarformerError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class DomainError(VarformerError, ValueError):
    """Input values fall outside an operation's numeric domain."""


class ContractError(VarformerError, ValueError):
    """A documented precondition was violated by the caller."""


class InfeasibleAlignmentError(ContractError):
    """No valid CTC alignment exists for the given target/input lengths."""


class ConfigError(VarformerError, ValueError):
    """Invalid configuration values."""


class FeatureFileError(VarformerError, ValueError):
    """Base class for feature-file parse failures."""


class MalformedHeaderError(FeatureFileError):
    """Feature file header is missing, has a bad magic, or bad fields."""


class TruncatedFileError(FeatureFileError):
    """Feature file payload ends before the declared contents."""


class DimensionMismatchError(FeatureFileError):
    """Declared dimensions are inconsistent with sample invariants."""


class CheckpointError(VarformerError, ValueError):
    """Checkpoint file is malformed or incompatible."""


class NonFiniteLossError(VarformerError, ArithmeticError):
    """Training produced a non-finite value; carries the first bad node."""

    def __init__(self, message, op=None, node_id=None):
        super().__init__(message)
        self.op = op
        self.node_id = node_id
