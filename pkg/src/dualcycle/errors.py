"""Exception hierarchy shared across the package."""


class DualCycleError(Exception):
    """Base class for all package errors."""

    kind = "error"


class ShapeError(DualCycleError, ValueError):
    kind = "invalid-shape"


class LabelError(DualCycleError, ValueError):
    kind = "invalid-label"


class ContractError(DualCycleError, RuntimeError):
    kind = "contract-violation"


class EmptyDatasetError(DualCycleError, ValueError):
    kind = "empty-dataset"


class ParseError(DualCycleError, ValueError):
    kind = "parse-error"

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class RewardError(DualCycleError, ValueError):
    kind = "reward-error"


class ConfigError(DualCycleError, ValueError):
    kind = "config-error"


class NonFiniteLossError(DualCycleError, FloatingPointError):
    """Raised when a training step produces a NaN/Inf loss.

    ``trace`` carries whatever diagnostic context the trainer had at the time.
    """

    kind = "non-finite-loss"

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or {}
