"""Exception types raised across the pipeline."""


class MdsError(Exception):
    """Base class for all package errors."""


class DimensionError(MdsError, ValueError):
    pass


class RangeError(MdsError, ValueError):
    pass


class ParameterError(MdsError, ValueError):
    pass


class SizeError(MdsError, ValueError):
    pass


class ConfigurationError(MdsError, ValueError):
    pass


class ContractError(MdsError, ValueError):
    pass


class SplitError(MdsError, ValueError):
    pass


class ProtocolError(MdsError, RuntimeError):
    pass


class FormatError(MdsError, ValueError):
    pass


class TrainingDiverged(MdsError, RuntimeError):
    """A loss went non-finite; ``step`` is the global update index."""

    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step
