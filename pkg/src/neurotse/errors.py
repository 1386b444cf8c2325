"""Exception types shared across the package."""


class NeuroTSEError(Exception):
    pass


class DimensionError(NeuroTSEError, ValueError):
    """Shapes or axes are incompatible."""


class DomainError(NeuroTSEError, ValueError):
    """An argument lies outside an operation's mathematical domain."""


class ContractError(NeuroTSEError, ValueError):
    """A documented precondition was violated."""


class ParameterError(NeuroTSEError, ValueError):
    pass


class InputTooShortError(NeuroTSEError, ValueError):
    pass


class DataError(NeuroTSEError, ValueError):
    """Data on disk or in memory does not match the configuration."""


class ChannelMismatchError(DataError):
    """EEG channel count differs from what the model was configured for."""


class ParseError(NeuroTSEError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(NeuroTSEError):
    pass
