"""Exception hierarchy shared by every jsms module."""


class JsmsError(Exception):
    """Base class for all library errors."""


class DimensionError(JsmsError, ValueError):
    pass


class PaddingError(JsmsError, ValueError):
    pass


class TapeError(JsmsError, RuntimeError):
    """Backward requested for an operation that the tape never recorded."""


class ConfigurationError(JsmsError, ValueError):
    pass


class TransferError(JsmsError, ValueError):
    pass


class InitError(JsmsError, ValueError):
    pass


class LossError(JsmsError, ValueError):
    pass


class OrchestrationError(JsmsError, RuntimeError):
    """A training stage was started without the state its predecessor produces."""


class GenerationError(JsmsError, RuntimeError):
    pass


class FormatError(JsmsError, ValueError):
    """Malformed file contents. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(FormatError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass
