"""Exception hierarchy shared by every fedxfer module."""


class FedXferError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FedXferError, ValueError):
    pass


class DimensionError(FedXferError, ValueError):
    """Operand shapes do not line up."""


class NumericError(FedXferError, ArithmeticError):
    """A non-finite value appeared where only finite values are allowed."""


class DivergenceError(NumericError):
    def __init__(self, what, iteration=None):
        where = "" if iteration is None else f" at iteration {iteration}"
        super().__init__(
            f"{what} became non-finite{where}; try a smaller learning rate"
        )
        self.iteration = iteration


class LabelError(FedXferError, ValueError):
    pass


class LabelLeakError(LabelError):
    """Labels reached a code path that must only see unlabeled data."""


class InsufficientDataError(FedXferError, ValueError):
    pass


class AlignmentError(FedXferError, ValueError):
    """Paired per-sample inputs differ in length or shape."""


class ProtocolOrderError(FedXferError, RuntimeError):
    """A party step ran before the step it depends on."""


class TransportError(FedXferError, IOError):
    def __init__(self, msg, iteration=None):
        if iteration is not None:
            msg = f"{msg} (iteration {iteration})"
        super().__init__(msg)
        self.iteration = iteration


class ProtocolError(TransportError):
    """Bad magic, unknown message kind or unexpected message."""


class FramingError(TransportError):
    """Frame truncated or its length field is inconsistent."""


class FrameSizeError(TransportError):
    pass


class ChannelTimeout(TransportError):
    pass


class ChannelClosed(TransportError):
    """Peer reset or closed the connection."""


class HandshakeError(TransportError):
    pass


class LoadError(FedXferError, IOError):
    pass


class EncodeError(FedXferError, ValueError):
    pass


class SplitError(FedXferError, ValueError):
    pass


class EvaluationError(FedXferError, ValueError):
    pass


class HarnessError(FedXferError, RuntimeError):
    pass
