"""Exception hierarchy shared by every slicefs component.

Each class carries an ``exit_code`` so the CLI can map failures to a stable
process status, and a ``wire_code`` used by the framed protocol's ERR reply.
"""


class SliceFSError(Exception):
    exit_code = 1
    wire_code = 1


class InvalidArgument(SliceFSError):
    exit_code = 8
    wire_code = 2


class NotFound(SliceFSError):
    exit_code = 2
    wire_code = 3


class Exists(SliceFSError):
    exit_code = 3
    wire_code = 4


class NotADirectory(SliceFSError):
    exit_code = 4
    wire_code = 5


class IsADirectory(SliceFSError):
    exit_code = 4
    wire_code = 6


class DirectoryNotEmpty(SliceFSError):
    exit_code = 4
    wire_code = 7


class PermissionDenied(SliceFSError):
    exit_code = 5
    wire_code = 8


class OutOfRange(SliceFSError):
    exit_code = 8
    wire_code = 9


class EntryOutOfBounds(OutOfRange):
    wire_code = 10


class TypeMismatch(SliceFSError):
    wire_code = 11


class IoFailure(SliceFSError):
    exit_code = 6
    wire_code = 12


class MessageDropped(IoFailure):
    """A request was lost before delivery; always safe to resend."""

    wire_code = 13


class WrongServer(IoFailure):
    wire_code = 14


class OutOfSpace(IoFailure):
    wire_code = 15


class ReplicaWriteFailed(IoFailure):
    wire_code = 16


class InsufficientServers(SliceFSError):
    exit_code = 6
    wire_code = 17


class UnknownServer(SliceFSError):
    wire_code = 18


class StaleScan(SliceFSError):
    wire_code = 19


class Conflict(SliceFSError):
    """Optimistic validation failed; nothing was applied."""

    exit_code = 7
    wire_code = 20


class UseAfterClose(SliceFSError):
    wire_code = 21


class TransactionAborted(SliceFSError):
    exit_code = 7
    wire_code = 22


class DivergenceAbort(TransactionAborted):
    """A replayed operation produced an outcome the application had already seen differently."""

    wire_code = 23


class RetryExhausted(TransactionAborted):
    wire_code = 24


class VerificationFailed(SliceFSError):
    exit_code = 9
    wire_code = 25


_BY_WIRE_CODE = {}


def _index(cls):
    _BY_WIRE_CODE[cls.wire_code] = cls
    for sub in cls.__subclasses__():
        _index(sub)


_index(SliceFSError)


def error_for_code(code: int) -> type:
    return _BY_WIRE_CODE.get(code, SliceFSError)
