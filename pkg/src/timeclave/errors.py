"""Exception hierarchy shared by every layer of the store."""


class TimeclaveError(Exception):
    """Base class for all domain errors."""

    #: numeric code used on the wire (ERROR message body)
    code = 255


class InvalidParam(TimeclaveError, ValueError):
    code = 9


class IndexOutOfRange(TimeclaveError, IndexError):
    code = 10


class CapacityExceeded(TimeclaveError):
    """A stash could not absorb the blocks it was asked to hold."""

    code = 11


class EmptyRange(TimeclaveError):
    """Every block covering the query range holds zero data points."""

    code = 1


class UnalignedRange(TimeclaveError):
    code = 2


class LatePoint(TimeclaveError):
    code = 3


class InvalidRange(TimeclaveError):
    code = 4


class NonFiniteValue(TimeclaveError):
    code = 5


class OutOfRetention(TimeclaveError):
    code = 6


class BadMessage(TimeclaveError):
    code = 7


class AuthFailure(TimeclaveError):
    """AEAD tag verification failed (wrong key or tampered frame)."""

    code = 8


class InsufficientSamples(TimeclaveError):
    code = 12


ERRORS_BY_CODE = {
    cls.code: cls
    for cls in (
        EmptyRange, UnalignedRange, LatePoint, InvalidRange, NonFiniteValue,
        OutOfRetention, BadMessage, AuthFailure, InvalidParam, IndexOutOfRange,
        CapacityExceeded, InsufficientSamples,
    )
}
