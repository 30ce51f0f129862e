"""Exception hierarchy shared across the package."""


class SemexpError(Exception):
    """Base class for all package errors."""


class ContractError(SemexpError, ValueError):
    """An argument violated a documented precondition (shape, range, size)."""


class FormatError(SemexpError, ValueError):
    """An image file decoded to something other than a 3-channel picture."""


class NoEntriesError(SemexpError, ValueError):
    """A dataset layout produced no usable entries."""


class BackendError(SemexpError, RuntimeError):
    """A segmenter or vision-language backend could not be loaded or used."""


class NumericError(SemexpError, FloatingPointError):
    """A loss, gradient or parameter became non-finite."""


class IntegrityError(SemexpError, RuntimeError):
    """A checkpoint failed checksum or configuration verification."""
