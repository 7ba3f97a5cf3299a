"""Exception hierarchy.

The CLI maps these families onto exit codes: :class:`DataError` -> 3,
:class:`ModelError` -> 4.
"""


class LusError(Exception):
    """Base class for every error raised by this package."""


class DataError(LusError):
    """Bad input data: manifests, images, masks, fold plans."""


class ManifestError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ImageFormatError(DataError):
    pass


class ModelError(LusError):
    """Model graph or weight problems."""


class ShapeError(ModelError, ValueError):
    """Tensor or parameter dimensions do not fit together."""


class WeightFormatError(ModelError):
    """An LSW1 archive could not be decoded."""


class BadMagicError(WeightFormatError):
    pass


class ChecksumError(WeightFormatError):
    pass


class TruncatedError(WeightFormatError):
    pass


class DuplicateNameError(WeightFormatError):
    pass


class RenameCollisionError(ModelError, KeyError):
    pass
