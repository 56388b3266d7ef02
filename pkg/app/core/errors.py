class KiwicalError(Exception):
    """Base class for every error raised by the detection pipeline."""


class ImageNotFoundError(KiwicalError, FileNotFoundError):
    pass


class UnsupportedFormatError(KiwicalError):
    pass


class CorruptDataError(KiwicalError):
    pass


class AnnotationParseError(KiwicalError):
    """The document is not valid JSON."""


class SchemaError(KiwicalError, ValueError):
    """The document parsed but does not match the expected structure."""


class InvalidParamError(KiwicalError, ValueError):
    pass


class OutOfBoundsError(KiwicalError, IndexError):
    pass


class ShapeMismatchError(KiwicalError, ValueError):
    pass


class TileTooLargeError(KiwicalError, ValueError):
    pass


class BackendFailureError(KiwicalError):
    pass


class InvalidSpecError(KiwicalError, ValueError):
    pass


class UnreachableError(KiwicalError):
    """A degradation target cannot be met under the lighting constraints."""


class MissingAnnotationError(KiwicalError):
    pass


class IoError(KiwicalError, OSError):
    pass
