"""Exception hierarchy shared across the package."""


class PomaError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(PomaError, ValueError):
    pass


class InvalidCameraError(InvalidArgumentError):
    pass


class BehindCameraError(PomaError, ValueError):
    pass


class EmptySceneError(PomaError, ValueError):
    pass


class GenerationError(PomaError, RuntimeError):
    pass


class ShapeError(PomaError, ValueError):
    pass


class InvalidMaskError(PomaError, ValueError):
    pass


class AdapterError(PomaError, ValueError):
    pass


class ConfigError(PomaError, ValueError):
    pass


class NonFiniteError(PomaError, FloatingPointError):
    pass


class FormatError(PomaError):
    """Bad magic bytes or otherwise unrecognised file content."""


class VersionError(FormatError):
    pass


class CorruptionError(FormatError):
    """File is truncated or internally inconsistent."""
