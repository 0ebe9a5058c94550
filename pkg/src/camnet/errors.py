"""Exception types shared across the package."""


class CamnetError(Exception):
    """Base class for all package errors."""


class ShapeError(CamnetError, ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ConfigError(CamnetError, ValueError):
    """A configuration value makes the operation ill-defined."""


class FormatError(CamnetError, ValueError):
    """A file does not carry the expected magic, version or variant."""


class CorruptionError(CamnetError, ValueError):
    """A file header is valid but its payload is truncated or oversized."""


class ParseError(CamnetError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingDataError(CamnetError, ValueError):
    """Data required by the requested mode is absent."""


class SampleRejected(CamnetError):
    """A synthetic pair could not satisfy its keypoint contract."""


class TrainingDiverged(CamnetError, FloatingPointError):
    def __init__(self, message, report=None):
        self.report = report or {}
        super().__init__(message)


class UnsupportedFormat(FormatError):
    """A recognised but unsupported file variant (ASCII PNM, maxval != 255)."""
