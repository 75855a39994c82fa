"""Exception hierarchy.

Every error carries a short ``code`` used as a stable, machine-parsable
prefix by the command line tool.
"""


class HdrVamError(Exception):
    code = "error"
    exit_code = 1


class ShapeError(HdrVamError, ValueError):
    """Incompatible tensor shapes; ``axis`` names the offending axis."""

    code = "shape"

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class GradientError(HdrVamError, RuntimeError):
    code = "grad"


# -- file formats ------------------------------------------------------------

class FormatError(HdrVamError, ValueError):
    code = "format"
    exit_code = 2


class BadMagicError(FormatError):
    code = "bad-magic"


class TruncatedFileError(FormatError):
    code = "truncated"


class UnsupportedEndiannessError(FormatError):
    code = "big-endian"


class RankError(FormatError):
    code = "rank"


# -- scene ingestion ---------------------------------------------------------

class SceneError(HdrVamError, ValueError):
    code = "scene"
    exit_code = 2


class MissingFileError(SceneError, FileNotFoundError):
    code = "missing-file"


class ExposureOrderError(SceneError):
    code = "exposure-order"


class SceneShapeError(SceneError):
    code = "scene-shape"


class PixelRangeError(SceneError):
    code = "pixel-range"


# -- configuration / weights / training --------------------------------------

class ConfigError(HdrVamError, ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    code = "config"
    exit_code = 2

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class WeightsMismatchError(HdrVamError, ValueError):
    code = "weights"
    exit_code = 2

    def __init__(self, message, missing=(), extra=(), misshaped=()):
        super().__init__(message)
        self.missing = list(missing)
        self.extra = list(extra)
        self.misshaped = list(misshaped)


class EmptyDatasetError(HdrVamError, ValueError):
    code = "empty-dataset"
    exit_code = 2


class NonFiniteLossError(HdrVamError, FloatingPointError):
    code = "non-finite-loss"

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
