"""Exception hierarchy shared across the toolkit.

The CLI maps error categories to distinct process exit codes, so every
raisable condition belongs to exactly one of three buckets: configuration
problems, bad or missing input data, and numerical failures.
"""


class ZsqError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(ZsqError):
    """Invalid configuration: bad flags, malformed config file, inconsistent specs."""

    exit_code = 2


class DataError(ZsqError):
    """Unusable input data: missing files, corrupt formats, incompatible shapes."""

    exit_code = 3


class NumericalError(ZsqError):
    """Numerical failure detected during computation (NaN/Inf, divergence)."""

    exit_code = 4


class ShapeMismatchError(DataError):
    """Tensor shape incompatible with a layer or model contract."""

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class UnsupportedLayerError(ConfigError):
    """Layer kind outside the supported sequential-CNN set."""


class NonFiniteError(NumericalError):
    """An operation produced NaN or Inf."""

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class ModelFormatError(DataError):
    """Base for model-file parsing failures."""


class ManifestError(ModelFormatError):
    """Manifest is malformed or internally inconsistent."""


class FormatVersionError(ModelFormatError):
    """File declares an unsupported format version."""


class ChecksumMismatchError(ModelFormatError):
    """Stored blob checksum does not match the blob contents."""


class BlobBoundsError(ModelFormatError):
    """A manifest entry points outside the weight blob."""


class DegenerateRangeError(ZsqError):
    """Clipping range has zero or negative width."""


class MissingRangeError(DataError):
    """Calibration ranges are incomplete for quantization."""

    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__("missing calibration ranges for: " + ", ".join(self.missing))


class CalibrationError(DataError):
    """Calibration cannot proceed (e.g. empty collector)."""


class DistillationError(ZsqError):
    """Distillation cannot run on the given model."""


class DistillationDivergedError(NumericalError):
    """Distillation loss became non-finite; carries the trace up to failure."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace
