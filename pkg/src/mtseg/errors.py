"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so new error types should
subclass the closest existing category.
"""


class MtsegError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MtsegError):
    """Invalid or inconsistent configuration."""


class GeometryError(MtsegError):
    """Patch / network shapes do not close under the layer arithmetic."""


class ShapeError(MtsegError):
    """Array arguments disagree in shape."""


class InvalidLabelError(MtsegError):
    """Label value outside [0, num_classes - 1]."""


class DegenerateMaskError(MtsegError):
    """An operation required a nonempty mask."""


class DegenerateIntensityError(MtsegError):
    """Zero intensity variance where a spread is required."""


class DataError(MtsegError):
    """On-disk data is missing or malformed."""


class VolumeFormatError(DataError):
    """Volume file fails magic/version/size validation."""


class ManifestError(DataError):
    """Dataset manifest is malformed or inconsistent."""


class CheckpointError(DataError):
    """Checkpoint container fails version/schema/payload validation."""


class SchemaMismatchError(MtsegError):
    """Two weight collections are not elementwise combinable."""


class MissingPseudoLabelsError(MtsegError):
    """Unannotated sample used for sampling before refresh_pseudo_labels."""


class DivergenceError(MtsegError):
    """Training produced non-finite losses or runaway weights."""


class EvaluationError(MtsegError):
    """Evaluation-stage failure."""


class PairingError(EvaluationError):
    """Per-scan results cannot be paired across methods."""


class SampleSizeError(EvaluationError):
    """Too few samples for the requested statistic."""
