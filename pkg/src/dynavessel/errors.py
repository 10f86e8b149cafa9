"""Exception hierarchy.

Every error carries a short machine-readable ``code`` used by the CLI when
reporting failures as ``error: <code>: <message>``.
"""


class DynaVesselError(Exception):
    code = "error"


class ArgumentError(DynaVesselError, ValueError):
    code = "argument"


class FormatError(DynaVesselError):
    code = "format"


class UnsupportedDatatypeError(DynaVesselError):
    code = "unsupported"


class DimensionalityError(DynaVesselError):
    code = "dimensionality"


class WriteError(DynaVesselError, OSError):
    code = "write"


class GeometryError(DynaVesselError, ValueError):
    code = "geometry"


class SpecError(DynaVesselError, ValueError):
    code = "spec"


class DegenerateMetricError(DynaVesselError, ValueError):
    code = "degenerate-metric"


class RegistrationFailedError(DynaVesselError):
    code = "registration-failed"


class NormalizationError(DynaVesselError, ValueError):
    code = "normalization"


class DegenerateHistogramError(DynaVesselError, ValueError):
    code = "degenerate-histogram"


class EmptyReferenceError(DynaVesselError, ValueError):
    code = "empty-reference"


class EmptySurfaceError(DynaVesselError, ValueError):
    code = "empty-surface"


class EmptySetError(DynaVesselError, ValueError):
    code = "empty-set"


class ConfigurationError(DynaVesselError, ValueError):
    code = "configuration"


class StageError(DynaVesselError):
    """A pipeline stage failed; ``manifest`` holds the partial run record."""

    code = "stage"

    def __init__(self, message, manifest=None):
        super().__init__(message)
        self.manifest = manifest


class LockError(DynaVesselError):
    code = "locked"
