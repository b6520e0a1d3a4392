"""Exception types shared across the package.

The CLI maps these onto stable exit codes: config errors exit 2, IO errors
exit 3, numeric aborts exit 4, artifact/format mismatches exit 5.
"""


class ShapeError(ValueError):
    """Operand shapes disagree (both shapes are named in the message)."""


class GeometryError(ValueError):
    """Invalid spatial geometry for a conv/pool/transform."""


class UnsupportedSizeError(GeometryError):
    """Input size outside the supported family (e.g. non power-of-two FFT)."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Bad input data: labels outside {0,1}, leaked manifests, empty segments."""


class UsageError(RuntimeError):
    """API misuse, e.g. backward() on a tensor that is not on a tape."""


class MetricError(ValueError):
    """Metric undefined for the given records (e.g. single-class AUC)."""


class DegenerateDataError(ValueError):
    """Resampling could not produce a usable sample within the retry budget."""


class FormatError(ValueError):
    """File magic/version/shape mismatch in a checkpoint or segment file."""


class NumericError(RuntimeError):
    """Non-finite loss or similar numeric failure; aborts the run."""
