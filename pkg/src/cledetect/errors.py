"""Exception hierarchy shared across the toolkit."""


class CleError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CleError):
    """Invalid configuration or usage (bad shapes, bad splits, single-class data)."""


class GeometryError(CleError):
    """Field-of-view geometry that cannot be honored (circle does not fit, ...)."""


class NumericError(CleError):
    """Non-finite values produced by a forward or backward pass."""


class DataFormatError(CleError):
    """Malformed manifest or image file."""


class NonDiagnosticFrameError(CleError):
    """A frame yielded no usable patches; there is no probability to report."""


class MetricsError(CleError):
    """Metrics are undefined for the given result vector (e.g. single-class AUC)."""


class ExperimentError(CleError):
    """A cross-validation fold failed; the surrounding run must abort."""
