"""Exception hierarchy shared across the package."""


class OsteonetError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(OsteonetError, ValueError):
    """Operands have incompatible shapes; the message names both."""


class SpatialCollapseError(OsteonetError, ValueError):
    """A pooling window no longer fits the remaining spatial extent."""


class NonDeterministicError(OsteonetError, RuntimeError):
    """A function produced different outputs on back-to-back evaluations."""


class NanGradientError(OsteonetError, RuntimeError):
    """A gradient contained NaN; the message names the parameter."""


class DivergenceError(OsteonetError, RuntimeError):
    """Training loss became NaN or blew past the divergence guard."""


class WeightFormatError(OsteonetError, ValueError):
    """A weight or checkpoint file is corrupt, truncated, or mis-versioned."""


class WeightShapeError(OsteonetError, ValueError):
    """A stored parameter does not match the target model's shape."""


class DatasetError(OsteonetError, ValueError):
    """A dataset tree or manifest violates the expected structure."""


class DecodeError(OsteonetError, ValueError):
    """An image byte stream could not be decoded."""


class ConfigError(OsteonetError, ValueError):
    """A run configuration is malformed or inconsistent."""
