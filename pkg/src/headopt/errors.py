"""Exception hierarchy shared across the engine."""


class HeadOptError(Exception):
    """Base class for all engine errors."""


class ShapeError(HeadOptError):
    """Tensor or mesh dimensions do not match an operation's contract."""


class NumericsError(HeadOptError):
    """A numeric invariant broke: NaN/Inf values, divergence, bad norms."""


class ModelFormatError(HeadOptError):
    """A model/checkpoint/tensor file could not be parsed or failed validation."""


class ConfigError(HeadOptError):
    """Invalid or inconsistent run configuration."""


class ProtocolError(HeadOptError):
    """Malformed wire-protocol envelope."""


class GuidanceError(HeadOptError):
    """Guidance provider failed: transport error, bad response, non-finite grad."""

    def __init__(self, message: str, retries: int = 0):
        super().__init__(message)
        self.retries = retries


class DecodeError(HeadOptError):
    """Remote decode failed."""

    def __init__(self, message: str, retries: int = 0):
        super().__init__(message)
        self.retries = retries


class SegmentationError(HeadOptError):
    """Segmentation or mask-selection failed."""
