"""Exception hierarchy shared across the package."""


class DermxError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(DermxError, ValueError):
    """Invalid user-supplied array, label list, or parameter."""


class MetadataError(DermxError):
    """Malformed metadata CSV (missing columns, unknown diagnosis codes)."""


class ImageLoadError(DermxError):
    """An image file could not be read or decoded.

    Carries the image_id of the offending record when known.
    """

    def __init__(self, message, image_id=None):
        super().__init__(message)
        self.image_id = image_id


class SplitError(DermxError):
    """Stratified split cannot be performed (bad ratios, class too small)."""


class ConfigError(DermxError, ValueError):
    """Invalid model or training configuration."""


class BackboneUnavailableError(ConfigError):
    """Requested backbone's provider package is not installed."""


class TrainingError(DermxError):
    """Training cannot start or aborted (degenerate config, non-finite loss)."""


class CapabilityError(DermxError):
    """The model handle does not support the requested operation."""


class LayerError(DermxError):
    """Requested layer does not exist or is not usable for CAM methods."""
