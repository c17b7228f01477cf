class ShapeError(ValueError):
    pass


class ArchitectureError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingHalted(RuntimeError):
    """Raised when a non-finite gradient or loss shows up during training."""


class ImageError(ValueError):
    pass
