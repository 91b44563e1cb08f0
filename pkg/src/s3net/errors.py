class S3NetError(Exception):
    pass


class ConfigError(S3NetError, ValueError):
    pass


class ShapeError(S3NetError, ValueError):
    pass


class DimensionError(ShapeError):
    """Spatial size not divisible by what the operation needs."""


class DataError(S3NetError):
    pass


class IngestionError(DataError):
    pass


class SamplingError(DataError):
    pass


class TrainingError(S3NetError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
