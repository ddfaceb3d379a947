"""Exception types raised across the package."""


class TNTError(Exception):
    """Base class for all errors raised by tntlab."""


class MalformedStreamError(TNTError, ValueError):
    pass


class CorruptRecordError(TNTError, ValueError):
    def __init__(self, index: int, message: str):
        super().__init__(f"record {index}: {message}")
        self.index = index


class EncodeRangeError(TNTError, ValueError):
    pass


class InvalidEventError(TNTError, ValueError):
    pass


class EmptyStreamError(TNTError, ValueError):
    pass


class DegenerateDurationError(TNTError, ValueError):
    pass


class ShapeError(TNTError, ValueError):
    pass


class NumericOverflowError(TNTError, FloatingPointError):
    def __init__(self, layer: str, message: str = "non-finite values"):
        super().__init__(f"{message} after layer {layer}")
        self.layer = layer


class RunawayTrajectoryError(TNTError, ValueError):
    pass


class DatasetDegeneracyError(TNTError, ValueError):
    pass


class UnreliableMeasurementError(TNTError, RuntimeError):
    pass


class EmptyEvidenceError(TNTError, ValueError):
    pass


class EmptyVolumeError(TNTError, ValueError):
    pass


class TrainingDivergenceError(TNTError, RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"loss became {loss} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


class LabelError(TNTError, ValueError):
    pass


class ConfigError(TNTError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
