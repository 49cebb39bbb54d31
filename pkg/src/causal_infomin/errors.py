"""Exception hierarchy shared across the package."""


class InvalidInputError(ValueError):
    pass


class NumericalError(ArithmeticError):
    def __init__(self, message: str, condition_number: float | None = None):
        super().__init__(message)
        self.condition_number = condition_number


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, batch_index: int | None = None, component: str | None = None):
        super().__init__(message)
        self.batch_index = batch_index
        self.component = component


class DegenerateGroupError(ValueError):
    pass


class CheckpointError(IOError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class CorruptFileError(CheckpointError):
    pass


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
