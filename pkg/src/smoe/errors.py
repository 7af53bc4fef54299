"""Exception types shared across the package."""


class SmoeError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SmoeError, ValueError):
    pass


class ConfigError(SmoeError, ValueError):
    pass


class NumericError(SmoeError, ArithmeticError):
    pass


class DegenerateDistributionError(NumericError):
    """A softmax row had no finite entry to put mass on."""


class InputError(SmoeError, ValueError):
    pass


class ContextOverflowError(SmoeError, ValueError):
    pass


class NoDataError(SmoeError, ValueError):
    pass


class SpecError(SmoeError, ValueError):
    pass


class DataError(SmoeError, ValueError):
    pass


class TrainingError(SmoeError, RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class FormatError(SmoeError, ValueError):
    """A checkpoint, trace or config file could not be parsed."""
