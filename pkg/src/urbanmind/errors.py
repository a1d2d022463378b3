"""Exception types raised across the package."""


class InvalidArgument(ValueError):
    pass


class DegenerateScaleError(ValueError):
    """A channel has no spread, so min-max scaling is undefined."""


class DatasetFormatError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


class TrainingFailure(RuntimeError):
    """Raised when a loss goes non-finite.

    ``last_good_state`` holds a parameter snapshot taken before the failing step,
    when one exists.
    """

    def __init__(self, message, last_good_state=None):
        super().__init__(message)
        self.last_good_state = last_good_state


class FreezeViolation(RuntimeError):
    pass


class StageOrderError(RuntimeError):
    pass
