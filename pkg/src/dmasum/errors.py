"""Exception types shared across the package."""


class DmaSumError(Exception):
    """Base class for all package errors."""


class ShapeError(DmaSumError, ValueError):
    pass


class NumericError(DmaSumError, ArithmeticError):
    """Non-finite values or a failed decomposition."""


class StateError(DmaSumError, RuntimeError):
    pass


class DomainError(DmaSumError, ValueError):
    pass


class InputError(DmaSumError, ValueError):
    pass


class UndefinedCoefficientError(DmaSumError, ValueError):
    """A correlation coefficient is undefined (e.g. one side fully tied)."""


class DatasetLoadError(DmaSumError, ValueError):
    def __init__(self, message, video_id=None, offset=None):
        parts = [message]
        if video_id is not None:
            parts.append(f"video={video_id}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts))
        self.video_id = video_id
        self.offset = offset
