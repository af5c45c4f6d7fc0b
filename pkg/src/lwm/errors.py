"""Exception hierarchy shared across the package."""


class LwmError(Exception):
    """Base class for all package errors."""


class InputShapeError(LwmError, ValueError):
    pass


class ShapeError(LwmError, ValueError):
    pass


class NumericalFailure(LwmError, FloatingPointError):
    """Raised when a loss, activation, or gradient stops being finite.

    ``context`` carries step/epoch information when available.
    """

    def __init__(self, message, **context):
        self.message = message
        self.context = context
        if context:
            details = ", ".join(f"{k}={v}" for k, v in context.items())
            message = f"{message} ({details})"
        super().__init__(message)


class ClassRangeError(LwmError, IndexError):
    pass


class ConfigurationError(LwmError, ValueError):
    pass


class ScheduleViolation(LwmError, ValueError):
    pass


class FrozenModelError(LwmError, RuntimeError):
    """Raised when something tries to differentiate or update a teacher snapshot."""


class FormatError(LwmError, ValueError):
    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        parts = [message]
        if path is not None:
            parts.append(f"file={path}")
        if offset is not None:
            parts.append(f"byte offset={offset}")
        super().__init__(", ".join(parts))


class CheckpointVersionError(LwmError, RuntimeError):
    pass
