"""Exception hierarchy shared across the package."""


class SpiroError(Exception):
    """Base class for all package errors."""


class ValidationError(SpiroError, ValueError):
    """Input data violates a documented precondition."""


class BlowRejected(ValidationError):
    """A blow failed the validity check; ``reason`` carries the code."""

    def __init__(self, reason: str, subject_id: str = ""):
        self.reason = reason
        self.subject_id = subject_id
        super().__init__(f"blow rejected ({reason})" + (f" for {subject_id}" if subject_id else ""))


class ParameterError(SpiroError, ValueError):
    """An operator parameter is outside its admissible range."""


class ShapeError(SpiroError, ValueError):
    """Network specification or tensor shapes are inconsistent."""


class NumericError(SpiroError, FloatingPointError):
    """A non-finite value appeared during computation."""


class TapeError(SpiroError, RuntimeError):
    """A tape was replayed after the parameters it recorded were mutated."""


class FormatError(SpiroError, ValueError):
    """An artifact file has an unexpected format or version."""
