"""Exception hierarchy.

The CLI maps these onto exit codes: data/validation problems exit 2,
external-service problems exit 3.
"""


class PlaceTextError(Exception):
    """Base class for all package errors."""


class ShapeError(PlaceTextError, ValueError):
    pass


class InvalidInputError(PlaceTextError, ValueError):
    pass


class NumericError(PlaceTextError, ArithmeticError):
    pass


class RangeError(PlaceTextError, IndexError):
    pass


class ParameterError(PlaceTextError, ValueError):
    pass


class FormatError(PlaceTextError):
    """A binary or JSON-lines file does not match its declared layout."""


class BuildError(PlaceTextError, ValueError):
    pass


class ManifestError(PlaceTextError, ValueError):
    """Manifest validation failure; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigurationError(PlaceTextError):
    pass


class EvaluationError(PlaceTextError):
    pass


class TemplateError(PlaceTextError, ValueError):
    pass


class LlmError(PlaceTextError):
    """Remote filter call failed (transport, HTTP status, or exhausted retries)."""


class LlmParseError(LlmError):
    """Remote filter answered but the reply carried no usable JSON array."""


class FilterError(PlaceTextError):
    pass
