from typing import Optional, Dict, Any

from .deft_models import ErrorResponse

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_USAGE = 5


class DeftError(Exception):
    """Base error carrying the envelope fields returned to callers."""
    code = "DEFT_ERROR"
    exit_code = 1

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_response(self) -> ErrorResponse:
        return ErrorResponse(error=self.message, code=self.code, details=self.details or None)


class ConfigError(DeftError):
    code = "CONFIG_ERROR"
    exit_code = EXIT_CONFIG


class DataIOError(DeftError):
    code = "IO_ERROR"
    exit_code = EXIT_IO


class NumericError(DeftError):
    code = "NUMERIC_ERROR"
    exit_code = EXIT_NUMERIC


class DimensionError(DeftError):
    code = "DIMENSION_ERROR"
    exit_code = EXIT_USAGE


class UsageError(DeftError):
    code = "USAGE_ERROR"
    exit_code = EXIT_USAGE
