class MMAGError(Exception):
    """Base class for every error raised by the memory package."""


class ConfigError(MMAGError, ValueError):
    pass


class InvalidMessage(MMAGError, ValueError):
    def __init__(self, reason: str):
        super().__init__(f"Malformed message: {reason}")
        self.reason = reason


class BudgetError(MMAGError, ValueError):
    pass


class OversizeError(MMAGError, ValueError):
    pass


class EventInPastError(MMAGError, ValueError):
    pass


class StorageError(MMAGError):
    pass


class RecordNotFound(MMAGError, KeyError):
    def __init__(self, key):
        super().__init__(f"Record {key} not found")
        self.key = key

    def __str__(self):
        return self.args[0]


class EnvelopeError(MMAGError):
    """Raised when a stored envelope cannot be opened."""


class EnvelopeFormatError(EnvelopeError):
    pass


class AuthenticationError(EnvelopeError):
    pass


class UnknownKekError(AuthenticationError, ValueError):
    def __init__(self, kek_id: str):
        super().__init__(f"No key-encryption key registered under '{kek_id}'")
        self.kek_id = kek_id


class DecompressionError(EnvelopeError):
    pass


class PartialBatchError(StorageError):
    def __init__(self, results, cause: Exception):
        super().__init__(f"Batch interrupted after {len(results)} messages: {cause}")
        self.results = results
        self.cause = cause


class BackendError(MMAGError):
    def __init__(self, message: str, status: int = None, retry_after: float = None):
        super().__init__(message)
        self.status = status
        self.retry_after = retry_after


# Raised to callers as exit code 1 / HTTP 400
USER_ERRORS = (ValueError, RecordNotFound)
