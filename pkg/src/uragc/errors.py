"""Exception hierarchy shared across the harness."""


class UragcError(Exception):
    """Base class for all harness errors."""


class ArgumentError(UragcError, ValueError):
    pass


class DatasetParseError(UragcError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class IntegrityError(UragcError):
    pass


class ProviderError(UragcError):
    """Non-retryable backend failure (bad status, malformed payload)."""

    def __init__(self, message: str, status: int | None = None, body: str | None = None):
        super().__init__(message)
        self.status = status
        self.body = body


class RetryableProviderError(ProviderError):
    """Transport failure or throttling; safe to retry."""


class CapabilityError(ProviderError):
    """Backend lacks a feature the request needs (e.g. token logprobs)."""


class StrategyError(UragcError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class ProtocolError(UragcError):
    pass


class ForgeError(UragcError):
    def __init__(self, message: str, raw: str | None = None):
        super().__init__(message)
        self.raw = raw


class ReportError(UragcError):
    pass


class ConfigError(UragcError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
