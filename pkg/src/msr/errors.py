"""Exception hierarchy. Exit codes: 2 config, 3 dependency, 4 backend/transport."""


class MsrError(Exception):
    exit_code = 1


class ConfigError(MsrError):
    exit_code = 2


class IngestError(MsrError):
    """Malformed or unusable input data."""

    exit_code = 2


class RequestError(MsrError):
    """A completion request violates its invariants."""

    exit_code = 2


class DependencyError(MsrError):
    """A required upstream artifact or input is missing."""

    exit_code = 3


class TransportError(MsrError):
    """Network/auth failure after retries are exhausted."""

    exit_code = 4


class CapabilityError(MsrError):
    """Backend lacks a required capability (logprobs, echo-scoring)."""

    exit_code = 4


class ImageError(MsrError):
    """Image reference unresolvable or bytes unreadable."""


class SequencingError(MsrError):
    """Preference blocks applied out of order."""


class ExtractionError(MsrError):
    """Neither yes nor no present in the first-token distribution."""
