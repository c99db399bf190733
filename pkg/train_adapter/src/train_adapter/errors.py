class AdapterError(Exception):
    exit_code = 1


class SchemaError(AdapterError):
    """Dataset file violates the export schema."""

    exit_code = 2


class EnvironmentCheckError(AdapterError):
    """Training prerequisites missing; reported before any training step."""

    exit_code = 3
