"""Exception hierarchy shared by the library and the CLI."""


class GeosslError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InvalidArgumentError(GeosslError, ValueError):
    exit_code = 2


class ConfigurationError(GeosslError, ValueError):
    exit_code = 2


class IngestionError(GeosslError, OSError):
    """Raised when a dataset file is missing or unreadable."""

    exit_code = 3

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class FormatError(IngestionError):
    """Raised when a dataset file exists but its records are malformed."""


class TrainingAbort(GeosslError, RuntimeError):
    """Training stopped because continuing would produce garbage."""

    exit_code = 4

    def __init__(self, message, **diagnostics):
        self.diagnostics = diagnostics
        if diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
            message = f"{message} ({details})"
        super().__init__(message)
