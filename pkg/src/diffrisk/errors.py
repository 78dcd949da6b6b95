"""Exception types shared across the package.

Each error carries the process exit code the CLI maps it to.
"""


class DiffRiskError(Exception):
    exit_code = 1


class ConfigurationError(DiffRiskError, ValueError):
    exit_code = 2


class ShapeError(DiffRiskError, ValueError):
    exit_code = 2


class InvalidArchitectureError(ConfigurationError):
    pass


class EpisodeFinishedError(DiffRiskError, RuntimeError):
    exit_code = 3


class IntegrityError(DiffRiskError, ValueError):
    exit_code = 3


class InsufficientDataError(DiffRiskError, ValueError):
    exit_code = 3


class DatasetParseError(DiffRiskError, ValueError):
    exit_code = 3

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingDivergedError(DiffRiskError, FloatingPointError):
    exit_code = 4

    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = dict(diagnostics or {})
        if self.diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
            message = f"{message} ({details})"
        super().__init__(message)
