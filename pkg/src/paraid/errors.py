class ParaidError(Exception):
    pass


class ConfigError(ParaidError, ValueError):
    pass


class SolverError(ParaidError, RuntimeError):
    pass


class StagnationError(SolverError):
    """Raised when the trust-region loop keeps rejecting the same subproblem."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
