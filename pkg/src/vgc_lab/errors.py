"""Exception types shared across the package."""


class VgcLabError(Exception):
    """Base class for package errors."""


class ConfigError(VgcLabError, ValueError):
    """Invalid user input: malformed data, instance or run configuration."""


class SolverError(VgcLabError, RuntimeError):
    """A solver failed or produced a result violating its certificate."""


class UnsupportedPathError(VgcLabError, NotImplementedError):
    """No exact coordinate path is available for this instance."""
