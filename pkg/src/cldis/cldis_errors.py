"""
Exception types shared across the cldis modules.

The command-line surface maps each family to its own exit code, see
:data:`EXIT_CODES`.
"""
from typing import Optional


class CldisError(Exception):
    """Base class for every error raised deliberately by this package."""
    exit_code = 1


class PreconditionError(CldisError, ValueError):
    """An operation was called with arguments that violate its contract
    (out-of-range index, shape mismatch, negative capacity, ...)."""


class ConfigError(CldisError, ValueError):
    """A configuration value or configuration file line is invalid."""
    exit_code = 2


class ManifestError(ConfigError):
    """
    A manifest file could not be parsed or failed validation.

    :param message: human readable description
    :param key: the manifest key that caused the failure, if known
    :param path: the manifest path, if known
    """
    def __init__(self, message: str, key: Optional[str] = None, path: Optional[str] = None):
        self.key = key
        self.path = path
        prefix = f"{path}: " if path else ""
        suffix = f" (key '{key}')" if key else ""
        super().__init__(f"{prefix}{message}{suffix}")


class DependencyError(CldisError):
    """A phase, checkpoint or artifact required by a command is missing."""
    exit_code = 3


class NumericAbort(CldisError, RuntimeError):
    """Training produced a non-finite loss and was stopped."""
    exit_code = 4


EXIT_CODES = {
    'success': 0,
    'config': ConfigError.exit_code,
    'dependency': DependencyError.exit_code,
    'numeric': NumericAbort.exit_code,
}
