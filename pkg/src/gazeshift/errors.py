"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI lives in cli.py; keep the classes here so
library callers can catch them without importing the CLI.
"""


class GazeshiftError(Exception):
    """Base class for all package errors."""


class ConfigError(GazeshiftError):
    """Invalid configuration or constructor arguments."""


class DataIntegrityError(GazeshiftError):
    """Input data violates a declared invariant (unsorted events, bad file)."""


class ValidationError(GazeshiftError):
    """A runtime contract was violated (shape mismatch, bad label, ...)."""


class MissingArtifactError(GazeshiftError):
    """A prerequisite file (checkpoint, manifest, registry) is absent."""


class NumericError(GazeshiftError):
    """Non-finite values encountered during computation or training."""


class TrainingDivergedError(NumericError):
    """Loss became non-finite; carries the last diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
