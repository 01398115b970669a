"""Exceptions that map onto the command-line exit codes."""


class ConfigError(ValueError):
    """Configuration document violates the schema (exit code 2)."""


class ManifestError(ValueError):
    """Dataset manifest is unusable for the requested mode (exit code 3)."""


class PairingError(ValueError):
    """Prediction/ground-truth case pairing failed (exit code 5)."""
