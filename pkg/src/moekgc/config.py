"""Shared configuration error type.

Raised for invalid settings wherever they are detected; the CLI maps it to
exit code 2.
"""


class ConfigError(Exception):
    """A configuration value is missing, unknown, or inconsistent."""
