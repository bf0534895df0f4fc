"""Exception hierarchy shared across the package.

Two failure families matter to callers: runtime contract violations
(bad values, shape mismatches, out-of-domain inputs) and bad
configuration or file formats. The CLI maps them to exit codes 1 and 2
respectively.
"""


class DriftcompError(Exception):
    """Base class for all package-specific errors."""


class DomainError(DriftcompError, ValueError):
    """A value or state violates an operation's contract (exit code 1)."""


class ConfigError(DriftcompError):
    """Configuration is unusable: unknown keys, bad types, missing paths (exit code 2)."""


class FormatError(ConfigError):
    """A file's bytes do not match the documented layout (exit code 2)."""
