"""Exception hierarchy shared across the engine.

Plain ``ValueError`` is used for bad arguments to library functions; the
classes below mark conditions the CLI maps to distinct exit codes.
"""


class ConfigError(Exception):
    """Invalid or incomplete run configuration (exit code 2)."""


class BackendError(Exception):
    """A model backend failed after bounded retries (exit code 3)."""


class InternalError(Exception):
    """An internal invariant was violated; never silently ignored (exit code 4)."""
