"""Shared exception types.

The CLI maps these onto distinct exit codes, so raising the right class
matters more than the message text.
"""


class CoMoEError(Exception):
    """Base class for package-specific failures."""


class ConfigError(CoMoEError, ValueError):
    """Scenario or sweep configuration is malformed (unknown key, bad value)."""


class InfeasibleError(CoMoEError, RuntimeError):
    """No deployment satisfies the memory constraint (a deployability cross)."""


class TraceError(CoMoEError, ValueError):
    """A routing or resource trace file is unreadable or inconsistent."""
