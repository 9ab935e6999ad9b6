"""Exception hierarchy shared by every module.

Each class carries a ``category`` string that the CLI maps to an exit code.
"""


class CSFAError(Exception):
    category = "error"


class DimensionError(CSFAError, ValueError):
    category = "dimension"


class ConfigError(CSFAError, ValueError):
    category = "config"


class StateError(CSFAError, RuntimeError):
    category = "state"


class ArgumentError(CSFAError, ValueError):
    category = "argument"


class RunFailure(CSFAError, RuntimeError):
    """A run finished but violated a quality floor (e.g. base training did not converge)."""

    category = "run"
