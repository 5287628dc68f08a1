"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, FormatError and
CompatError -> 2, EvaluatorError -> 3.
"""


class HiMergeError(Exception):
    """Base class for all himerge errors."""


class ConfigError(HiMergeError):
    """Invalid configuration, flags, or usage."""


class FormatError(HiMergeError):
    """Malformed or unsupported checkpoint container data."""


class CompatError(HiMergeError):
    """Checkpoints or deltas that cannot be combined."""


class EvaluatorError(HiMergeError):
    """External or builtin evaluator failure."""
