"""Exception hierarchy shared by every layer of the codec.

The CLI maps each family to its own exit code, so library code should raise
the most specific class available rather than a bare ``ValueError``.
"""


class CwicError(Exception):
    """Base class for all codec errors."""

    exit_code = 1


class ConfigurationError(CwicError, ValueError):
    """Inconsistent shapes, bad config keys, or mismatched model/stream."""

    exit_code = 4


class ModelMismatchError(ConfigurationError):
    """The stream was produced by a different model than the one supplied."""


class CorruptDataError(CwicError):
    """A bitstream, payload or model file failed validation."""

    exit_code = 5


class CorruptModelError(CorruptDataError):
    """The model file digest does not verify."""


class InputError(CwicError, OSError):
    """Unreadable or malformed input files (images, corpora, configs)."""

    exit_code = 3
