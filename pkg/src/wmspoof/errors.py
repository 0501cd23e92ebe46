"""Exception hierarchy shared by every wmspoof module.

Every error raised on purpose derives from :class:`WmSpoofError`, which the
CLI maps to exit status 1.
"""


class WmSpoofError(Exception):
    """Base class for domain and validation failures."""


class InvalidInputError(WmSpoofError, ValueError):
    """An argument violates an operation's precondition."""


class WavFormatError(WmSpoofError):
    """A WAV file is truncated or has a malformed header."""


class UnsupportedFormatError(WmSpoofError):
    """A WAV file is well formed but uses an encoding we do not read."""


class CapacityError(WmSpoofError):
    """The payload does not fit in the audio under the given codec config."""


class ConfigError(WmSpoofError, ValueError):
    """A codec, roster or training configuration is invalid."""


class ValidationError(WmSpoofError, ValueError):
    """A manifest, plan or score set breaks one of its invariants."""


class ParseError(WmSpoofError, ValueError):
    """A text file could not be parsed.

    ``line`` is the 1-based line number of the offending line, when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UndefinedMetricError(WmSpoofError, ValueError):
    """A metric is undefined for the given input (e.g. all-silent audio)."""
