"""Exception hierarchy for distillkit.

Every error raised by the library derives from DistillkitError so callers can
catch the whole family; the CLI maps ConfigError to exit code 2 and everything
else to exit code 3.
"""


class DistillkitError(Exception):
    """Base class for all distillkit errors."""


class NotFoundError(DistillkitError):
    """A required path (corpus root, weight file, cache file) does not exist."""


class InvalidCorpusError(DistillkitError):
    """The corpus layout is unusable, e.g. a class directory with no images."""


class InvalidArgumentError(DistillkitError, ValueError):
    """An argument violates a documented precondition."""


class InvalidStateError(DistillkitError):
    """An operation was invoked on an object in a forbidden state."""


class WeightFormatError(DistillkitError):
    """A weight file is corrupt or has an unrecognized header."""


class WeightShapeError(DistillkitError):
    """A tensor in a weight file does not match the model's declared shape."""


class NumericalError(DistillkitError):
    """A non-finite loss or gradient was produced."""


class CacheWriteError(DistillkitError):
    """Writing a feature cache failed."""


class CacheFormatError(DistillkitError):
    """A feature cache file is corrupt or has a bad magic header."""


class MissingFeatureError(DistillkitError):
    """A training sample has no entry in the teacher feature cache."""


class ConfigError(DistillkitError):
    """A config file violates the schema; message names the offending key."""


class CorpusWriteError(DistillkitError):
    """Writing a synthetic corpus failed."""
