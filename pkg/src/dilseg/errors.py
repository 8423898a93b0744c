"""Exception taxonomy shared across the package.

Grouped so the CLI can map failures to distinct exit codes: config (2),
data (3), training divergence (4), file I/O (5).
"""


class DilsegError(Exception):
    """Base class for all domain errors raised by this package."""


class ShapeError(DilsegError, ValueError):
    """Tensor/extent/channel geometry violates an operation's contract."""


class LabelError(DilsegError, ValueError):
    """A class index is outside the configured label range."""


class SplitError(DilsegError, ValueError):
    """A dataset split would leave one side empty."""


class DatasetError(DilsegError, ValueError):
    """Dataset-level problem: empty set, mismatched pairs, bad manifest."""


class DegenerateDataError(DilsegError, ValueError):
    """Statistic undefined on the given data (e.g. all paired diffs zero)."""


class SchemaError(DilsegError, ValueError):
    """Two artifacts disagree structurally (class sets, model vs dataset)."""


class DivergenceError(DilsegError, RuntimeError):
    """Training produced a non-finite loss and was aborted."""


class ConfigError(DilsegError, ValueError):
    """Bad experiment configuration (file or flags)."""


class PixmapError(DilsegError, ValueError):
    """Base for PPM/PGM parse failures."""


class PixmapHeaderError(PixmapError):
    """Wrong magic or malformed header fields."""


class PixmapTruncatedError(PixmapError):
    """Pixel payload shorter than the header promises."""


class ModelIOError(DilsegError, ValueError):
    """Base for model-file load failures."""


class ModelFormatError(ModelIOError):
    """Magic bytes or structural fields are not a model file."""


class ModelVersionError(ModelIOError):
    """Model file version is not supported."""


class ModelTruncatedError(ModelIOError):
    """Model file ends before the declared payload."""
