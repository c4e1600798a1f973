"""Exception hierarchy.

Every error raised on purpose by this package derives from
:class:`Noise2MapError` and carries a short ``category`` used by the CLI for
its one-line diagnostics.
"""


class Noise2MapError(Exception):
    category = "error"


class ParameterError(Noise2MapError, ValueError):
    category = "parameter"


class TimestepRangeError(Noise2MapError, ValueError):
    category = "range"


class ShapeError(Noise2MapError, ValueError):
    category = "shape"


class DataError(Noise2MapError, ValueError):
    category = "data"


class LabelError(Noise2MapError, ValueError):
    category = "label"


class ConfigError(Noise2MapError, ValueError):
    category = "config"


class ManifestError(Noise2MapError, ValueError):
    category = "manifest"


class EmptyDatasetError(ManifestError):
    category = "empty-dataset"


class NumericError(Noise2MapError, FloatingPointError):
    category = "numeric"


class DivergenceError(NumericError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the last state whose loss was finite.
    """

    category = "divergence"

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
