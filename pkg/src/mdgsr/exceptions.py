"""Exception and warning types raised across the package."""


class ShapeMismatchError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


class NonHermitianInputError(ValueError):
    pass


class NonPositiveVarianceError(ValueError):
    pass


class FewerThanTwoImagesError(ValueError):
    pass


class NoConvergenceError(RuntimeError):
    """Raised when a per-mode root solve fails to converge.

    The flat indices of the offending modes are kept on ``modes``.
    """

    def __init__(self, message, modes=()):
        super().__init__(message)
        self.modes = tuple(modes)


class TrainingDivergenceError(RuntimeError):
    pass


class CollapseWarning(UserWarning):
    """Network predictions collapsed to near-uniform images."""


class ZeroVarianceError(ValueError):
    pass


class BadOffsetError(ValueError):
    pass


class TooFewSnapshotsError(ValueError):
    pass


class TooFewSamplesError(ValueError):
    pass


class IndexOutOfRangeError(IndexError):
    pass


class TensorFileError(ValueError):
    pass


class BadMagicError(TensorFileError):
    pass


class TruncatedFileError(TensorFileError):
    pass


class UnsupportedDtypeError(TensorFileError):
    pass


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    """A stage input is absent. ``hint`` tells the user which command produces it."""

    def __init__(self, message, hint=None):
        if hint:
            message = f"{message} (hint: {hint})"
        super().__init__(message)
        self.hint = hint


class ProvenanceMismatchError(MissingArtifactError):
    """An artifact exists but was produced from a different dataset."""
