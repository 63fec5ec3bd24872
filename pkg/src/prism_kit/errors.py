"""Exception types shared across the package."""


class PrismKitError(Exception):
    """Base class for all package errors."""


class FormatError(PrismKitError):
    """A file is missing required companions or declares an unknown layout."""


class CorruptFileError(PrismKitError):
    """A file's payload disagrees with its declared dimensions or length."""


class ShapeError(PrismKitError):
    """Array shapes violate an operation's contract."""


class ConfigError(PrismKitError):
    """A configuration value or key is invalid."""


class LabelError(PrismKitError):
    """A categorical label falls outside its declared range."""


class NonFiniteLossError(PrismKitError):
    """A loss term became NaN or infinite. Carries the term name."""

    def __init__(self, term: str):
        super().__init__(f"non-finite loss term: {term}")
        self.term = term


class CheckpointMismatchError(PrismKitError):
    """A checkpoint's config digest disagrees with the supplied config."""


class CorruptCheckpointError(PrismKitError):
    """A checkpoint file is truncated or structurally invalid."""


class DataLeakageError(PrismKitError):
    """Dataset splits share case ids."""


class DegenerateLabelsError(PrismKitError):
    """A metric is undefined because only one class is present."""


class DegenerateSampleError(PrismKitError):
    """A paired test is undefined because all differences vanish."""


class EmptyInputError(PrismKitError):
    """An operation requiring at least one element received none."""
