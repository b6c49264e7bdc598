"""Exception types shared across the package.

Every domain failure raises a subclass of :class:`EngrafError` so callers
(and the CLI) can distinguish expected failures from bugs.
"""


class EngrafError(Exception):
    """Base class for all errors raised by this package."""


# taxonomy
class ParseError(EngrafError):
    """A taxonomy file line could not be parsed."""


class DuplicateFineError(EngrafError):
    """A fine label id was assigned more than one coarse parent."""


class SparseIdsError(EngrafError):
    """Fine ids do not densely cover [0, num_fine)."""


class NonSurjectiveError(EngrafError):
    """A coarse id has no fine children."""


class UnknownLabelError(EngrafError):
    """A label id lies outside its valid range."""


class InvalidShapeError(EngrafError):
    """Requested counts or sizes cannot produce a well-formed object."""


# data
class MissingFileError(EngrafError):
    """An expected dataset file is absent."""


class CorruptRecordError(EngrafError):
    """A binary dataset file is not a whole number of records."""


class LabelOutOfRangeError(EngrafError):
    """A stored or supplied label exceeds the class count."""


class EmptyDatasetError(EngrafError):
    """An operation that needs records received none."""


# model
class InvalidConfigError(EngrafError):
    """A model configuration violates its invariants."""


class ShapeMismatchError(EngrafError):
    """An input tensor is incompatible with the model."""


class MissingHeadError(EngrafError):
    """A head required by the model variant is absent."""


class NonFiniteInputError(EngrafError):
    """Logits passed to the loss contain NaN or infinity."""


# train
class ConfigMismatchError(EngrafError):
    """Model, taxonomy and training configuration disagree."""


class NonFiniteLossError(EngrafError):
    """Training produced a non-finite loss and was aborted."""

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class ManifestMismatchError(EngrafError):
    """A checkpoint manifest is inconsistent with itself or the model."""


class TruncatedBlobError(EngrafError):
    """A checkpoint weight blob is shorter than its manifest claims."""


class DuplicateEntryError(EngrafError):
    """An ablation grid contains the same entry twice."""


# cam
class UnknownBranchError(EngrafError):
    """The requested branch does not exist in the model variant."""


class ClassOutOfRangeError(EngrafError):
    """The Grad-CAM target class is invalid for the chosen head."""
