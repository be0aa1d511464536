"""Exception hierarchy.

User-facing input problems derive from ``MatchADError``; numerical
failures additionally derive from ``NumericalError`` so the CLI can map
them to a distinct exit code.
"""


class MatchADError(ValueError):
    """Base class for every error raised by this package."""


class NumericalError(MatchADError):
    """A computation produced non-finite or degenerate values."""


# dataset
class MissingHeader(MatchADError):
    pass


class RaggedRow(MatchADError):
    def __init__(self, row_index, expected=None, got=None):
        self.row_index = row_index
        msg = f"row {row_index} has {got} cells, expected {expected}"
        super().__init__(msg)


class UnparseableValue(MatchADError):
    def __init__(self, row, col, value=None):
        self.row = row
        self.col = col
        super().__init__(f"cannot parse {value!r} at row {row}, column {col!r}")


class UnknownLabelColumn(MatchADError):
    pass


class ClassTooSmall(MatchADError):
    def __init__(self, class_id, count=None):
        self.class_id = class_id
        super().__init__(f"class {class_id} has {count} labeled members; need at least 2")


# preprocessing
class AllRowsRemoved(MatchADError):
    pass


class FeatureFullyMissing(MatchADError):
    def __init__(self, j):
        self.feature = j
        super().__init__(f"feature {j} has no observed values")


class TooFewRows(MatchADError):
    pass


class DimensionMismatch(MatchADError):
    pass


# autoencoder
class BatchTooSmallForKL(MatchADError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, epoch, detail=""):
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch}{': ' + detail if detail else ''}")


# graph / propagation
class KTooLarge(MatchADError):
    pass


class IsolatedNode(NumericalError):
    def __init__(self, i):
        self.node = i
        super().__init__(f"node {i} has zero degree")


class NoLabeledRows(MatchADError):
    pass


class SolveFailure(NumericalError):
    pass


class ZeroRow(NumericalError):
    def __init__(self, i):
        self.row = i
        super().__init__(f"row {i} of the label matrix has no positive entry")


class NotConvergedWarning(UserWarning):
    pass


# transport
class NumericalUnderflow(NumericalError):
    pass


class NonPositiveMarginal(MatchADError):
    pass


class SingleStage(MatchADError):
    pass


class EmptyStage(MatchADError):
    def __init__(self, stage):
        self.stage = stage
        super().__init__(f"stage {stage} has no members")


# pipeline
class EmptyModel(MatchADError):
    pass


# metrics
class LengthMismatch(MatchADError):
    pass


class ClassOutOfRange(MatchADError):
    pass


class EmptyMatrix(MatchADError):
    pass


# cli
class ConfigError(MatchADError):
    pass
