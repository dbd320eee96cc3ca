"""Exception taxonomy. Every domain failure raises a SageError subclass so the
CLI can map them to exit code 1 uniformly."""


class SageError(Exception):
    """Base class for all domain errors raised by this package."""


# dataset loading / validation
class LoadError(SageError):
    pass


class VocabularyMismatch(SageError):
    pass


class CorruptData(SageError):
    pass


class TooFewSamples(SageError):
    pass


# graph construction
class InvalidBandwidth(SageError):
    pass


# model
class ShapeError(SageError):
    pass


class NumericError(SageError):
    pass


class EmptyMask(SageError):
    pass


class CorruptCheckpoint(SageError):
    pass


class IncompatibleCheckpoint(SageError):
    pass


# training
class InvalidFraction(SageError):
    pass


class EmptyTrainingSet(SageError):
    pass


class DivergenceError(SageError):
    pass


# statistics
class DegenerateInput(SageError):
    pass


class TooFewObservations(SageError):
    pass


class InvalidP(SageError):
    pass


# imputation evaluation
class EmptyCurve(SageError):
    pass


# embedding analytics
class InvalidLayer(SageError):
    pass


class InvalidComponents(SageError):
    pass


class InvalidK(SageError):
    pass


class DegenerateCentroid(SageError):
    pass


class LabelMismatch(SageError):
    pass


class NoComparableTissues(SageError):
    pass


class MissingClass(SageError):
    pass


# perturbation
class UnknownGene(SageError):
    pass


class TooFewGenes(SageError):
    pass


# synthetic data
class ConfigError(SageError):
    pass
