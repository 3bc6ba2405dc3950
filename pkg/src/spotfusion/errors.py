"""Exception hierarchy.

Three exit-code families: configuration problems (exit 2), data problems
(exit 3), numerical failures (exit 4).  Everything derives from
SpotFusionError so callers can catch the whole family at once.
"""


class SpotFusionError(Exception):
    pass


class ConfigError(SpotFusionError):
    """Bad configuration: unknown key, unparsable value, missing required field."""


class DataError(SpotFusionError):
    """Problems with input files or their mutual consistency."""


class MissingFile(DataError):
    pass


class MalformedRow(DataError):
    """A CSV row that cannot be parsed; message carries the line number."""


class BarcodeMismatch(DataError):
    """A barcode present in one table but absent from a companion table."""


class EmptyResult(DataError):
    """A filter or selection removed everything."""


class RowMisalignment(DataError):
    """Two row-aligned matrices disagree on length."""


class MissingEmbeddingFile(DataError):
    pass


class EmbeddingShapeMismatch(DataError):
    pass


class CenterOutsideImage(DataError):
    """A patch center falls outside the image bounds."""


class TooFewQualifiedPatches(DataError):
    pass


class NumericalError(SpotFusionError):
    """Numerical failure: divergence, degenerate statistics, bad shapes."""


class NonFinite(NumericalError):
    pass


class TooFewPoints(NumericalError):
    pass


class TooFewSpots(NumericalError):
    pass


class DimensionMismatch(NumericalError):
    pass


class SampleTooSmall(NumericalError):
    pass


class SingleRow(NumericalError):
    pass


class ZeroBandwidth(NumericalError):
    pass


class DegenerateCluster(NumericalError):
    pass


class DegenerateStats(NumericalError):
    pass


class DivergedLoss(NumericalError):
    pass


class ClusterCollapse(NumericalError):
    pass


class EmptyGenerated(NumericalError):
    pass
