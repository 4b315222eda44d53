"""Exception hierarchy shared by every hiermem module."""


class HierMemError(Exception):
    """Base class for all hiermem errors."""


# core
class InvalidGrouping(HierMemError):
    pass


class NonSurjectiveGrouping(InvalidGrouping):
    pass


class NoCompression(HierMemError):
    pass


class EmptyGroup(HierMemError):
    pass


class UnknownNode(HierMemError, KeyError):
    pass


class InvalidGraph(HierMemError):
    pass


class DimensionMismatch(HierMemError):
    pass


class LevelBuildError(HierMemError):
    """Wraps a coarsening failure with the level that produced it."""

    def __init__(self, level: int, cause: Exception):
        super().__init__(f"level {level}: {type(cause).__name__}: {cause}")
        self.level = level
        self.cause = cause


class InvalidHierarchyFile(HierMemError):
    pass


# extract
class EmptyDocument(HierMemError):
    pass


class MissingStructure(HierMemError):
    pass


class DanglingDependency(HierMemError):
    pass


# coarsen
class MissingFeature(HierMemError):
    pass


class TooFewUnits(HierMemError):
    pass


class NoEdges(HierMemError):
    pass


class GeneratorUnavailable(HierMemError):
    pass


class DegeneratePartition(HierMemError):
    pass


# traverse
class BeamWidthMismatch(HierMemError):
    pass


class PolicyStalled(HierMemError):
    pass


class UnknownAlgorithm(HierMemError):
    pass


# measure / synthworld
class UnknownVariable(HierMemError):
    pass


class InvalidTable(HierMemError):
    pass


class EmptyContent(HierMemError):
    pass


class TooLargeToEnumerate(HierMemError):
    pass


class InvalidEpsilon(HierMemError):
    pass


class InvalidGroupCount(HierMemError):
    pass


class InvalidRatio(HierMemError):
    pass


class CyclicTaskGraph(HierMemError):
    pass


class DimTooSmall(HierMemError):
    pass


# harness
class ConfigError(HierMemError):
    pass
