"""Hierarchical memory engine: extraction, coarsening, traversal and information measures."""

from .core import (
    CoarseningResult,
    Edge,
    Grouping,
    Hierarchy,
    LevelSpec,
    Unit,
    UnitGraph,
    apply_coarsening,
    atoms_under,
    build_hierarchy,
    validate_hierarchy,
)
from .coarsen import GroupingSpec, RhoSpec, make_representative
from .traverse import Query, RetrievalResult

__version__ = "0.1.0"
