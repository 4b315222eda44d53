"""Data model: units, unit graphs, groupings, coarsenings and hierarchies.

A hierarchy is built by repeatedly applying a coarsening ``(grouping, rho)``
to a unit graph.  Level 0 holds the atoms; each level above holds one
representative unit per group of the level below, with child edges pointing
down.  Soft groupings (a unit in several groups) produce a DAG.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyGroup,
    InvalidGraph,
    InvalidGrouping,
    InvalidHierarchyFile,
    LevelBuildError,
    NoCompression,
    NonSurjectiveGrouping,
    UnknownNode,
)

FORMAT_VERSION = 1
EDGE_KINDS = ("none", "sequential", "relation")
SS_CLASSES = ("high", "mid", "low")

_TERM_RE = re.compile(r"\w+", re.UNICODE)


def whitespace_tokenize(text: str) -> list[str]:
    return text.split()


_tokenizer: Callable[[str], list[str]] = whitespace_tokenize


def set_tokenizer(fn: Callable[[str], list[str]] | None) -> None:
    """Install the tokenizer used for ``Unit.token_count``; ``None`` restores whitespace splitting."""
    global _tokenizer
    _tokenizer = fn or whitespace_tokenize


def tokenize(text: str) -> list[str]:
    return _tokenizer(text)


def count_tokens(text: str) -> int:
    return len(_tokenizer(text))


def terms(text: str) -> list[str]:
    """Lower-cased word terms, used by embeddings, lexical scoring and keywords."""
    return _TERM_RE.findall(text.lower())


@dataclass(frozen=True)
class Unit:
    """An atomic information item or a representative.

    ``token_count`` is derived from ``content`` with the active tokenizer and
    cannot be passed in.
    """

    id: str
    content: str = ""
    embedding: tuple[float, ...] | None = None
    timestamp: int | None = None
    entities: frozenset[str] = frozenset()
    path: tuple[str, ...] = ()
    token_count: int = field(init=False, compare=False)

    def __post_init__(self) -> None:
        if self.embedding is not None:
            object.__setattr__(self, "embedding", tuple(float(x) for x in self.embedding))
        if self.timestamp is not None:
            object.__setattr__(self, "timestamp", int(self.timestamp))
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "entities", frozenset(self.entities))
        object.__setattr__(self, "path", tuple(str(p) for p in self.path))
        object.__setattr__(self, "token_count", count_tokens(self.content))

    @property
    def vector(self) -> np.ndarray:
        if self.embedding is None:
            raise ValueError(f"unit {self.id!r} has no embedding")
        return np.asarray(self.embedding, dtype=float)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "content": self.content,
            "embedding": list(self.embedding) if self.embedding is not None else None,
            "timestamp": self.timestamp,
            "entities": sorted(self.entities),
            "path": list(self.path),
            "token_count": self.token_count,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Unit":
        return cls(
            id=d["id"],
            content=d.get("content", ""),
            embedding=d.get("embedding"),
            timestamp=d.get("timestamp"),
            entities=frozenset(d.get("entities", ())),
            path=tuple(d.get("path", ())),
        )


@dataclass(frozen=True)
class Edge:
    source: str
    target: str
    weight: float = 1.0
    probability: float = 1.0
    kind: str = "none"

    def __post_init__(self) -> None:
        if not 0.0 <= self.weight <= 1.0:
            raise InvalidGraph(f"edge weight {self.weight} outside [0, 1]")
        if not 0.0 < self.probability <= 1.0:
            raise InvalidGraph(f"edge probability {self.probability} outside (0, 1]")
        if self.kind not in EDGE_KINDS:
            raise InvalidGraph(f"unknown edge kind {self.kind!r}")

    @property
    def expected_weight(self) -> float:
        return self.weight * self.probability


@dataclass(frozen=True)
class UnitGraph:
    units: tuple[Unit, ...]
    edges: tuple[Edge, ...] = ()
    _index: dict[str, Unit] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "units", tuple(self.units))
        object.__setattr__(self, "edges", tuple(self.edges))
        index: dict[str, Unit] = {}
        for u in self.units:
            if u.id in index:
                raise InvalidGraph(f"duplicate unit id {u.id!r}")
            index[u.id] = u
        object.__setattr__(self, "_index", index)
        for e in self.edges:
            if e.source not in index or e.target not in index:
                raise InvalidGraph(f"edge {e.source!r}->{e.target!r} references a missing unit")
        dims = {len(u.embedding) for u in self.units if u.embedding is not None}
        if len(dims) > 1:
            raise DimensionMismatch(f"mixed embedding dimensions {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.units)

    def __contains__(self, uid: str) -> bool:
        return uid in self._index

    def unit(self, uid: str) -> Unit:
        try:
            return self._index[uid]
        except KeyError:
            raise UnknownNode(uid) from None

    @property
    def ids(self) -> list[str]:
        """Unit ids in ascending order."""
        return sorted(self._index)

    def sorted_units(self) -> list[Unit]:
        return [self._index[i] for i in self.ids]

    def with_units(self, units: Iterable[Unit]) -> "UnitGraph":
        return UnitGraph(tuple(units), self.edges)


@dataclass(frozen=True)
class Grouping:
    """Surjective (possibly soft) assignment of unit ids to groups ``0..m-1``."""

    assignment: Mapping[str, frozenset[int]]
    m: int

    def __post_init__(self) -> None:
        assignment = {str(k): frozenset(v) for k, v in self.assignment.items()}
        object.__setattr__(self, "assignment", assignment)
        used: set[int] = set()
        for uid, gs in assignment.items():
            if not gs:
                raise InvalidGrouping(f"unit {uid!r} has no group")
            for g in gs:
                if not 0 <= g < self.m:
                    raise InvalidGrouping(f"group index {g} outside [0, {self.m})")
            used |= gs
        missing = set(range(self.m)) - used
        if missing:
            raise NonSurjectiveGrouping(f"groups {sorted(missing)} have no members")

    @classmethod
    def from_labels(cls, labels: Mapping[str, int | Iterable[int]]) -> "Grouping":
        assignment = {
            uid: frozenset([int(g)]) if isinstance(g, (int, np.integer)) else frozenset(int(x) for x in g)
            for uid, g in labels.items()
        }
        m = 1 + max((g for gs in assignment.values() for g in gs), default=-1)
        return cls(assignment, m)

    @classmethod
    def from_groups(cls, groups: Sequence[Iterable[str]]) -> "Grouping":
        assignment: dict[str, set[int]] = {}
        for j, members in enumerate(groups):
            for uid in members:
                assignment.setdefault(uid, set()).add(j)
        return cls({k: frozenset(v) for k, v in assignment.items()}, len(groups))

    def members(self, j: int) -> list[str]:
        return sorted(uid for uid, gs in self.assignment.items() if j in gs)

    def groups(self) -> list[list[str]]:
        out: list[list[str]] = [[] for _ in range(self.m)]
        for uid in sorted(self.assignment):
            for g in sorted(self.assignment[uid]):
                out[g].append(uid)
        return out

    @property
    def is_hard(self) -> bool:
        return all(len(gs) == 1 for gs in self.assignment.values())

    def canonical(self) -> "Grouping":
        """Relabel groups by ascending smallest member id (deterministic order)."""
        groups = self.groups()
        order = sorted(range(self.m), key=lambda j: groups[j])
        return Grouping.from_groups([groups[j] for j in order])


class CorpusStats:
    """Document frequencies of terms over a set of units (for keyword scoring)."""

    def __init__(self, units: Iterable[Unit]):
        self.df: Counter[str] = Counter()
        self.n_docs = 0
        for u in units:
            self.n_docs += 1
            self.df.update(set(terms(u.content)))

    def idf(self, term: str) -> float:
        df = max(self.df.get(term, 0), 1)
        return math.log(max(self.n_docs, df) / df)


class Representative(Protocol):
    """A representative function: maps a group's members to representative text."""

    ss_class: str

    def represent(
        self,
        members: Sequence[Unit],
        *,
        group_id: str,
        corpus: CorpusStats | None = None,
        generator: Any = None,
    ) -> str: ...

    def describe(self) -> dict[str, Any]: ...


@dataclass(frozen=True)
class CoarseningResult:
    grouping: Grouping
    representatives: tuple[Unit, ...]
    declared_ss_class: str


def common_prefix(paths: Sequence[Sequence[str]]) -> tuple[str, ...]:
    if not paths:
        return ()
    out: list[str] = []
    for parts in zip(*paths):
        if all(p == parts[0] for p in parts):
            out.append(parts[0])
        else:
            break
    return tuple(out)


def lift_unit(
    members: Sequence[Unit],
    rep_id: str,
    content: str,
    embedder: Callable[[str], Sequence[float]] | None = None,
) -> Unit:
    """Build a representative unit carrying aggregated member features.

    path is the members' longest common prefix, timestamp the latest member
    timestamp, entities the union.  The embedding is the embedder applied to
    ``content`` when an embedder is given, else the normalised member mean.
    """
    if not members:
        raise EmptyGroup(f"group {rep_id!r} is empty")
    stamps = [u.timestamp for u in members if u.timestamp is not None]
    entities = frozenset().union(*(u.entities for u in members))
    embedding: Sequence[float] | None = None
    if embedder is not None:
        embedding = embedder(content)
    elif all(u.embedding is not None for u in members):
        mean = np.mean([u.vector for u in members], axis=0)
        norm = np.linalg.norm(mean)
        embedding = tuple(mean / norm) if norm > 0 else tuple(mean)
    return Unit(
        id=rep_id,
        content=content,
        embedding=embedding,
        timestamp=max(stamps) if stamps else None,
        entities=entities,
        path=common_prefix([u.path for u in members]),
    )


def rep_id(level: int, j: int) -> str:
    return f"L{level}:g{j:05d}"


def apply_coarsening(
    graph: UnitGraph,
    grouping: Grouping,
    rho: Representative,
    *,
    level: int = 1,
    embedder: Callable[[str], Sequence[float]] | None = None,
    generator: Any = None,
) -> CoarseningResult:
    unknown = set(grouping.assignment) - set(graph.ids)
    if unknown:
        raise InvalidGrouping(f"grouping names units not in the graph: {sorted(unknown)[:5]}")
    unassigned = set(graph.ids) - set(grouping.assignment)
    if unassigned:
        raise InvalidGrouping(f"units without a group: {sorted(unassigned)[:5]}")
    if grouping.m >= len(graph):
        raise NoCompression(f"{grouping.m} groups for {len(graph)} units")
    corpus = CorpusStats(graph.units)
    reps = []
    for j, ids in enumerate(grouping.groups()):
        if not ids:
            raise EmptyGroup(f"group {j} is empty")
        members = [graph.unit(i) for i in ids]
        rid = rep_id(level, j)
        text = rho.represent(members, group_id=rid, corpus=corpus, generator=generator)
        reps.append(lift_unit(members, rid, text, embedder))
    return CoarseningResult(grouping, tuple(reps), rho.ss_class)


def induced_edges(graph: UnitGraph, grouping: Grouping, level: int) -> list[Edge]:
    """Edges between representatives: max expected weight over crossing member edges."""
    best: dict[tuple[str, str], float] = {}
    for e in graph.edges:
        for gs in grouping.assignment[e.source]:
            for gt in grouping.assignment[e.target]:
                if gs == gt:
                    continue
                key = (rep_id(level, gs), rep_id(level, gt))
                best[key] = max(best.get(key, 0.0), e.expected_weight)
    return [Edge(s, t, weight=w, kind="relation") for (s, t), w in sorted(best.items()) if w > 0]


@dataclass(frozen=True)
class LevelSpec:
    """One coarsening step: a grouping strategy and a representative function.

    ``grouping`` is any callable ``UnitGraph -> Grouping``; if it has a
    ``describe()`` method its output is recorded as provenance.
    """

    grouping: Callable[[UnitGraph], Grouping]
    rho: Representative


def _describe(obj: Any) -> Any:
    if hasattr(obj, "describe"):
        return obj.describe()
    return getattr(obj, "__name__", repr(obj))


@dataclass(frozen=True)
class Hierarchy:
    levels: tuple[tuple[Unit, ...], ...]
    child_edges: Mapping[str, tuple[str, ...]]
    provenance: tuple[Mapping[str, Any], ...] = ()
    _nodes: dict[str, tuple[int, Unit]] = field(init=False, repr=False, compare=False)
    _parents: dict[str, list[str]] = field(init=False, repr=False, compare=False)
    _atoms_cache: dict[str, frozenset[str]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels", tuple(tuple(lv) for lv in self.levels))
        object.__setattr__(
            self, "child_edges", {k: tuple(v) for k, v in self.child_edges.items()}
        )
        object.__setattr__(self, "provenance", tuple(self.provenance))
        nodes: dict[str, tuple[int, Unit]] = {}
        for ell, lv in enumerate(self.levels):
            for u in lv:
                nodes.setdefault(u.id, (ell, u))
        parents: dict[str, list[str]] = {}
        for p in sorted(self.child_edges):
            for c in self.child_edges[p]:
                parents.setdefault(c, []).append(p)
        object.__setattr__(self, "_nodes", nodes)
        object.__setattr__(self, "_parents", parents)
        object.__setattr__(self, "_atoms_cache", {})

    @property
    def depth(self) -> int:
        """L, the index of the top level."""
        return len(self.levels) - 1

    @property
    def atoms(self) -> tuple[Unit, ...]:
        return self.levels[0]

    def node(self, node_id: str) -> Unit:
        try:
            return self._nodes[node_id][1]
        except KeyError:
            raise UnknownNode(node_id) from None

    def level_of(self, node_id: str) -> int:
        try:
            return self._nodes[node_id][0]
        except KeyError:
            raise UnknownNode(node_id) from None

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._nodes

    def children(self, node_id: str) -> tuple[str, ...]:
        if node_id not in self._nodes:
            raise UnknownNode(node_id)
        return self.child_edges.get(node_id, ())

    def parents(self, node_id: str) -> list[str]:
        if node_id not in self._nodes:
            raise UnknownNode(node_id)
        return list(self._parents.get(node_id, ()))

    def all_nodes(self) -> list[tuple[int, Unit]]:
        return [(ell, u) for ell, lv in enumerate(self.levels) for u in lv]

    def to_json(self) -> str:
        doc = {
            "version": FORMAT_VERSION,
            "levels": [[u.to_dict() for u in lv] for lv in self.levels],
            "child_edges": {k: list(v) for k, v in sorted(self.child_edges.items())},
            "provenance": list(self.provenance),
        }
        return json.dumps(doc, ensure_ascii=False, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Hierarchy":
        try:
            doc = json.loads(text)
            if doc.get("version") != FORMAT_VERSION:
                raise InvalidHierarchyFile(f"unsupported version {doc.get('version')!r}")
            levels = [[Unit.from_dict(d) for d in lv] for lv in doc["levels"]]
            edges = {k: tuple(v) for k, v in doc["child_edges"].items()}
            return cls(levels, edges, tuple(doc.get("provenance", ())))
        except InvalidHierarchyFile:
            raise
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise InvalidHierarchyFile(str(exc)) from exc

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> "Hierarchy":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_json(fh.read())
        except OSError as exc:
            raise InvalidHierarchyFile(str(exc)) from exc


def build_hierarchy(
    graph: UnitGraph,
    level_specs: Sequence[LevelSpec],
    *,
    embedder: Callable[[str], Sequence[float]] | None = None,
    generator: Any = None,
    source: Mapping[str, Any] | None = None,
) -> Hierarchy:
    if not level_specs:
        raise ValueError("at least one level spec is required")
    levels: list[tuple[Unit, ...]] = [tuple(graph.sorted_units())]
    child_edges: dict[str, tuple[str, ...]] = {}
    provenance: list[dict[str, Any]] = [{"level": 0, "kind": "atoms", **(source or {})}]
    current = graph
    for ell, spec in enumerate(level_specs, start=1):
        try:
            grouping = spec.grouping(current)
            result = apply_coarsening(
                current, grouping, spec.rho, level=ell, embedder=embedder, generator=generator
            )
        except LevelBuildError:
            raise
        except Exception as exc:
            raise LevelBuildError(ell, exc) from exc
        for j, ids in enumerate(result.grouping.groups()):
            child_edges[result.representatives[j].id] = tuple(ids)
        levels.append(result.representatives)
        provenance.append(
            {
                "level": ell,
                "grouping": _describe(spec.grouping),
                "rho": _describe(spec.rho),
                "ss_class": result.declared_ss_class,
            }
        )
        current = UnitGraph(result.representatives, induced_edges(current, result.grouping, ell))
    return Hierarchy(tuple(levels), child_edges, tuple(provenance))


@dataclass(frozen=True)
class Violation:
    level: int
    node: str | None
    message: str

    def __str__(self) -> str:
        where = f"level {self.level}" + (f", node {self.node}" if self.node else "")
        return f"{where}: {self.message}"


def validate_hierarchy(h: Hierarchy) -> list[Violation]:
    out: list[Violation] = []
    seen: dict[str, int] = {}
    for ell, lv in enumerate(h.levels):
        for u in lv:
            if u.id in seen:
                out.append(Violation(ell, u.id, f"duplicate id (also at level {seen[u.id]})"))
            else:
                seen[u.id] = ell
    if not h.levels or not h.levels[0]:
        out.append(Violation(0, None, "no atoms"))
    for ell in range(1, len(h.levels)):
        if len(h.levels[ell]) >= len(h.levels[ell - 1]):
            out.append(
                Violation(
                    ell,
                    None,
                    f"level does not shrink: |V_{ell}|={len(h.levels[ell])} "
                    f">= |V_{ell - 1}|={len(h.levels[ell - 1])}",
                )
            )
    for u in h.levels[0] if h.levels else ():
        if h.child_edges.get(u.id):
            out.append(Violation(0, u.id, "atom has children"))
    for parent in sorted(h.child_edges):
        if parent not in seen:
            out.append(Violation(-1, parent, "child edges from an unknown node"))
    for ell in range(1, len(h.levels)):
        below = {u.id for u in h.levels[ell - 1]}
        for u in h.levels[ell]:
            kids = h.child_edges.get(u.id, ())
            if not kids:
                out.append(Violation(ell, u.id, "node has no children"))
            for c in kids:
                if c not in below:
                    out.append(Violation(ell, u.id, f"child {c!r} is not at level {ell - 1}"))
    for ell in range(0, len(h.levels) - 1):
        for u in h.levels[ell]:
            if not h._parents.get(u.id):
                out.append(Violation(ell, u.id, "node has no parent"))
    return out


def atoms_under(h: Hierarchy, node_id: str) -> frozenset[str]:
    if node_id not in h:
        raise UnknownNode(node_id)
    cache = h._atoms_cache
    if node_id in cache:
        return cache[node_id]
    kids = h.child_edges.get(node_id, ())
    if h.level_of(node_id) == 0 or not kids:
        result = frozenset([node_id]) if h.level_of(node_id) == 0 else frozenset()
    else:
        result = frozenset().union(*(atoms_under(h, c) for c in kids))
    cache[node_id] = result
    return result
