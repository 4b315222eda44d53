"""Extraction: raw documents, structured documents and execution traces to unit graphs."""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import Edge, Unit, UnitGraph, terms, tokenize
from .errors import DanglingDependency, DimensionMismatch, EmptyDocument, MissingStructure

TRACE_KINDS = ("thought", "action", "observation")
DEFAULT_DIM = 256


@dataclass(frozen=True)
class RawDocument:
    source_id: str
    text: str
    structure: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self) -> None:
        if self.structure is not None:
            object.__setattr__(
                self, "structure", tuple((int(lv), int(off)) for lv, off in self.structure)
            )


@dataclass(frozen=True)
class TraceEvent:
    index: int
    kind: str
    payload: str
    depends_on: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        if self.kind not in TRACE_KINDS:
            raise ValueError(f"trace kind must be one of {TRACE_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "depends_on", frozenset(int(d) for d in self.depends_on))


class EntityMatcher:
    """Dictionary and regex entity matcher.

    Dictionary names match case-insensitively on word boundaries and are
    reported in their dictionary spelling; regex matches are reported verbatim.
    """

    def __init__(self, dictionary: Iterable[str] = (), patterns: Iterable[str] = ()):
        self.dictionary = sorted(set(dictionary))
        self._dict_res = [
            (name, re.compile(r"(?<!\w)" + re.escape(name) + r"(?!\w)", re.IGNORECASE))
            for name in self.dictionary
        ]
        self._patterns = [re.compile(p) for p in patterns]

    def __call__(self, text: str) -> frozenset[str]:
        found = {name for name, rx in self._dict_res if rx.search(text)}
        for rx in self._patterns:
            found.update(m.group(0) for m in rx.finditer(text))
        return frozenset(found)


class HashedBagOfWords:
    """Deterministic hashed bag-of-words embedder with L2 normalisation.

    Counts are unsigned, so cosine similarities are never negative.  Empty
    text maps to the zero vector.
    """

    def __init__(self, dim: int = DEFAULT_DIM):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim

    def bucket(self, term: str) -> int:
        digest = hashlib.blake2b(term.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def __call__(self, text: str) -> tuple[float, ...]:
        v = np.zeros(self.dim)
        for t in terms(text):
            v[self.bucket(t)] += 1.0
        norm = np.linalg.norm(v)
        if norm > 0:
            v /= norm
        return tuple(v.tolist())

    def describe(self) -> dict:
        return {"kind": "hashed-bow", "dim": self.dim}


def _entities(matcher: Callable[[str], Iterable[str]] | None, text: str) -> frozenset[str]:
    return frozenset(matcher(text)) if matcher else frozenset()


def chunk_fixed(
    doc: RawDocument,
    chunk_tokens: int,
    *,
    entity_matcher: Callable[[str], Iterable[str]] | None = None,
) -> UnitGraph:
    """Split a document into consecutive chunks of at most ``chunk_tokens`` tokens."""
    if chunk_tokens < 1:
        raise ValueError("chunk_tokens must be >= 1")
    toks = tokenize(doc.text)
    if not toks:
        raise EmptyDocument(doc.source_id)
    units = []
    for i, start in enumerate(range(0, len(toks), chunk_tokens)):
        content = " ".join(toks[start : start + chunk_tokens])
        units.append(
            Unit(
                id=f"{doc.source_id}#{i:05d}",
                content=content,
                entities=_entities(entity_matcher, content),
                path=(doc.source_id, str(i)),
            )
        )
    edges = [
        Edge(a.id, b.id, weight=1.0, kind="sequential") for a, b in zip(units, units[1:])
    ]
    return UnitGraph(tuple(units), tuple(edges))


def _check_structure(doc: RawDocument, size: int) -> tuple[tuple[int, int], ...]:
    hints = doc.structure
    if not hints:
        raise MissingStructure(f"{doc.source_id}: no structure hints")
    prev = -1
    for level, off in hints:
        if level < 1:
            raise MissingStructure(f"{doc.source_id}: heading level {level} < 1")
        if off <= prev:
            raise MissingStructure(f"{doc.source_id}: offsets not strictly increasing at {off}")
        if not 0 <= off < size:
            raise MissingStructure(f"{doc.source_id}: offset {off} outside text")
        prev = off
    return hints


def parse_structural(
    doc: RawDocument,
    *,
    entity_matcher: Callable[[str], Iterable[str]] | None = None,
) -> UnitGraph:
    """One unit per leaf section; a unit's path is its heading trail.

    Hints are ``(heading level, byte offset)`` pairs into the UTF-8 text.  The
    heading line's leading ``#`` marks are stripped to form the title.  Text
    before the first heading is ignored.
    """
    raw = doc.text.encode("utf-8")
    hints = _check_structure(doc, len(raw))
    bounds = [off for _, off in hints] + [len(raw)]
    stack: list[tuple[int, str]] = []
    units: list[Unit] = []
    for i, (level, off) in enumerate(hints):
        try:
            section = raw[off : bounds[i + 1]].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MissingStructure(f"{doc.source_id}: offset splits a character") from exc
        heading, _, _ = section.partition("\n")
        title = heading.strip().lstrip("#").strip()
        while stack and stack[-1][0] >= level:
            stack.pop()
        stack.append((level, title))
        is_leaf = i + 1 == len(hints) or hints[i + 1][0] <= level
        if not is_leaf:
            continue
        content = section.strip()
        units.append(
            Unit(
                id=f"{doc.source_id}#s{i:05d}",
                content=content,
                entities=_entities(entity_matcher, content),
                path=tuple(t for _, t in stack),
            )
        )
    edges = [
        Edge(a.id, b.id, kind="sequential")
        for a, b in zip(units, units[1:])
        if a.path[:-1] == b.path[:-1]
    ]
    return UnitGraph(tuple(units), tuple(edges))


def segment_trace(
    events: Sequence[TraceEvent],
    *,
    entity_matcher: Callable[[str], Iterable[str]] | None = None,
) -> UnitGraph:
    """One unit per trace step, with relation edges from each dependency to its dependent."""
    if not events:
        raise ValueError("trace is empty")
    by_index = {e.index: e for e in events}
    if len(by_index) != len(events):
        raise ValueError("trace step indices must be unique")

    def uid(i: int) -> str:
        return f"step{i:06d}"

    units, edges = [], []
    for idx in sorted(by_index):
        ev = by_index[idx]
        content = f"{ev.kind}: {ev.payload}"
        units.append(
            Unit(
                id=uid(idx),
                content=content,
                timestamp=idx,
                entities=_entities(entity_matcher, content),
                path=("trace", ev.kind),
            )
        )
        for dep in sorted(ev.depends_on):
            if dep not in by_index or dep >= idx:
                raise DanglingDependency(f"step {idx} depends on missing earlier step {dep}")
            edges.append(Edge(uid(dep), uid(idx), kind="relation"))
    return UnitGraph(tuple(units), tuple(edges))


def embed_units(graph: UnitGraph, embedder: Callable[[str], Sequence[float]] | None = None) -> UnitGraph:
    embedder = embedder or HashedBagOfWords()
    units = [replace(u, embedding=tuple(embedder(u.content))) for u in graph.units]
    if len({len(u.embedding) for u in units}) > 1:
        raise DimensionMismatch("embedder returned vectors of different dimensions")
    return UnitGraph(tuple(units), graph.edges)


# file formats


def parse_trace(text: str) -> list[TraceEvent]:
    """Parse ``index<TAB>kind<TAB>deps<TAB>payload`` lines (deps comma separated)."""
    events = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t", 3)
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected 4 tab-separated fields")
        idx, kind, deps, payload = parts
        dep_set = frozenset(int(d) for d in deps.split(",") if d.strip())
        events.append(TraceEvent(int(idx), kind.strip(), payload, dep_set))
    return events


def load_structure_hints(path: str) -> tuple[tuple[int, int], ...]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if isinstance(doc, dict):
        doc = doc.get("headings", [])
    return tuple((int(lv), int(off)) for lv, off in doc)


def read_document(path: str, source_id: str | None = None) -> RawDocument:
    """Read a UTF-8 text file, picking up ``<path>.structure.json`` hints if present."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    sidecar = path + ".structure.json"
    hints = load_structure_hints(sidecar) if os.path.exists(sidecar) else None
    sid = source_id or os.path.splitext(os.path.basename(path))[0]
    return RawDocument(sid, text, hints)
