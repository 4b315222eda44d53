"""Budgeted traversal over a hierarchy.

Four strategies are provided: top-down beam refinement, collapsed search
over all levels, policy-driven navigation, and multi-view flat retrieval.
Every call to a relevance scorer is counted; ties are always broken by
ascending node id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, NamedTuple, Protocol, Sequence

import numpy as np

from .core import Hierarchy, Unit, atoms_under, terms
from .errors import BeamWidthMismatch, MissingFeature, PolicyStalled, UnknownAlgorithm

SCORE_KINDS = ("semantic", "lexical", "symbolic")


# ---------------------------------------------------------------------------
# Queries and predicates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeRange:
    lo: int
    hi: int

    def __call__(self, unit: Unit) -> bool:
        if unit.timestamp is None:
            raise MissingFeature(f"unit {unit.id!r} has no timestamp")
        return self.lo <= unit.timestamp <= self.hi

    def to_dict(self) -> dict[str, Any]:
        return {"type": "time", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class HasEntity:
    name: str

    def __call__(self, unit: Unit) -> bool:
        return self.name in unit.entities

    def to_dict(self) -> dict[str, Any]:
        return {"type": "entity", "name": self.name}


@dataclass(frozen=True)
class PathPrefix:
    prefix: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "prefix", tuple(str(p) for p in self.prefix))

    def __call__(self, unit: Unit) -> bool:
        return unit.path[: len(self.prefix)] == self.prefix

    def to_dict(self) -> dict[str, Any]:
        return {"type": "path_prefix", "prefix": list(self.prefix)}


Predicate = Callable[[Unit], bool]


def predicate_from_dict(d: Mapping[str, Any]) -> Predicate:
    kind = d.get("type")
    if kind == "time":
        return TimeRange(int(d["lo"]), int(d["hi"]))
    if kind == "entity":
        return HasEntity(str(d["name"]))
    if kind == "path_prefix":
        return PathPrefix(tuple(d["prefix"]))
    raise ValueError(f"unknown filter type {kind!r}")


@dataclass(frozen=True)
class Query:
    """A retrieval request.

    ``beams`` lists widths top level first (k_L, ..., k_0).  ``k`` is the
    collapsed-search pool size and ``d`` the multi-view density hint.
    ``terms`` defaults to the lower-cased terms of ``text``.
    """

    text: str = ""
    embedding: tuple[float, ...] | None = None
    terms: tuple[str, ...] | None = None
    filters: tuple[Predicate, ...] = ()
    budget: int = 0
    beams: tuple[int, ...] | None = None
    k: int = 1
    d: int = 1

    def __post_init__(self) -> None:
        if self.budget < 0:
            raise ValueError("budget must be non-negative")
        if self.embedding is not None:
            object.__setattr__(self, "embedding", tuple(float(x) for x in self.embedding))
        if self.terms is None:
            object.__setattr__(self, "terms", tuple(terms(self.text)))
        else:
            object.__setattr__(self, "terms", tuple(t.lower() for t in self.terms))
        object.__setattr__(self, "filters", tuple(self.filters))
        if self.beams is not None:
            if any(b < 1 for b in self.beams):
                raise ValueError("beam widths must be positive")
            object.__setattr__(self, "beams", tuple(int(b) for b in self.beams))

    @classmethod
    def from_text(cls, text: str, embedder: Callable[[str], Sequence[float]] | None, **kw: Any) -> "Query":
        emb = tuple(embedder(text)) if embedder is not None else None
        return cls(text=text, embedding=emb, **kw)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], embedder: Callable[[str], Sequence[float]] | None = None) -> "Query":
        text = d.get("text", "")
        emb = d.get("embedding")
        if emb is None and embedder is not None:
            emb = embedder(text)
        budget = d.get("budget", 0)
        return cls(
            text=text,
            embedding=tuple(emb) if emb is not None else None,
            terms=tuple(d["terms"]) if "terms" in d else None,
            filters=tuple(predicate_from_dict(f) for f in d.get("filters", ())),
            budget=int(budget) if budget is not None else 0,
            beams=tuple(d["beams"]) if d.get("beams") else None,
            k=int(d.get("k", 1)),
            d=int(d.get("d", 1)),
        )


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def score(query: Query, unit: Unit, kind: str = "semantic") -> float:
    """Relevance of ``unit`` to ``query`` under one view (uncounted)."""
    if kind == "semantic":
        if query.embedding is None:
            raise MissingFeature("semantic score needs a query embedding")
        if unit.embedding is None:
            raise MissingFeature(f"semantic score needs embeddings (unit {unit.id!r})")
        q = np.asarray(query.embedding)
        v = unit.vector
        nq, nv = np.linalg.norm(q), np.linalg.norm(v)
        if nq == 0 or nv == 0:
            return 0.0
        return max(0.0, float(q @ v / (nq * nv)))
    if kind == "lexical":
        qs, us = set(query.terms), set(terms(unit.content))
        overlap = len(qs & us)
        if overlap == 0:
            return 0.0
        precision, recall = overlap / len(us), overlap / len(qs)
        return 2 * precision * recall / (precision + recall)
    if kind == "symbolic":
        return 1.0 if all(p(unit) for p in query.filters) else 0.0
    raise ValueError(f"unknown score kind {kind!r}")


class Scorer:
    """Counts relevance evaluations and records the visit trace."""

    def __init__(self) -> None:
        self.evals = 0
        self.trace: list[tuple[int, str]] = []

    def __call__(self, query: Query, unit: Unit, kind: str = "semantic", level: int = 0) -> float:
        self.evals += 1
        self.trace.append((level, unit.id))
        return score(query, unit, kind)


@dataclass(frozen=True)
class RetrievalResult:
    atoms: tuple[str, ...]
    tokens_used: int
    relevance_evals: int
    visit_trace: tuple[tuple[int, str], ...] = field(default=())

    def to_dict(self) -> dict[str, Any]:
        return {
            "atoms": list(self.atoms),
            "tokens_used": self.tokens_used,
            "relevance_evals": self.relevance_evals,
            "visit_trace": [[lv, nid] for lv, nid in self.visit_trace],
        }


class Selection(NamedTuple):
    atoms: list[str]
    tokens_used: int


def _rank(scored: Sequence[tuple[Unit, float]]) -> list[tuple[Unit, float]]:
    return sorted(scored, key=lambda us: (-us[1], us[0].id))


def top_k(scored: Sequence[tuple[Unit, float]], k: int) -> list[tuple[Unit, float]]:
    return _rank(scored)[:k]


def budget_truncate(candidates: Sequence[tuple[Unit, float]], budget: int) -> Selection:
    """First-fit-decreasing: scan by descending score (ties by id), skip atoms that do not fit."""
    chosen: list[str] = []
    seen: set[str] = set()
    used = 0
    for unit, s in _rank(candidates):
        if not math.isfinite(s):
            raise ValueError(f"non-finite score for {unit.id!r}")
        if unit.id in seen:
            continue
        seen.add(unit.id)
        if used + unit.token_count <= budget:
            chosen.append(unit.id)
            used += unit.token_count
    return Selection(chosen, used)


def _result(sel: Selection, scorer: Scorer) -> RetrievalResult:
    return RetrievalResult(tuple(sel.atoms), sel.tokens_used, scorer.evals, tuple(scorer.trace))


# ---------------------------------------------------------------------------
# Algorithms
# ---------------------------------------------------------------------------


def traverse_flat(h: Hierarchy, query: Query, kind: str = "semantic") -> RetrievalResult:
    """Score every atom and budget-truncate; the O(n) baseline."""
    scorer = Scorer()
    scored = [(u, scorer(query, u, kind, 0)) for u in h.atoms]
    return _result(budget_truncate(scored, query.budget), scorer)


def traverse_top_down(h: Hierarchy, query: Query) -> RetrievalResult:
    """Beam refinement from the top level down to the atoms."""
    L = h.depth
    if query.beams is None or len(query.beams) != L + 1:
        raise BeamWidthMismatch(
            f"need {L + 1} beam widths for depth {L}, got {None if query.beams is None else len(query.beams)}"
        )
    scorer = Scorer()
    scored = [(u, scorer(query, u, "semantic", L)) for u in sorted(h.levels[L], key=lambda u: u.id)]
    selected = top_k(scored, query.beams[0])
    for ell in range(L - 1, -1, -1):
        cand_ids = sorted({c for u, _ in selected for c in h.children(u.id)})
        scored = [(h.node(c), scorer(query, h.node(c), "semantic", ell)) for c in cand_ids]
        selected = top_k(scored, query.beams[L - ell])
    return _result(budget_truncate(selected, query.budget), scorer)


def traverse_collapsed(h: Hierarchy, query: Query, k: int | None = None) -> RetrievalResult:
    """Score the pooled nodes of every level, take top-k, expand non-leaves to atoms.

    Atoms reached through expansion inherit the expanding node's score; an
    atom reached more than once keeps its best score.
    """
    k = query.k if k is None else k
    if k < 1:
        raise ValueError("k must be >= 1")
    scorer = Scorer()
    pool = [(u, scorer(query, u, "semantic", ell)) for ell, u in h.all_nodes()]
    best: dict[str, float] = {}
    for unit, s in top_k(pool, k):
        ids = [unit.id] if h.level_of(unit.id) == 0 else sorted(atoms_under(h, unit.id))
        for a in ids:
            if s > best.get(a, -math.inf):
                best[a] = s
    cands = [(h.node(a), s) for a, s in best.items()]
    return _result(budget_truncate(cands, query.budget), scorer)


class Policy(Protocol):
    def choose(
        self, candidates: Sequence[Unit], query: Query, scorer: Scorer, context: Sequence[str]
    ) -> str: ...


class GreedyPolicy:
    """Pick the highest semantic score among candidates; each node is scored at most once."""

    def __init__(self, hierarchy: Hierarchy):
        self.h = hierarchy
        self.cache: dict[str, float] = {}

    def choose(
        self, candidates: Sequence[Unit], query: Query, scorer: Scorer, context: Sequence[str]
    ) -> str:
        for u in candidates:
            if u.id not in self.cache:
                self.cache[u.id] = scorer(query, u, "semantic", self.h.level_of(u.id))
        return top_k([(u, self.cache[u.id]) for u in candidates], 1)[0][0].id


class ExternalPolicy:
    """Delegates the choice to a generator client (same contract as external rho).

    The request payload lists the query, the current context and the
    candidate ids; the response text must be one candidate id.
    """

    def __init__(self, client: Any, max_tokens: int = 32):
        self.client = client
        self.max_tokens = max_tokens

    def choose(
        self, candidates: Sequence[Unit], query: Query, scorer: Scorer, context: Sequence[str]
    ) -> str:
        lines = [f"query: {query.text}", "context:", *context, "candidates:"]
        lines += [f"{u.id}\t{u.content}" for u in candidates]
        return self.client.generate("navigate", "\n".join(lines), self.max_tokens).strip()


def traverse_navigate(
    h: Hierarchy,
    query: Query,
    policy: Policy | None = None,
    max_steps: int | None = None,
) -> RetrievalResult:
    """Iterative navigation from a virtual root over the top level.

    Each step the policy picks one not-yet-chosen node from the frontier.
    Chosen atoms are collected if they fit the remaining budget; chosen
    internal nodes add their children to the frontier and their content to
    the context.  Only collected atoms are charged against the budget.
    """
    policy = policy or GreedyPolicy(h)
    if max_steps is None:
        max_steps = sum(len(lv) for lv in h.levels)
    scorer = Scorer()
    top = sorted(h.levels[h.depth], key=lambda u: u.id)
    context = [" ".join(u.content for u in top)]
    frontier = [u.id for u in top]
    in_frontier = set(frontier)
    chosen: set[str] = set()
    collected: list[str] = []
    used = 0
    steps = 0
    while steps < max_steps and used < query.budget:
        avail = [h.node(n) for n in frontier if n not in chosen]
        if not avail:
            break
        pick = policy.choose(avail, query, scorer, context)
        if pick not in {u.id for u in avail}:
            raise PolicyStalled(f"policy chose {pick!r}, which is not an open candidate")
        chosen.add(pick)
        steps += 1
        node = h.node(pick)
        if h.level_of(pick) == 0:
            if used + node.token_count <= query.budget:
                collected.append(pick)
                used += node.token_count
        else:
            kids = sorted(h.children(pick))
            context.append(" ".join(h.node(c).content for c in kids))
            for c in kids:
                if c not in in_frontier:
                    in_frontier.add(c)
                    frontier.append(c)
    return RetrievalResult(tuple(collected), used, scorer.evals, tuple(scorer.trace))


def traverse_multiview(h: Hierarchy, query: Query) -> RetrievalResult:
    """Independent semantic, lexical and symbolic top-n over the atoms, unioned.

    n = max(1, d).  A view is skipped when the query carries no input for it
    (no embedding, no terms, no filters); atoms scoring 0 in a view are not
    candidates of that view.
    """
    n = max(1, query.d)
    scorer = Scorer()
    views = []
    if query.embedding is not None:
        views.append("semantic")
    if query.terms:
        views.append("lexical")
    if query.filters:
        views.append("symbolic")
    atoms = sorted(h.atoms, key=lambda u: u.id)
    best: dict[str, float] = {}
    for view in views:
        scored = [(u, scorer(query, u, view, 0)) for u in atoms]
        for u, s in top_k([us for us in scored if us[1] > 0], n):
            best[u.id] = max(best.get(u.id, 0.0), s)
    cands = [(h.node(a), s) for a, s in best.items()]
    return _result(budget_truncate(cands, query.budget), scorer)


ALGORITHMS: dict[str, Callable[..., RetrievalResult]] = {
    "topdown": traverse_top_down,
    "collapsed": traverse_collapsed,
    "navigate": traverse_navigate,
    "multiview": traverse_multiview,
    "flat": traverse_flat,
}


def run(h: Hierarchy, query: Query, algorithm: str, **kw: Any) -> RetrievalResult:
    try:
        fn = ALGORITHMS[algorithm]
    except KeyError:
        raise UnknownAlgorithm(f"unknown algorithm {algorithm!r}; choose from {sorted(ALGORITHMS)}") from None
    return fn(h, query, **kw)
