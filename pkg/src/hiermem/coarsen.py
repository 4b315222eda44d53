"""Grouping functions, affinities and the representative-function spectrum."""

from __future__ import annotations

import json
import math
import subprocess
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .core import CorpusStats, Grouping, Unit, UnitGraph, lift_unit, terms, tokenize
from .errors import (
    DegeneratePartition,
    EmptyGroup,
    GeneratorUnavailable,
    MissingFeature,
    NoEdges,
    TooFewUnits,
)

AFFINITY_KINDS = ("cosine", "connectivity", "path-lcp", "temporal", "composite")
RHO_KINDS = ("concat", "truncate", "keywords", "label", "external")
_DEFAULT_SS = {"concat": "high", "truncate": "mid", "keywords": "mid", "label": "low"}


# ---------------------------------------------------------------------------
# Affinity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffinityMatrix:
    ids: tuple[str, ...]
    matrix: np.ndarray
    kind: str

    def __post_init__(self) -> None:
        if not np.allclose(self.matrix, self.matrix.T, atol=1e-12):
            raise ValueError("affinity matrix must be symmetric")
        if (self.matrix < 0).any():
            raise ValueError("affinity entries must be non-negative")

    def value(self, u: str, v: str) -> float:
        idx = {k: i for i, k in enumerate(self.ids)}
        return float(self.matrix[idx[u], idx[v]])


def _require(graph: UnitGraph, attr: str, pred: Callable[[Unit], bool]) -> list[Unit]:
    units = graph.sorted_units()
    missing = [u.id for u in units if not pred(u)]
    if missing:
        raise MissingFeature(f"{attr} missing on units {missing[:5]}")
    return units


def _cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = vectors / safe[:, None]
    sim = unit @ unit.T
    sim[norms == 0, :] = 0.0
    sim[:, norms == 0] = 0.0
    return np.clip(sim, 0.0, 1.0)


def median_gap(timestamps: Iterable[int]) -> float:
    """Median gap between consecutive distinct sorted timestamps (1.0 if undefined)."""
    ts = sorted(set(timestamps))
    gaps = [b - a for a, b in zip(ts, ts[1:])]
    return float(np.median(gaps)) if gaps else 1.0


def affinity(
    graph: UnitGraph,
    kind: str,
    *,
    tau_scale: float | None = None,
    weights: Mapping[str, float] | None = None,
) -> AffinityMatrix:
    """Pairwise affinity over the graph's units (ids in ascending order, zero diagonal).

    cosine: max(0, cos) of embeddings; connectivity: weight x probability of
    the strongest edge between the pair; path-lcp: common-prefix length over
    the longer path; temporal: exp(-|dt| / tau_scale), tau_scale defaulting
    to the median consecutive gap; composite: convex combination given by
    ``weights`` (kind -> weight).
    """
    ids = tuple(graph.ids)
    n = len(ids)
    if kind == "cosine":
        units = _require(graph, "embedding", lambda u: u.embedding is not None)
        W = _cosine_matrix(np.array([u.vector for u in units]))
    elif kind == "connectivity":
        pos = {k: i for i, k in enumerate(ids)}
        W = np.zeros((n, n))
        for e in graph.edges:
            i, j = pos[e.source], pos[e.target]
            W[i, j] = W[j, i] = max(W[i, j], e.expected_weight)
    elif kind == "path-lcp":
        units = _require(graph, "path", lambda u: len(u.path) > 0)
        W = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                p, q = units[i].path, units[j].path
                lcp = 0
                for a, b in zip(p, q):
                    if a != b:
                        break
                    lcp += 1
                W[i, j] = W[j, i] = lcp / max(len(p), len(q))
    elif kind == "temporal":
        units = _require(graph, "timestamp", lambda u: u.timestamp is not None)
        t = np.array([u.timestamp for u in units], dtype=float)
        scale = tau_scale if tau_scale is not None else median_gap(u.timestamp for u in units)
        if scale <= 0:
            scale = 1.0
        W = np.exp(-np.abs(t[:, None] - t[None, :]) / scale)
    elif kind == "composite":
        if not weights:
            raise ValueError("composite affinity needs weights")
        total = sum(weights.values())
        if any(w < 0 for w in weights.values()) or not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ValueError("composite weights must be non-negative and sum to 1")
        W = np.zeros((n, n))
        for sub, w in sorted(weights.items()):
            if sub == "composite":
                raise ValueError("composite affinity cannot nest")
            W += w * affinity(graph, sub, tau_scale=tau_scale).matrix
    else:
        raise ValueError(f"unknown affinity kind {kind!r}")
    W = np.array(W, dtype=float)
    np.fill_diagonal(W, 0.0)
    return AffinityMatrix(ids, W, kind)


def coherence_gap(W: AffinityMatrix, grouping: Grouping) -> float:
    """Mean within-group affinity minus mean between-group affinity.

    Pairs are unordered and distinct; under soft grouping a pair is "within"
    when the two units share any group.
    """
    if grouping.m < 2:
        raise DegeneratePartition("coherence gap needs at least two groups")
    within, between = [], []
    ids = W.ids
    for i in range(len(ids)):
        gi = grouping.assignment[ids[i]]
        for j in range(i + 1, len(ids)):
            (within if gi & grouping.assignment[ids[j]] else between).append(W.matrix[i, j])
    if not within or not between:
        raise DegeneratePartition("partition has no within-group or no between-group pairs")
    return math.fsum(within) / len(within) - math.fsum(between) / len(between)


# ---------------------------------------------------------------------------
# Groupings
# ---------------------------------------------------------------------------


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            rest = [i for i in range(n) if i not in chosen]
            nxt = rest[0]
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int) -> tuple[np.ndarray, np.ndarray, float]:
    k = len(centers)
    labels = np.full(len(X), -1)
    for _ in range(max_iter):
        dist = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        # empty cluster repair: steal the farthest point of the largest cluster
        counts = np.bincount(new, minlength=k)
        while (counts == 0).any():
            empty = int(np.flatnonzero(counts == 0)[0])
            big = int(counts.argmax())
            members = np.flatnonzero(new == big)
            far = members[int(dist[members, big].argmax())]
            new[far] = empty
            centers[empty] = X[far]
            counts = np.bincount(new, minlength=k)
        if (new == labels).all():
            break
        labels = new
        centers = np.array([X[labels == j].mean(axis=0) for j in range(k)])
    inertia = float(((X - centers[labels]) ** 2).sum())
    return labels, centers, inertia


def group_kmeans(
    graph: UnitGraph,
    k: int,
    seed: int = 0,
    *,
    overlap: float = 0.0,
    n_init: int = 4,
    max_iter: int = 100,
) -> Grouping:
    """k-means++ / Lloyd clustering of unit embeddings.

    Units are processed in ascending id order so assignment ties resolve
    toward lower ids and lower centroid indices.  ``overlap > 0`` produces a
    soft grouping: a unit joins every centroid within ``(1 + overlap)`` of its
    nearest distance.
    """
    units = _require(graph, "embedding", lambda u: u.embedding is not None)
    n = len(units)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= n:
        raise TooFewUnits(f"k={k} needs more than {n} units")
    X = np.array([u.vector for u in units])
    rng = np.random.default_rng(seed)
    best: tuple[np.ndarray, np.ndarray, float] | None = None
    for _ in range(max(1, n_init)):
        run = _lloyd(X, _kmeanspp(X, k, rng), max_iter)
        if best is None or run[2] < best[2] - 1e-12:
            best = run
    labels, centers, _ = best
    if overlap > 0:
        dist = np.sqrt(((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2))
        assign = {
            units[i].id: frozenset(np.flatnonzero(dist[i] <= (1 + overlap) * dist[i].min()).tolist())
            for i in range(n)
        }
        return Grouping(assign, k).canonical()
    return Grouping.from_labels({units[i].id: int(labels[i]) for i in range(n)}).canonical()


def _symmetric_weights(graph: UnitGraph) -> tuple[list[str], list[dict[int, float]], list[float]]:
    ids = graph.ids
    pos = {k: i for i, k in enumerate(ids)}
    adj: list[dict[int, float]] = [dict() for _ in ids]
    loops = [0.0] * len(ids)
    for e in graph.edges:
        w = e.expected_weight
        if w <= 0:
            continue
        i, j = pos[e.source], pos[e.target]
        if i == j:
            loops[i] += w
        else:
            adj[i][j] = adj[i].get(j, 0.0) + w
            adj[j][i] = adj[j].get(i, 0.0) + w
    return ids, adj, loops


def modularity(graph: UnitGraph, grouping: Grouping, resolution: float = 1.0) -> float:
    """Newman modularity of a hard grouping on the symmetrised expected-weight graph."""
    ids, adj, loops = _symmetric_weights(graph)
    label = {uid: next(iter(grouping.assignment[uid])) for uid in ids}
    deg = [sum(a.values()) + 2 * lp for a, lp in zip(adj, loops)]
    m = sum(deg) / 2
    if m == 0:
        raise NoEdges("modularity undefined without edges")
    internal: Counter[int] = Counter()
    tot: Counter[int] = Counter()
    for i, uid in enumerate(ids):
        c = label[uid]
        tot[c] += deg[i]
        internal[c] += loops[i]
        for j, w in adj[i].items():
            if j > i and label[ids[j]] == c:
                internal[c] += w
    return sum(internal[c] / m - resolution * (tot[c] / (2 * m)) ** 2 for c in tot)


def _one_level(
    adj: list[dict[int, float]], loops: list[float], resolution: float, order: Sequence[int]
) -> tuple[list[int], bool]:
    n = len(adj)
    deg = [sum(a.values()) + 2 * lp for a, lp in zip(adj, loops)]
    m2 = sum(deg)
    comm = list(range(n))
    tot = list(deg)
    moved_any = False
    while True:
        moved = False
        for i in order:
            ci = comm[i]
            links: dict[int, float] = {}
            for j, w in adj[i].items():
                links[comm[j]] = links.get(comm[j], 0.0) + w
            tot[ci] -= deg[i]
            best_c = ci
            best_gain = links.get(ci, 0.0) - resolution * tot[ci] * deg[i] / m2
            for c in sorted(links):
                gain = links[c] - resolution * tot[c] * deg[i] / m2
                if gain > best_gain + 1e-12:
                    best_c, best_gain = c, gain
            tot[best_c] += deg[i]
            if best_c != ci:
                comm[i] = best_c
                moved = moved_any = True
        if not moved:
            break
    return comm, moved_any


def group_modularity(graph: UnitGraph, resolution: float = 1.0, seed: int = 0) -> Grouping:
    """Louvain-style greedy modularity maximisation.

    Local moves until no gain, then aggregation of communities into nodes,
    repeated to a fixpoint.  The node visit order of each pass is a seeded
    permutation, so the result is a pure function of (graph, resolution, seed).
    Edges contribute their expected weight (weight x probability).
    """
    ids, adj, loops = _symmetric_weights(graph)
    if not any(adj) and not any(loops):
        raise NoEdges("graph has no weighted edges")
    rng = np.random.default_rng(seed)
    membership = list(range(len(ids)))
    while True:
        order = rng.permutation(len(adj)).tolist()
        comm, moved = _one_level(adj, loops, resolution, order)
        if not moved:
            break
        renum = {c: k for k, c in enumerate(sorted(set(comm)))}
        membership = [renum[comm[c]] for c in membership]
        size = len(renum)
        new_adj: list[dict[int, float]] = [dict() for _ in range(size)]
        new_loops = [0.0] * size
        for i in range(len(adj)):
            ci = renum[comm[i]]
            new_loops[ci] += loops[i]
            for j, w in adj[i].items():
                cj = renum[comm[j]]
                if ci == cj:
                    if j > i:
                        new_loops[ci] += w
                else:
                    new_adj[ci][cj] = new_adj[ci].get(cj, 0.0) + w
        adj, loops = new_adj, new_loops
    return Grouping.from_labels({ids[i]: membership[i] for i in range(len(ids))}).canonical()


def group_by_path_prefix(graph: UnitGraph, depth: int) -> Grouping:
    if depth < 1:
        raise ValueError("depth must be >= 1")
    units = _require(graph, "path", lambda u: len(u.path) > 0)
    keys = sorted({u.path[:depth] for u in units})
    index = {k: j for j, k in enumerate(keys)}
    return Grouping.from_labels({u.id: index[u.path[:depth]] for u in units})


def group_temporal(graph: UnitGraph, gap_seconds: float) -> Grouping:
    """Sort by timestamp and cut wherever consecutive gap exceeds ``gap_seconds``."""
    units = _require(graph, "timestamp", lambda u: u.timestamp is not None)
    units.sort(key=lambda u: (u.timestamp, u.id))
    labels, g = {}, 0
    for prev, cur in zip([None] + units[:-1], units):
        if prev is not None and cur.timestamp - prev.timestamp > gap_seconds:
            g += 1
        labels[cur.id] = g
    return Grouping.from_labels(labels)


def group_sequential(graph: UnitGraph, size: int) -> Grouping:
    """Consecutive runs of ``size`` units in id order (the last run may be short)."""
    if size < 1:
        raise ValueError("size must be >= 1")
    return Grouping.from_labels({uid: i // size for i, uid in enumerate(graph.ids)})


@dataclass(frozen=True)
class GroupingSpec:
    """Named, serialisable grouping strategy usable as a level's grouping callable.

    ``kmeans`` accepts ``k`` or ``branching`` (k = ceil(n / branching)).
    ``labels`` takes a precomputed ``{unit id: group}`` mapping.
    """

    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def __call__(self, graph: UnitGraph) -> Grouping:
        p = dict(self.params)
        if self.kind == "kmeans":
            k = p.pop("k", None)
            if k is None:
                k = math.ceil(len(graph) / p.pop("branching", 2))
            return group_kmeans(graph, int(k), int(p.pop("seed", 0)), **p)
        if self.kind == "modularity":
            return group_modularity(graph, p.get("resolution", 1.0), int(p.get("seed", 0)))
        if self.kind == "path_prefix":
            return group_by_path_prefix(graph, int(p["depth"]))
        if self.kind == "temporal":
            return group_temporal(graph, p["gap_seconds"])
        if self.kind == "sequential":
            return group_sequential(graph, int(p["size"]))
        if self.kind == "all":
            return group_sequential(graph, max(1, len(graph)))
        if self.kind == "labels":
            labels = p["labels"]
            return Grouping.from_labels({uid: labels[uid] for uid in graph.ids})
        raise ValueError(f"unknown grouping kind {self.kind!r}")

    def describe(self) -> dict[str, Any]:
        params = {k: v for k, v in self.params.items() if k != "labels"}
        return {"kind": self.kind, **params}


# ---------------------------------------------------------------------------
# Representatives
# ---------------------------------------------------------------------------


class Generator(Protocol):
    def generate(self, group_id: str, concat_text: str, max_tokens: int) -> str: ...


class HttpGenerator:
    """POSTs ``{group_id, concat_text, max_tokens}`` as JSON and reads ``{text}``."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url
        self.timeout = timeout

    def generate(self, group_id: str, concat_text: str, max_tokens: int) -> str:
        body = json.dumps(
            {"group_id": group_id, "concat_text": concat_text, "max_tokens": max_tokens}
        ).encode("utf-8")
        req = urllib.request.Request(
            self.url, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                if not 200 <= resp.status < 300:
                    raise GeneratorUnavailable(f"HTTP {resp.status}")
                payload = json.loads(resp.read().decode("utf-8"))
        except GeneratorUnavailable:
            raise
        except (urllib.error.URLError, TimeoutError, OSError, ValueError) as exc:
            raise GeneratorUnavailable(str(exc)) from exc
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise GeneratorUnavailable("response lacks a text field")
        return payload["text"]


class ProcessGenerator:
    """Runs a local command per request: JSON request on stdin, JSON ``{text}`` on stdout."""

    def __init__(self, argv: Sequence[str], timeout: float = 30.0):
        self.argv = list(argv)
        self.timeout = timeout

    def generate(self, group_id: str, concat_text: str, max_tokens: int) -> str:
        request = json.dumps(
            {"group_id": group_id, "concat_text": concat_text, "max_tokens": max_tokens}
        )
        try:
            proc = subprocess.run(
                self.argv, input=request, capture_output=True, text=True, timeout=self.timeout
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise GeneratorUnavailable(str(exc)) from exc
        if proc.returncode != 0:
            raise GeneratorUnavailable(f"exit {proc.returncode}: {proc.stderr.strip()[:200]}")
        try:
            payload = json.loads(proc.stdout)
            return str(payload["text"])
        except (ValueError, KeyError, TypeError) as exc:
            raise GeneratorUnavailable(f"bad response: {exc}") from exc


def concat_text(members: Sequence[Unit]) -> str:
    return " ".join(u.content for u in sorted(members, key=lambda u: u.id) if u.content)


def top_keywords(members: Sequence[Unit], k: int, corpus: CorpusStats | None = None) -> list[str]:
    """Top-k terms by within-group frequency x log(N / df); ties lexicographic.

    Without corpus statistics the idf factor is 1 (plain term frequency).
    """
    tf = Counter(t for u in members for t in terms(u.content))
    score = {t: c * (corpus.idf(t) if corpus else 1.0) for t, c in tf.items()}
    return [t for t, _ in sorted(score.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]


def top_entity(members: Sequence[Unit]) -> str | None:
    counts = Counter(e for u in members for e in u.entities)
    if not counts:
        return None
    return min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]


@dataclass(frozen=True)
class RhoSpec:
    kind: str
    k: int | None = None
    declared: str | None = None
    max_tokens: int = 256

    def __post_init__(self) -> None:
        if self.kind not in RHO_KINDS:
            raise ValueError(f"unknown rho kind {self.kind!r}")
        if self.kind in ("truncate", "keywords") and (self.k is None or self.k < 1):
            raise ValueError(f"{self.kind} needs k >= 1")
        if self.kind == "external" and self.declared not in ("high", "mid", "low"):
            raise ValueError("external rho must declare its SS class")

    @property
    def ss_class(self) -> str:
        return self.declared or _DEFAULT_SS[self.kind]

    @property
    def name(self) -> str:
        return f"{self.kind}({self.k})" if self.k is not None else self.kind

    def describe(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind, "ss_class": self.ss_class}
        if self.k is not None:
            d["k"] = self.k
        return d

    def represent(
        self,
        members: Sequence[Unit],
        *,
        group_id: str,
        corpus: CorpusStats | None = None,
        generator: Generator | None = None,
    ) -> str:
        if not members:
            raise EmptyGroup(group_id)
        members = sorted(members, key=lambda u: u.id)
        if self.kind == "concat":
            return concat_text(members)
        if self.kind == "truncate":
            return " ".join(tokenize(concat_text(members))[: self.k])
        if self.kind == "keywords":
            return " ".join(top_keywords(members, self.k, corpus))
        if self.kind == "label":
            ent = top_entity(members)
            if ent is not None:
                return ent
            return " ".join(top_keywords(members, 1, corpus))
        if generator is None:
            raise GeneratorUnavailable("external rho needs a generator client")
        return generator.generate(group_id, concat_text(members), self.max_tokens)


def make_representative(
    members: Iterable[Unit],
    spec: RhoSpec,
    generator: Generator | None = None,
    *,
    corpus: CorpusStats | None = None,
    rep_id: str = "rep",
    embedder: Callable[[str], Sequence[float]] | None = None,
) -> Unit:
    members = sorted(members, key=lambda u: u.id)
    if not members:
        raise EmptyGroup(rep_id)
    text = spec.represent(members, group_id=rep_id, corpus=corpus, generator=generator)
    return lift_unit(members, rep_id, text, embedder)
