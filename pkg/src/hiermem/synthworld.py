"""Synthetic worlds with known ground truth.

``gen_world`` builds a small latent-tree generative model whose joint
distribution is enumerated exactly.  ``gen_planted_corpus`` and
``gen_disjoint_label_corpus`` build unit corpora with planted block
structure.  ``gen_routing_task`` builds the (group index, routing evidence)
joint used for Fano checks.

Every generator draws from ``numpy.random.default_rng(seed)`` (PCG64), so
output is a pure function of its arguments.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .core import Grouping, Unit, UnitGraph, terms
from .errors import DimTooSmall, TooLargeToEnumerate
from .extract import HashedBagOfWords
from .measure import MAX_OUTCOMES, JointTable

GENERATOR_VERSION = "pcg64-v1"


# ---------------------------------------------------------------------------
# Discrete worlds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QueryFamily:
    var: str
    level: int
    relevant: dict[Any, frozenset[str]]


@dataclass
class DiscreteWorld:
    """Latent topic tree over discrete atoms with an exact joint table.

    ``latent_levels[0]`` holds the root; topics on the last latent level emit
    the atoms.  ``tables[v]`` is the root marginal for the root and a
    row-stochastic parent-to-child matrix otherwise; ``emission[x]`` maps the
    parent topic to the atom's symbol distribution.
    """

    latent_levels: tuple[tuple[str, ...], ...]
    parents: dict[str, str]
    tables: dict[str, np.ndarray]
    emission: dict[str, np.ndarray]
    atom_vars: tuple[str, ...]
    queries: tuple[QueryFamily, ...]
    seed: int | None
    table: JointTable
    query_vars: tuple[str, ...] = ()

    def to_json(self) -> str:
        doc = {
            "generator": GENERATOR_VERSION,
            "seed": self.seed,
            "latent_levels": [list(lv) for lv in self.latent_levels],
            "parents": self.parents,
            "tables": {k: v.tolist() for k, v in sorted(self.tables.items())},
            "emission": {k: v.tolist() for k, v in sorted(self.emission.items())},
            "atom_vars": list(self.atom_vars),
            "query_vars": list(self.query_vars),
            "variables": list(self.table.variables),
            "rows": [[list(o), p] for o, p in self.table.rows.items()],
        }
        return json.dumps(doc, sort_keys=True)


def _channel_for_entropy(h_bits: float, card: int) -> float:
    """Flip probability eps of a symmetric channel with H(out | in) = h_bits."""
    h_max = math.log2(card)
    if h_bits <= 0:
        return 0.0
    if h_bits >= h_max:
        return (card - 1) / card

    def h(eps: float) -> float:
        out = -(1 - eps) * math.log2(1 - eps)
        if eps > 0:
            out -= eps * math.log2(eps / (card - 1))
        return out

    lo, hi = 0.0, (card - 1) / card
    for _ in range(200):
        mid = (lo + hi) / 2
        if h(mid) < h_bits:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def _stochastic(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    m = rng.dirichlet(np.ones(cols), size=rows)
    return m / m.sum(axis=1, keepdims=True)


def gen_world(
    levels: int,
    arity: int,
    emission_entropy: float,
    seed: int,
    *,
    cardinality: int = 2,
) -> DiscreteWorld:
    """Latent tree with ``levels`` latent levels, each node having ``arity`` children.

    The root is uniform over ``cardinality`` values; parent-to-child tables
    are Dirichlet(1) rows.  Each last-level topic emits ``arity`` atoms
    through a symmetric channel whose conditional entropy is
    ``emission_entropy`` bits (0 = exact copy).
    """
    if levels < 1 or arity < 1 or cardinality < 2:
        raise ValueError("need levels >= 1, arity >= 1, cardinality >= 2")
    n_latent = sum(arity**d for d in range(levels))
    n_atoms = arity**levels
    if cardinality ** (n_latent + n_atoms) > MAX_OUTCOMES:
        raise TooLargeToEnumerate(
            f"{cardinality}^{n_latent + n_atoms} joint outcomes exceed {MAX_OUTCOMES}"
        )
    rng = np.random.default_rng(seed)
    latent_levels: list[tuple[str, ...]] = []
    parents: dict[str, str] = {}
    tables: dict[str, np.ndarray] = {}
    for d in range(levels):
        names = tuple(f"Z{d}_{i}" for i in range(arity**d))
        latent_levels.append(names)
        for i, name in enumerate(names):
            if d == 0:
                tables[name] = np.full(cardinality, 1.0 / cardinality)
            else:
                parents[name] = latent_levels[d - 1][i // arity]
                tables[name] = _stochastic(rng, cardinality, cardinality)
    eps = _channel_for_entropy(emission_entropy, cardinality)
    channel = np.full((cardinality, cardinality), eps / (cardinality - 1))
    np.fill_diagonal(channel, 1 - eps)
    atom_vars = tuple(f"X{i}" for i in range(n_atoms))
    emission = {}
    for i, x in enumerate(atom_vars):
        parents[x] = latent_levels[-1][i // arity]
        emission[x] = channel.copy()

    latent = [v for lv in latent_levels for v in lv]
    rows: list[tuple[tuple, float]] = []
    for zs in itertools.product(range(cardinality), repeat=len(latent)):
        val = dict(zip(latent, zs))
        p = 1.0
        for v in latent:
            p *= tables[v][val[v]] if v not in parents else tables[v][val[parents[v]], val[v]]
        if p == 0:
            continue
        options = [
            [(s, emission[x][val[parents[x]], s]) for s in range(cardinality) if emission[x][val[parents[x]], s] > 0]
            for x in atom_vars
        ]
        for combo in itertools.product(*options):
            q = p
            for _, ps in combo:
                q *= ps
            rows.append((zs + tuple(s for s, _ in combo), q))
    table = JointTable(latent + list(atom_vars), rows)

    queries = []
    for d, lv in enumerate(latent_levels):
        for name in lv:
            under = frozenset(x for x in atom_vars if _descends(parents, x, name))
            queries.append(QueryFamily(name, d, {v: under for v in range(cardinality)}))
    return DiscreteWorld(
        tuple(latent_levels),
        parents,
        tables,
        emission,
        atom_vars,
        tuple(queries),
        seed,
        table,
        query_vars=(latent_levels[0][0],),
    )


def _descends(parents: dict[str, str], node: str, ancestor: str) -> bool:
    while node in parents:
        node = parents[node]
        if node == ancestor:
            return True
    return False


def iid_bits_world(n: int, p_one: float = 0.5, query_vars: Sequence[str] = ("X0",)) -> DiscreteWorld:
    """n independent bits; the default query is the first bit."""
    if 2**n > MAX_OUTCOMES:
        raise TooLargeToEnumerate(f"2^{n} outcomes")
    atom_vars = tuple(f"X{i}" for i in range(n))
    rows = []
    for bits in itertools.product((0, 1), repeat=n):
        ones = sum(bits)
        rows.append((bits, p_one**ones * (1 - p_one) ** (n - ones)))
    table = JointTable(atom_vars, rows)
    return DiscreteWorld((), {}, {}, {}, atom_vars, (), None, table, tuple(query_vars))


def world_from_table(table: JointTable, atom_vars: Sequence[str], query_vars: Sequence[str] = ()) -> DiscreteWorld:
    return DiscreteWorld((), {}, {}, {}, tuple(atom_vars), (), None, table, tuple(query_vars))


# ---------------------------------------------------------------------------
# Planted corpora
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlantedQuery:
    text: str
    embedding: tuple[float, ...]
    relevant: frozenset[str]
    block: int


@dataclass(frozen=True)
class PlantedCorpus:
    graph: UnitGraph
    labels: dict[str, int]
    queries: tuple[PlantedQuery, ...]
    seed: int
    centroids: np.ndarray | None = field(default=None, compare=False)

    @property
    def grouping(self) -> Grouping:
        return Grouping.from_labels(self.labels)

    @property
    def total_tokens(self) -> int:
        return sum(u.token_count for u in self.graph.units)


PRESETS: dict[str, dict[str, Any]] = {
    # noise is the expected norm of the noise vector; separable needs it
    # below half the inter-centroid distance sqrt(2)/2
    "separable": dict(blocks=2, units_per_block=20, dim=16, noise=0.1),
    "two-block": dict(blocks=2, units_per_block=20, dim=16, noise=0.1),
    "noisy": dict(blocks=4, units_per_block=10, dim=16, noise=1.0),
}


def gen_planted_corpus(
    blocks: int,
    units_per_block: int,
    dim: int,
    noise: float,
    seed: int,
    *,
    words_per_unit: int = 8,
    vocab_per_block: int = 16,
) -> PlantedCorpus:
    """Units around mutually orthogonal block centroids.

    Each unit's embedding is its block centroid plus isotropic Gaussian noise
    of expected norm ``noise``, renormalised to the unit sphere.  Content is
    drawn from a per-block vocabulary; query i targets block i.
    """
    if blocks < 2:
        raise ValueError("need at least 2 blocks")
    if dim < 2:
        raise ValueError("need dim >= 2")
    if dim < blocks:
        raise DimTooSmall(f"dim {dim} < blocks {blocks}: centroids cannot be orthogonal")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(dim, blocks)))
    centroids = (q * np.sign(np.diag(r))).T
    sigma = noise / math.sqrt(dim)
    units, labels = [], {}
    for b in range(blocks):
        vocab = [f"b{b}w{j}" for j in range(vocab_per_block)]
        for i in range(units_per_block):
            v = centroids[b] + rng.normal(scale=sigma, size=dim) if sigma > 0 else centroids[b].copy()
            v = v / np.linalg.norm(v)
            words = rng.choice(vocab, size=words_per_unit)
            uid = f"a{b * units_per_block + i:05d}"
            units.append(
                Unit(
                    id=uid,
                    content=" ".join(words),
                    embedding=tuple(v.tolist()),
                    timestamp=b * 10_000 + i * 10,
                    entities=frozenset({f"block{b}"}),
                    path=("corpus", f"block{b}", str(i)),
                )
            )
            labels[uid] = b
    queries = tuple(
        PlantedQuery(
            text=" ".join(f"b{b}w{j}" for j in range(3)),
            embedding=tuple(centroids[b].tolist()),
            relevant=frozenset(u for u, lb in labels.items() if lb == b),
            block=b,
        )
        for b in range(blocks)
    )
    return PlantedCorpus(UnitGraph(tuple(units)), labels, queries, seed, centroids)


_CODENAMES = (
    "alfa bravo charlie delta echo foxtrot golf hotel india juliett kilo lima mike "
    "november oscar papa quebec romeo sierra tango uniform victor whiskey xray yankee zulu"
).split()


def gen_disjoint_label_corpus(
    blocks: int = 4,
    units_per_block: int = 8,
    seed: int = 0,
    *,
    topic_words: int = 12,
    filler_words: int = 30,
    unit_topic: int = 3,
    unit_filler: int = 5,
    query_words: int = 3,
    embedder: HashedBagOfWords | None = None,
) -> PlantedCorpus:
    """Text corpus whose entity labels share no embedding bucket with any text.

    Each unit mixes ``unit_topic`` words from its block's topic vocabulary
    with ``unit_filler`` shared filler words; each block carries one codename
    entity that never appears in content or queries.  Embeddings are the
    hashed bag-of-words of the content, so a label representative scores
    exactly 0 against every query.
    """
    embedder = embedder or HashedBagOfWords()
    if blocks > len(_CODENAMES):
        raise ValueError(f"at most {len(_CODENAMES)} blocks")
    rng = np.random.default_rng(seed)
    topics = [[f"t{b}k{j}" for j in range(topic_words)] for b in range(blocks)]
    filler = [f"f{j}" for j in range(filler_words)]
    used = {embedder.bucket(t) for vocab in topics for t in vocab} | {embedder.bucket(f) for f in filler}
    codenames = [c for c in _CODENAMES if embedder.bucket(c) not in used][:blocks]
    if len(codenames) < blocks:
        raise ValueError("not enough collision-free codenames for this embedder")
    units, labels = [], {}
    for b in range(blocks):
        for i in range(units_per_block):
            words = list(rng.choice(topics[b], size=unit_topic, replace=False))
            words += list(rng.choice(filler, size=unit_filler, replace=False))
            rng.shuffle(words)
            content = " ".join(words)
            uid = f"a{b * units_per_block + i:05d}"
            units.append(
                Unit(
                    id=uid,
                    content=content,
                    embedding=embedder(content),
                    timestamp=b * 10_000 + i * 10,
                    entities=frozenset({codenames[b]}),
                    path=("corpus", f"block{b}", str(i)),
                )
            )
            labels[uid] = b
    queries = []
    for b in range(blocks):
        text = " ".join(rng.choice(topics[b], size=query_words, replace=False))
        queries.append(
            PlantedQuery(
                text=text,
                embedding=embedder(text),
                relevant=frozenset(u for u, lb in labels.items() if lb == b),
                block=b,
            )
        )
    return PlantedCorpus(UnitGraph(tuple(units)), labels, tuple(queries), seed)


# ---------------------------------------------------------------------------
# Routing tasks
# ---------------------------------------------------------------------------


def gen_routing_task(n_k: int, representative_bits: int, *, noise: float = 0.0) -> tuple[JointTable, int]:
    """Joint of a uniform group index Z and its quantised routing evidence O.

    O = floor(Z * 2^bits / n_k) over 2^bits symbols (identity when 2^bits >=
    n_k).  With ``noise > 0`` the symbol is replaced, with that probability,
    by a uniformly chosen different symbol.
    """
    if n_k < 1 or representative_bits < 0:
        raise ValueError("need n_k >= 1 and bits >= 0")
    n_sym = 2**representative_bits
    if n_sym >= n_k:
        quant: Callable[[int], int] = lambda z: z
        n_sym = n_k
    else:
        quant = lambda z: z * n_sym // n_k
    rows: dict[tuple, float] = {}
    for z in range(n_k):
        o = quant(z)
        if noise > 0 and n_sym > 1:
            for s in range(n_sym):
                p = (1 - noise) if s == o else noise / (n_sym - 1)
                if p > 0:
                    rows[(z, s)] = p / n_k
        else:
            rows[(z, o)] = 1.0 / n_k
    return JointTable(("Z", "O"), rows), n_k


def planted_vocabulary(corpus: PlantedCorpus) -> set[str]:
    return {t for u in corpus.graph.units for t in terms(u.content)}
