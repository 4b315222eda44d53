"""Exact information measures over enumerable joint tables.

All quantities are in bits unless stated otherwise.  Tables are enumerated
exhaustively; nothing here samples.
"""

from __future__ import annotations

import graphlib
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import (
    CyclicTaskGraph,
    EmptyContent,
    InvalidEpsilon,
    InvalidGroupCount,
    InvalidRatio,
    InvalidTable,
    TooLargeToEnumerate,
    UnknownVariable,
)
from .langmodel import BigramLM

MAX_OUTCOMES = 2**20
SUM_TOL = 1e-12
CLAMP_TOL = 1e-12


class JointTable:
    """A finite joint distribution over named discrete variables."""

    def __init__(
        self,
        variables: Sequence[str],
        rows: Mapping[tuple, float] | Iterable[tuple[tuple, float]],
        *,
        tol: float = SUM_TOL,
    ):
        self.variables = tuple(variables)
        if len(set(self.variables)) != len(self.variables):
            raise InvalidTable("duplicate variable names")
        items = list(rows.items()) if isinstance(rows, Mapping) else list(rows)
        if len(items) > MAX_OUTCOMES:
            raise TooLargeToEnumerate(f"{len(items)} outcomes exceed {MAX_OUTCOMES}")
        table: dict[tuple, float] = {}
        for outcome, p in items:
            outcome = tuple(outcome)
            if len(outcome) != len(self.variables):
                raise InvalidTable(f"outcome {outcome} does not match {len(self.variables)} variables")
            if outcome in table:
                raise InvalidTable(f"duplicate outcome {outcome}")
            p = float(p)
            if not p >= 0 or not math.isfinite(p):
                raise InvalidTable(f"invalid probability {p} for {outcome}")
            table[outcome] = p
        total = math.fsum(table.values())
        if abs(total - 1.0) > tol:
            raise InvalidTable(f"probabilities sum to {total!r}, not 1")
        self.rows = table

    def __len__(self) -> int:
        return len(self.rows)

    def _positions(self, vars: Sequence[str] | str) -> list[int]:
        if isinstance(vars, str):
            vars = [vars]
        try:
            return [self.variables.index(v) for v in vars]
        except ValueError:
            missing = [v for v in vars if v not in self.variables]
            raise UnknownVariable(f"unknown variables {missing}") from None

    def marginal(self, vars: Sequence[str] | str) -> dict[tuple, float]:
        pos = self._positions(vars)
        acc: dict[tuple, list[float]] = defaultdict(list)
        for outcome, p in self.rows.items():
            if p > 0:
                acc[tuple(outcome[i] for i in pos)].append(p)
        return {k: math.fsum(v) for k, v in acc.items()}

    def derive(self, name: str, vars: Sequence[str] | str, fn: Callable[[tuple], Hashable]) -> "JointTable":
        """Add a variable that is a deterministic function of ``vars``."""
        if name in self.variables:
            raise InvalidTable(f"variable {name!r} already exists")
        pos = self._positions(vars)
        rows = [
            (outcome + (fn(tuple(outcome[i] for i in pos)),), p) for outcome, p in self.rows.items()
        ]
        out = JointTable.__new__(JointTable)
        out.variables = self.variables + (name,)
        out.rows = dict(rows)
        return out

    def support_size(self) -> int:
        return sum(1 for p in self.rows.values() if p > 0)

    # file format: header "#\tV1\tV2..." then "v1,v2,...<TAB>p" lines
    def dumps(self) -> str:
        lines = ["#\t" + "\t".join(self.variables)]
        for outcome, p in self.rows.items():
            lines.append(",".join(str(x) for x in outcome) + "\t" + repr(p))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, variables: Sequence[str] | None = None) -> "JointTable":
        rows = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            if line.startswith("#"):
                names = [v for v in line[1:].split("\t") if v.strip()]
                if names and variables is None:
                    variables = [v.strip() for v in names]
                continue
            try:
                outcome_s, p_s = line.rsplit("\t", 1)
                outcome = tuple(_parse_value(x) for x in outcome_s.split(","))
                rows.append((outcome, float(p_s)))
            except ValueError as exc:
                raise InvalidTable(f"line {lineno}: {exc}") from exc
        if variables is None:
            if not rows:
                raise InvalidTable("empty table")
            variables = [f"X{i}" for i in range(len(rows[0][0]))]
        return cls(variables, rows)


def _parse_value(s: str) -> Hashable:
    s = s.strip()
    try:
        return int(s)
    except ValueError:
        return s


def _h(dist: Iterable[float]) -> float:
    return -math.fsum(p * math.log2(p) for p in dist if p > 0)


def entropy(table: JointTable, vars: Sequence[str] | str) -> float:
    """Shannon entropy (bits) of the marginal over ``vars``."""
    return _h(table.marginal(vars).values())


def _as_list(vars: Sequence[str] | str) -> list[str]:
    return [vars] if isinstance(vars, str) else list(vars)


def mutual_information(table: JointTable, vars_a: Sequence[str] | str, vars_b: Sequence[str] | str) -> float:
    a, b = _as_list(vars_a), _as_list(vars_b)
    union = a + [v for v in b if v not in a]
    mi = entropy(table, a) + entropy(table, b) - entropy(table, union)
    if -CLAMP_TOL < mi < 0:
        mi = 0.0
    return mi


def conditional_entropy(table: JointTable, vars_a: Sequence[str] | str, given: Sequence[str] | str) -> float:
    """H(A | B) as a sum of non-negative per-condition entropies (no cancellation)."""
    a, b = _as_list(vars_a), _as_list(given)
    joint = table.marginal(b + a)
    groups: dict[tuple, list[float]] = defaultdict(list)
    for outcome, p in joint.items():
        groups[outcome[: len(b)]].append(p)
    total = 0.0
    terms_ = []
    for ps in groups.values():
        pb = math.fsum(ps)
        terms_.append(pb * _h(p / pb for p in ps))
    total = math.fsum(terms_)
    return total


# ---------------------------------------------------------------------------
# Self-sufficiency
# ---------------------------------------------------------------------------

_RHO = "__rho__"


def ss_exact(table: JointTable, group_vars: Sequence[str], rho: Callable[[tuple], Hashable]) -> float:
    """I(G; rho(G)) / H(G), with SS = 1 when H(G) = 0."""
    hg = entropy(table, group_vars)
    if hg <= CLAMP_TOL:
        return 1.0
    t = table.derive(_RHO, group_vars, rho)
    return min(1.0, max(0.0, mutual_information(t, group_vars, _RHO) / hg))


class SSQ(NamedTuple):
    ss_q: float
    r_q: float
    bound: float | None


def ss_q_exact(
    table: JointTable,
    group_vars: Sequence[str],
    rho: Callable[[tuple], Hashable],
    query_vars: Sequence[str] | str,
) -> SSQ:
    """Query-dependent self-sufficiency, query relevance, and the SS lower bound.

    ss_q = I(Q; rho(G)) / I(Q; G) (1 when I(Q; G) = 0); r_q = I(Q; G) / H(G);
    bound = 1 - (1 - SS) / r_q, undefined (None) when r_q = 0.
    """
    q = _as_list(query_vars)
    t = table.derive(_RHO, group_vars, rho)
    i_qg = mutual_information(t, q, group_vars)
    hg = entropy(t, group_vars)
    r_q = i_qg / hg if hg > CLAMP_TOL else 0.0
    if i_qg <= CLAMP_TOL:
        return SSQ(1.0, r_q, None)
    ss_q = mutual_information(t, q, _RHO) / i_qg
    if not -1e-9 <= ss_q <= 1 + 1e-9:
        raise AssertionError(f"ss_q={ss_q} outside [0, 1]: rho is not a function of G?")
    ss_q = min(1.0, max(0.0, ss_q))
    ss = ss_exact(table, group_vars, rho)
    return SSQ(ss_q, r_q, 1.0 - (1.0 - ss) / r_q)


@dataclass
class SSReport:
    ss: float
    ss_theta: float | None = None
    ss_q: float | None = None
    r_q: float | None = None
    bound: float | None = None

    def check(self) -> list[str]:
        problems = []
        if self.ss_q is not None:
            if not 0.0 <= self.ss_q <= 1.0:
                problems.append(f"ss_q={self.ss_q} outside [0, 1]")
            if self.bound is not None and self.ss_q < self.bound - 1e-9:
                problems.append(f"ss_q={self.ss_q} below bound {self.bound}")
        return problems


def ss_theta(group_text: Sequence[str], rho_text: str, lm: BigramLM | None = None) -> float:
    """1 - NLL(G | rho) / NLL(G) under a sequence model.

    G is the member texts joined in the given order.  The default model is a
    bigram fitted on the group text itself.  The value can be negative when
    conditioning hurts; see :func:`theta_flags`.
    """
    text = " ".join(group_text)
    lm = lm or BigramLM(group_text)
    base = lm.nll(text)
    if base <= 0:
        raise EmptyContent("group text has no scorable tokens")
    return 1.0 - lm.nll(text, context=rho_text) / base


def theta_flags(value: float) -> list[str]:
    flags = []
    if value < 0:
        flags.append("negative")
    if abs(value) > 10:
        flags.append("unstable")
    return flags


# ---------------------------------------------------------------------------
# Monotonicity across levels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LevelMap:
    """A deterministic coarsening of a level's outcome tuple."""

    name: str
    fn: Callable[[tuple], tuple]

    def __call__(self, v: tuple) -> tuple:
        return self.fn(v)


_PAIR_OPS: dict[str, Callable[[int, int], int]] = {
    "xor": lambda a, b: a ^ b,
    "and": lambda a, b: a & b,
    "or": lambda a, b: a | b,
    "sum": lambda a, b: a + b,
    "first": lambda a, b: a,
    "max": max,
}


def pairwise(op: str | Sequence[str]) -> LevelMap:
    """Combine consecutive pairs with ``op`` (one op, or one per pair); an odd tail passes through."""
    ops = [op] if isinstance(op, str) else list(op)
    for o in ops:
        if o not in _PAIR_OPS:
            raise ValueError(f"unknown pair op {o!r}")

    def fn(v: tuple) -> tuple:
        out = []
        for j, i in enumerate(range(0, len(v) - 1, 2)):
            out.append(_PAIR_OPS[ops[j % len(ops)]](v[i], v[i + 1]))
        if len(v) % 2:
            out.append(v[-1])
        return tuple(out)

    return LevelMap(f"pairwise({','.join(ops)})", fn)


def relabel() -> LevelMap:
    """A bijective relabelling (tuple reversal): an information-preserving step."""
    return LevelMap("relabel", lambda v: tuple(reversed(v)))


def random_pairwise(n_pairs: int, seed: int) -> LevelMap:
    rng = np.random.default_rng(seed)
    names = ["xor", "and", "or", "sum", "first", "max"]
    return pairwise([names[i] for i in rng.integers(len(names), size=max(1, n_pairs))])


def level_map_from_dict(d: Mapping[str, Any]) -> LevelMap:
    op = d.get("op")
    if op == "pairwise":
        return pairwise(d.get("fn", "xor"))
    if op == "relabel":
        return relabel()
    raise ValueError(f"unknown level map op {op!r}")


@dataclass
class MonotonicityReport:
    entropies: list[float]
    info_loss: list[float]
    mutual_info: list[float] | None
    lossy: list[bool]
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict[str, Any]:
        return {
            "entropies": self.entropies,
            "info_loss": self.info_loss,
            "mutual_info": self.mutual_info,
            "lossy": self.lossy,
            "non_lossy_levels": [i + 1 for i, lossy in enumerate(self.lossy) if not lossy],
            "violations": self.violations,
            "ok": self.ok,
        }


def check_monotonicity(world: Any, levels: Sequence[Callable[[tuple], tuple]], tol: float = 1e-9) -> MonotonicityReport:
    """Entropy and query information of every level, by enumeration.

    ``world`` provides ``table``, ``atom_vars`` and optionally ``query_vars``.
    A level whose map is non-injective on the support must strictly lose
    entropy; I(Q; V_l) must never increase.
    """
    table: JointTable = world.table
    if len(table) > MAX_OUTCOMES:
        raise TooLargeToEnumerate(f"{len(table)} outcomes")
    atom_vars = list(world.atom_vars)
    qvars = list(getattr(world, "query_vars", None) or [])
    base = table.marginal(qvars + atom_vars)
    nq = len(qvars)
    # rows are ((q...), v_l) -> p
    cur: dict[tuple, float] = {(k[:nq], k[nq:]): p for k, p in base.items()}

    def as_table(rows: Mapping[tuple, float]) -> JointTable:
        t = JointTable.__new__(JointTable)
        t.variables = ("Q", "V")
        t.rows = dict(rows)
        return t

    t = as_table(cur)
    entropies = [entropy(t, "V")]
    mis = [mutual_information(t, "Q", "V")] if qvars else None
    losses: list[float] = []
    lossy: list[bool] = []
    violations: list[str] = []
    for ell, fmap in enumerate(levels, start=1):
        support = {v for (_, v) in cur}
        image = {v: fmap(v) for v in support}
        injective = len(set(image.values())) == len(support)
        nxt: dict[tuple, list[float]] = defaultdict(list)
        for (q, v), p in cur.items():
            nxt[(q, image[v])].append(p)
        prev_t = t
        cur = {k: math.fsum(ps) for k, ps in nxt.items()}
        t = as_table(cur)
        # loss H(V_{l-1} | V_l), computed without cancellation
        pair = JointTable.__new__(JointTable)
        pair.variables = ("A", "B")
        acc: dict[tuple, list[float]] = defaultdict(list)
        for (q, v), p in prev_t.rows.items():
            acc[(v, image[v])].append(p)
        pair.rows = {k: math.fsum(ps) for k, ps in acc.items()}
        loss = conditional_entropy(pair, "A", "B")
        h = entropy(t, "V")
        entropies.append(h)
        losses.append(loss)
        lossy.append(not injective)
        drop = entropies[-2] - h
        if abs(drop - loss) > tol:
            violations.append(f"level {ell}: entropy drop {drop} != conditional entropy {loss}")
        if h > entropies[-2] + tol:
            violations.append(f"level {ell}: entropy increased ({entropies[-2]} -> {h})")
        if not injective and not loss > 0:
            violations.append(f"level {ell}: non-injective map but no entropy loss")
        if injective and abs(drop) > tol:
            violations.append(f"level {ell}: injective map changed entropy by {drop}")
        if mis is not None:
            mi = mutual_information(t, "Q", "V")
            if mi > mis[-1] + tol:
                violations.append(f"level {ell}: I(Q;V) increased ({mis[-1]} -> {mi})")
            mis.append(mi)
    return MonotonicityReport(entropies, losses, mis, lossy, violations)


# ---------------------------------------------------------------------------
# Fano, branching and depth
# ---------------------------------------------------------------------------


def fano_max_groups(b_bits: float, epsilon: float) -> float:
    """Largest group count compatible with ``b_bits`` of routing evidence at error <= epsilon."""
    if not 0.0 <= epsilon < 1.0:
        raise InvalidEpsilon(f"epsilon must be in [0, 1), got {epsilon}")
    if b_bits < 0:
        raise ValueError("b_bits must be non-negative")
    return 2.0 ** ((b_bits + 1.0) / (1.0 - epsilon))


def fano_error_lower_bound(i_bits: float, n_k: int) -> float:
    if n_k < 2:
        raise InvalidGroupCount(f"need at least 2 groups, got {n_k}")
    return max(0.0, 1.0 - (i_bits + 1.0) / math.log2(n_k))


def best_estimator_error(table: JointTable, z_var: str, o_var: str) -> float:
    """Error of the MAP estimator of Z from O, the minimum over all estimators g(O)."""
    joint = table.marginal([o_var, z_var])
    best: dict[Hashable, float] = defaultdict(float)
    for (o, _z), p in joint.items():
        best[o] = max(best[o], p)
    return max(0.0, 1.0 - math.fsum(best.values()))


def _ceil_log(n: float, base: float) -> int:
    """Smallest integer L >= 0 with base**L >= n."""
    L, acc = 0, 1.0
    while acc < n:
        acc *= base
        L += 1
    return L


def optimal_branching(n_atoms: int, fano_cap: float | None = None) -> tuple[int, int]:
    """Integer branching factor minimising b / ln b, capped, and the matching depth."""
    if n_atoms < 2:
        raise ValueError("n_atoms must be >= 2")
    hi = 64
    if fano_cap is not None:
        hi = min(hi, math.floor(fano_cap))
    hi = max(hi, 2)
    b_star = min(range(2, hi + 1), key=lambda b: (b / math.log(b), b))
    return b_star, _ceil_log(n_atoms, b_star)


def min_depth(n_tokens: float, c_tokens: float, r_ratio: float) -> int:
    """Fewest levels for the top level to fit a C-token window at compression ``r_ratio``."""
    if r_ratio <= 1:
        raise InvalidRatio(f"compression ratio must exceed 1, got {r_ratio}")
    if n_tokens < 1 or c_tokens < 1:
        raise ValueError("token counts must be >= 1")
    if n_tokens <= c_tokens:
        return 0
    L, size = 0, float(n_tokens)
    while size > c_tokens:
        size /= r_ratio
        L += 1
    return L


# ---------------------------------------------------------------------------
# Task routing
# ---------------------------------------------------------------------------


class TierOrder:
    """Partial order over agent tiers from (lower, higher) relations."""

    def __init__(self, relations: Iterable[tuple[str, str]] = (), tiers: Iterable[str] = ()):
        self.above: dict[str, set[str]] = defaultdict(set)
        nodes = set(tiers)
        for lo, hi in relations:
            self.above[lo].add(hi)
            nodes |= {lo, hi}
        self.tiers = nodes
        # transitive closure
        changed = True
        while changed:
            changed = False
            for t in list(self.above):
                extra = set().union(*(self.above.get(u, set()) for u in self.above[t])) - self.above[t]
                if extra:
                    self.above[t] |= extra
                    changed = True

    @classmethod
    def chain(cls, tiers: Sequence[str]) -> "TierOrder":
        """Total order, lowest tier first."""
        return cls(list(zip(tiers, tiers[1:])), tiers)

    def geq(self, a: str, b: str) -> bool:
        return a == b or a in self.above.get(b, set())


def check_routing_monotonicity(
    task_dag: Iterable[tuple[str, str]],
    tiers: TierOrder,
    routing: Mapping[str, str],
) -> list[tuple[str, str]]:
    """Ancestor/descendant task pairs (t, t') whose tiers violate R(t) >= R(t').

    Incomparable tiers count as violations.
    """
    children: dict[str, set[str]] = defaultdict(set)
    nodes: set[str] = set()
    for a, b in task_dag:
        children[a].add(b)
        nodes |= {a, b}
    sorter = graphlib.TopologicalSorter({n: set() for n in nodes})
    for a, kids in children.items():
        for b in kids:
            sorter.add(b, a)
    try:
        order = list(sorter.static_order())
    except graphlib.CycleError as exc:
        raise CyclicTaskGraph(str(exc)) from exc
    missing = nodes - set(routing)
    if missing:
        raise ValueError(f"routing map is not total: {sorted(missing)}")
    descendants: dict[str, set[str]] = {}
    for n in reversed(order):
        d: set[str] = set()
        for c in children.get(n, ()):
            d.add(c)
            d |= descendants[c]
        descendants[n] = d
    return sorted(
        (t, u)
        for t in nodes
        for u in descendants[t]
        if not tiers.geq(routing[t], routing[u])
    )
