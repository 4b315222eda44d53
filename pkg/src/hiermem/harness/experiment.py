"""The rho x tau x budget coupling experiment."""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from ..coarsen import RhoSpec
from ..core import Hierarchy, build_hierarchy
from ..errors import ConfigError
from ..traverse import ALGORITHMS, Query, run
from .config import (
    Corpus,
    generator_from_config,
    level_specs_from_config,
    load_corpus,
    load_toml,
    rho_from_config,
)

CSV_COLUMNS = ("rho", "tau", "budget", "recall", "precision", "tokens_used", "relevance_evals")


@dataclass(frozen=True)
class TauConfig:
    name: str
    algorithm: str
    beams: Any = None  # list of widths, "expand", or None (width 1 everywhere)
    k: int = 1
    d: int = 1


@dataclass(frozen=True)
class LabeledQuery:
    text: str
    relevant: frozenset[str]
    embedding: tuple[float, ...] | None = None
    extra: Mapping[str, Any] = field(default_factory=dict)


@dataclass
class ExperimentSpec:
    corpus: dict[str, Any]
    levels: list[dict[str, Any]]
    rhos: list[RhoSpec]
    taus: list[TauConfig]
    budgets: list[float]
    seeds: list[int]
    out_dir: str
    budget_mode: str = "fraction"
    queries: list[dict[str, Any]] | None = None
    embedding: dict[str, Any] = field(default_factory=dict)
    generator: dict[str, Any] | None = None
    base_dir: str = "."

    def __post_init__(self) -> None:
        if not self.rhos:
            raise ConfigError("experiment needs at least one rho")
        if not self.taus:
            raise ConfigError("experiment needs at least one traversal")
        if not self.budgets or any(b <= 0 for b in self.budgets):
            raise ConfigError("budgets must be positive")
        if list(self.budgets) != sorted(self.budgets) or len(set(self.budgets)) != len(self.budgets):
            raise ConfigError("budgets must be strictly ascending")
        if self.budget_mode not in ("fraction", "tokens"):
            raise ConfigError("budget_mode must be 'fraction' or 'tokens'")
        if self.budget_mode == "fraction" and any(b > 1 for b in self.budgets):
            raise ConfigError("fractional budgets must lie in (0, 1]")
        if not self.seeds:
            raise ConfigError("experiment needs at least one seed")
        if len({t.name for t in self.taus}) != len(self.taus):
            raise ConfigError("traversal names must be unique")
        for t in self.taus:
            if t.algorithm not in ALGORITHMS:
                raise ConfigError(f"unknown algorithm {t.algorithm!r}; choose from {sorted(ALGORITHMS)}")

    @classmethod
    def from_toml(cls, path: str, seed: int | None = None, out: str | None = None) -> "ExperimentSpec":
        raw = load_toml(path)
        base = os.path.dirname(os.path.abspath(path))
        exp = raw.get("experiment", {})
        try:
            rhos = [rho_from_config(r) for r in exp.get("rhos", [])]
            taus = [
                TauConfig(
                    name=t.get("name", t["algorithm"]),
                    algorithm=t["algorithm"],
                    beams=t.get("beams"),
                    k=int(t.get("k", 1)),
                    d=int(t.get("d", 1)),
                )
                for t in exp.get("traversals", [])
            ]
        except KeyError as exc:
            raise ConfigError(f"{path}: missing key {exc}") from exc
        seeds = [seed] if seed is not None else [int(s) for s in exp.get("seeds", [0])]
        out_dir = out or exp.get("out_dir", "results")
        if not os.path.isabs(out_dir) and out is None:
            out_dir = os.path.join(base, out_dir)
        queries = exp.get("queries")
        if isinstance(queries, str):
            with open(os.path.join(base, queries), encoding="utf-8") as fh:
                queries = json.load(fh)
        return cls(
            corpus=dict(raw.get("corpus", {})),
            levels=list(raw.get("levels", [])),
            rhos=rhos,
            taus=taus,
            budgets=[float(b) for b in exp.get("budgets", [])],
            seeds=seeds,
            out_dir=out_dir,
            budget_mode=exp.get("budget_mode", "fraction"),
            queries=queries,
            embedding=dict(raw.get("embedding", {})),
            generator=raw.get("generator"),
            base_dir=base,
        )


@dataclass(frozen=True)
class Cell:
    rho: str
    tau: str
    budget: float
    recall: float
    precision: float
    tokens_used: float
    relevance_evals: float
    budget_tokens: float
    wall_seconds: float


def _queries(spec: ExperimentSpec, corpus: Corpus) -> list[LabeledQuery]:
    if spec.queries is not None:
        out = []
        for q in spec.queries:
            if "relevant" not in q:
                raise ConfigError("each experiment query needs a 'relevant' id list")
            extra = {k: v for k, v in q.items() if k not in ("text", "relevant", "embedding")}
            emb = q.get("embedding")
            out.append(LabeledQuery(q.get("text", ""), frozenset(q["relevant"]), tuple(emb) if emb else None, extra))
        return out
    if corpus.planted is None:
        raise ConfigError("file corpora need an explicit query set")
    return [LabeledQuery(q.text, q.relevant, q.embedding) for q in corpus.planted.queries]


def _beams(tau: TauConfig, h: Hierarchy) -> tuple[int, ...] | None:
    if tau.algorithm != "topdown":
        return None
    if tau.beams == "expand":
        # keep every child: top-down degenerates to exhaustive refinement
        return tuple(len(h.levels[lv]) for lv in range(h.depth, -1, -1))
    if tau.beams is None:
        return (1,) * (h.depth + 1)
    if isinstance(tau.beams, int):
        return (tau.beams,) * (h.depth + 1)
    return tuple(int(b) for b in tau.beams)


def _query(lq: LabeledQuery, corpus: Corpus, budget: int, tau: TauConfig, h: Hierarchy) -> Query:
    emb = lq.embedding
    if emb is None and corpus.embedder is not None:
        emb = tuple(corpus.embedder(lq.text))
    d = dict(lq.extra)
    d.update(text=lq.text, embedding=emb, budget=budget, k=tau.k, d=tau.d, beams=_beams(tau, h))
    return Query.from_dict(d)


def _run_cell(
    h: Hierarchy, corpus: Corpus, queries: Sequence[LabeledQuery], tau: TauConfig, budget_tokens: int
) -> tuple[float, float, float, float, float]:
    t0 = time.perf_counter()
    rec = prec = tok = ev = 0.0
    for lq in queries:
        res = run(h, _query(lq, corpus, budget_tokens, tau, h), tau.algorithm)
        got = set(res.atoms)
        hit = len(got & lq.relevant)
        rec += hit / len(lq.relevant) if lq.relevant else 0.0
        prec += hit / len(got) if got else 0.0
        tok += res.tokens_used
        ev += res.relevance_evals
    n = len(queries)
    return rec / n, prec / n, tok / n, ev / n, time.perf_counter() - t0


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("HIERMEM_THREADS", "1")))
    except ValueError:
        raise ConfigError("HIERMEM_THREADS must be an integer") from None


def run_experiment(spec: ExperimentSpec) -> list[Cell]:
    """Evaluate every (rho, tau, budget) cell, averaged over queries and seeds."""
    gen = generator_from_config(spec.generator)
    jobs = []  # (rho index, tau index, budget index, seed, hierarchy, corpus, queries, budget tokens)
    for seed in spec.seeds:
        corpus = load_corpus(spec.corpus, spec.base_dir, seed, spec.embedding)
        queries = _queries(spec, corpus)
        if not queries:
            raise ConfigError("empty query set")
        total = sum(u.token_count for u in corpus.graph.units)
        for ri, rho in enumerate(spec.rhos):
            levels = level_specs_from_config(spec.levels, corpus, seed, rho)
            h = build_hierarchy(corpus.graph, levels, embedder=corpus.embedder, generator=gen)
            for ti, tau in enumerate(spec.taus):
                for bi, b in enumerate(spec.budgets):
                    bt = int(b * total) if spec.budget_mode == "fraction" else int(b)
                    jobs.append((ri, ti, bi, h, corpus, queries, tau, bt))

    def work(job: tuple) -> tuple[tuple[int, int, int], tuple[float, ...], int]:
        ri, ti, bi, h, corpus, queries, tau, bt = job
        return (ri, ti, bi), _run_cell(h, corpus, queries, tau, bt), bt

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(work, jobs))

    acc: dict[tuple[int, int, int], list[float]] = {}
    for key, vals, bt in results:
        slot = acc.setdefault(key, [0.0] * 6)
        for i, v in enumerate((*vals[:4], float(bt), vals[4])):
            slot[i] += v
    n = len(spec.seeds)
    cells = []
    for (ri, ti, bi) in sorted(acc):
        r, p, t, e, bt, w = acc[(ri, ti, bi)]
        cells.append(
            Cell(spec.rhos[ri].name, spec.taus[ti].name, spec.budgets[bi], r / n, p / n, t / n, e / n, bt / n, w)
        )
    return cells


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def metrics_csv(cells: Sequence[Cell]) -> str:
    """CSV in (rho, tau, budget) order.  Wall time is left out so the file is byte-stable."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in cells:
        w.writerow([c.rho, c.tau, _fmt(c.budget), _fmt(c.recall), _fmt(c.precision), _fmt(c.tokens_used), _fmt(c.relevance_evals)])
    return buf.getvalue()


def _lookup(cells: Sequence[Cell]) -> dict[tuple[str, str, float], Cell]:
    return {(c.rho, c.tau, c.budget): c for c in cells}


def coupling_summary(spec: ExperimentSpec, cells: Sequence[Cell]) -> dict[str, Any]:
    """Per budget: do matched (rho, tau) pairs dominate mismatched ones?

    Matched means a high-SS rho with collapsed search, or a low-SS rho with
    top-down refinement.  Reported only; no threshold is asserted.
    """
    table = _lookup(cells)
    taus = {t.algorithm: t.name for t in reversed(spec.taus)}
    high = [r.name for r in spec.rhos if r.ss_class == "high"]
    low = [r.name for r in spec.rhos if r.ss_class == "low"]
    per_budget = []
    for b in spec.budgets:
        entry: dict[str, Any] = {"budget": b, "comparisons": []}
        if "collapsed" in taus and "topdown" in taus:
            col, td = taus["collapsed"], taus["topdown"]
            for rho, good, bad in [(r, col, td) for r in high] + [(r, td, col) for r in low]:
                m, mm = table[(rho, good, b)], table[(rho, bad, b)]
                entry["comparisons"].append(
                    {
                        "rho": rho,
                        "matched": good,
                        "mismatched": bad,
                        "recall_matched": m.recall,
                        "recall_mismatched": mm.recall,
                        "evals_matched": m.relevance_evals,
                        "evals_mismatched": mm.relevance_evals,
                        "recall_dominates": m.recall >= mm.recall,
                        "evals_dominates": m.relevance_evals <= mm.relevance_evals,
                    }
                )
        per_budget.append(entry)
    summary: dict[str, Any] = {
        "rhos": [r.describe() for r in spec.rhos],
        "taus": [vars(t) for t in spec.taus],
        "budgets": spec.budgets,
        "budget_mode": spec.budget_mode,
        "seeds": spec.seeds,
        "coupling": per_budget,
        "timings": [{"rho": c.rho, "tau": c.tau, "budget": c.budget, "wall_seconds": c.wall_seconds} for c in cells],
    }
    if spec.corpus.get("preset") == "disjoint-label":
        summary["fixture_check"] = fixture_check(spec, cells)
    return summary


def fixture_check(spec: ExperimentSpec, cells: Sequence[Cell]) -> dict[str, Any]:
    """Engineered disjoint-label check: label representatives starve collapsed search."""
    table = _lookup(cells)
    names = {r.kind: r.name for r in spec.rhos}
    taus = {t.algorithm: t.name for t in reversed(spec.taus)}
    need = {"label", "concat"} <= names.keys() and {"collapsed", "topdown"} <= taus.keys()
    if not need:
        return {"applicable": False}
    rows, ok = [], True
    for b in spec.budgets:
        lc = table[(names["label"], taus["collapsed"], b)].recall
        lt = table[(names["label"], taus["topdown"], b)].recall
        cc = table[(names["concat"], taus["collapsed"], b)].recall
        a, c = lc <= lt, cc >= lc
        ok = ok and a and c
        rows.append(
            {
                "budget": b,
                "label_collapsed": lc,
                "label_topdown": lt,
                "concat_collapsed": cc,
                "label_collapsed_le_label_topdown": a,
                "concat_collapsed_ge_label_collapsed": c,
            }
        )
    return {"applicable": True, "passed": ok, "budgets": rows}


def write_outputs(spec: ExperimentSpec, cells: Sequence[Cell]) -> tuple[str, str]:
    os.makedirs(spec.out_dir, exist_ok=True)
    csv_path = os.path.join(spec.out_dir, "metrics.csv")
    json_path = os.path.join(spec.out_dir, "summary.json")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_csv(cells))
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(coupling_summary(spec, cells), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path, json_path
