"""Implementations behind the CLI subcommands."""

from __future__ import annotations

import json
import math
import os
from typing import Any, Mapping, TextIO

from ..coarsen import affinity, coherence_gap
from ..core import Grouping, Hierarchy, UnitGraph, build_hierarchy, validate_hierarchy
from ..errors import (
    ConfigError,
    DegeneratePartition,
    HierMemError,
    InvalidGroupCount,
    InvalidHierarchyFile,
    InvalidTable,
    MissingFeature,
    UnknownAlgorithm,
)
from ..extract import HashedBagOfWords
from ..measure import (
    JointTable,
    best_estimator_error,
    check_monotonicity,
    fano_error_lower_bound,
    fano_max_groups,
    level_map_from_dict,
    min_depth,
    mutual_information,
    optimal_branching,
    ss_exact,
    ss_q_exact,
)
from ..synthworld import gen_world, iid_bits_world, world_from_table
from ..traverse import ALGORITHMS, Query, run
from .config import generator_from_config, level_specs_from_config, load_corpus, load_toml
from .experiment import ExperimentSpec, run_experiment, write_outputs

DEFAULT_CONTEXT_TOKENS = 4096


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------


def level_coherence(h: Hierarchy, level: int) -> float | None:
    """Cosine coherence gap of the grouping that produced ``level``; None if undefined."""
    below = h.levels[level - 1]
    assign = {}
    for j, node in enumerate(sorted(h.levels[level], key=lambda u: u.id)):
        for c in h.children(node.id):
            assign.setdefault(c, set()).add(j)
    grouping = Grouping({k: frozenset(v) for k, v in assign.items()}, len(h.levels[level]))
    try:
        return coherence_gap(affinity(UnitGraph(tuple(below)), "cosine"), grouping)
    except (DegeneratePartition, MissingFeature):
        return None


def compression_ratio(h: Hierarchy) -> float:
    """Geometric-mean per-level token compression V_0 -> V_L."""
    t0 = sum(u.token_count for u in h.levels[0])
    tl = sum(u.token_count for u in h.levels[h.depth])
    if h.depth == 0 or tl == 0:
        return 1.0
    return (t0 / tl) ** (1.0 / h.depth)


def cmd_build(config_path: str, *, seed: int | None = None, out: str | None = None, stdout: TextIO) -> Hierarchy:
    raw = load_toml(config_path)
    base = os.path.dirname(os.path.abspath(config_path))
    seed = int(raw.get("seed", 0)) if seed is None else seed
    corpus = load_corpus(raw.get("corpus", {}), base, seed, raw.get("embedding", {}))
    specs = level_specs_from_config(raw.get("levels", []), corpus, seed)
    gen = generator_from_config(raw.get("generator"))
    h = build_hierarchy(corpus.graph, specs, embedder=corpus.embedder, generator=gen, source=corpus.source)
    problems = validate_hierarchy(h)
    if problems:
        raise InvalidHierarchyFile("built hierarchy does not validate: " + "; ".join(map(str, problems)))

    build = raw.get("build", {})
    out = out or build.get("out") or "hierarchy.json"
    if out_dir := os.path.dirname(out):
        os.makedirs(out_dir, exist_ok=True)
    h.save(out)

    print(f"wrote {out}", file=stdout)
    for ell, lv in enumerate(h.levels):
        tokens = sum(u.token_count for u in lv)
        line = f"level {ell}: {len(lv)} nodes, {tokens} tokens"
        if ell > 0:
            g = level_coherence(h, ell)
            line += f", gamma={g:.6f}" if g is not None else ", gamma=undefined"
        print(line, file=stdout)

    n_tokens = sum(u.token_count for u in h.levels[0])
    c_tokens = int(build.get("context_tokens", DEFAULT_CONTEXT_TOKENS))
    r = compression_ratio(h)
    if r <= 1.0:
        print(f"warning: no token compression measured (r={r:.4f}); depth check skipped", file=stdout)
    elif n_tokens >= 1:
        need = min_depth(n_tokens, c_tokens, r)
        status = "ok" if h.depth >= need else "warning"
        print(
            f"{status}: depth {h.depth}, min_depth(N={n_tokens}, C={c_tokens}, r={r:.4f}) = {need}",
            file=stdout,
        )
    return h


# ---------------------------------------------------------------------------
# query
# ---------------------------------------------------------------------------


def hierarchy_embedder(h: Hierarchy) -> HashedBagOfWords | None:
    emb = h.provenance[0].get("embedder") if h.provenance else None
    if isinstance(emb, Mapping) and emb.get("kind") == "hashed-bow":
        return HashedBagOfWords(int(emb["dim"]))
    return None


def cmd_query(hierarchy_path: str, query: Mapping[str, Any], algorithm: str | None = None) -> dict[str, Any]:
    algo = algorithm or query.get("algorithm") or "topdown"
    if algo not in ALGORITHMS:
        raise UnknownAlgorithm(f"unknown algorithm {algo!r}; choose from {sorted(ALGORITHMS)}")
    h = Hierarchy.load(hierarchy_path)
    problems = validate_hierarchy(h)
    if problems:
        raise InvalidHierarchyFile(f"{hierarchy_path}: " + "; ".join(map(str, problems)))
    q = Query.from_dict(query, hierarchy_embedder(h))
    if algo == "topdown" and q.beams is None:
        q = Query.from_dict({**query, "beams": [max(1, q.k)] * (h.depth + 1)}, hierarchy_embedder(h))
    res = run(h, q, algo)
    return {"algorithm": algo, **res.to_dict()}


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------


def cmd_experiment(config_path: str, *, seed: int | None = None, out: str | None = None) -> tuple[str, str]:
    spec = ExperimentSpec.from_toml(config_path, seed=seed, out=out)
    return write_outputs(spec, run_experiment(spec))


# ---------------------------------------------------------------------------
# measure
# ---------------------------------------------------------------------------


def _load_table(d: Any, base: str) -> JointTable:
    if isinstance(d, str):
        path = d if os.path.isabs(d) else os.path.join(base, d)
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(str(exc)) from exc
        if path.endswith(".json"):
            return _load_table(json.loads(text), base)
        return JointTable.loads(text)
    if isinstance(d, Mapping):
        return JointTable(d["variables"], [(tuple(o), float(p)) for o, p in d["rows"]])
    raise InvalidTable("table must be a file path or {variables, rows}")


def load_world(fixture: Mapping[str, Any], base: str = ".") -> Any:
    preset = fixture.get("preset")
    if preset == "iid-bits":
        return iid_bits_world(int(fixture.get("n", 4)), float(fixture.get("p_one", 0.5)), fixture.get("query", ["X0"]))
    if preset == "latent-tree":
        return gen_world(
            int(fixture.get("depth", 2)),
            int(fixture.get("arity", 2)),
            float(fixture.get("emission_entropy", 0.0)),
            int(fixture.get("seed", 0)),
        )
    if preset is not None:
        raise ConfigError(f"unknown world preset {preset!r}")
    if "table" not in fixture:
        raise ConfigError("world fixture needs 'table' or 'preset'")
    table = _load_table(fixture["table"], base)
    atoms = fixture.get("atoms") or [v for v in table.variables if v not in fixture.get("query", [])]
    return world_from_table(table, atoms, fixture.get("query", []))


def _compose(maps: list, upto: int):
    def fn(v: tuple) -> tuple:
        for m in maps[:upto]:
            v = m(v)
        return v

    return fn


def cmd_measure(fixture: Mapping[str, Any], base: str = ".", levels: list | None = None) -> dict[str, Any]:
    """Monotonicity, SS family and Fano suite for one enumerable world."""
    world = load_world(fixture, base)
    specs = levels if levels is not None else fixture.get("levels", [])
    try:
        maps = [level_map_from_dict(d) for d in specs]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    epsilon = float(fixture.get("epsilon", 0.1))
    mono = check_monotonicity(world, maps)
    atoms = list(world.atom_vars)
    qvars = list(world.query_vars)
    failures = list(mono.violations)

    ss_levels = []
    fano = []
    for ell in range(1, len(maps) + 1):
        rho = _compose(maps, ell)
        entry: dict[str, Any] = {"level": ell, "ss": ss_exact(world.table, atoms, rho)}
        if qvars:
            r = ss_q_exact(world.table, atoms, rho, qvars)
            entry.update(ss_q=r.ss_q, r_q=r.r_q, bound=r.bound)
            if r.bound is not None and r.ss_q < r.bound - 1e-9:
                failures.append(f"level {ell}: ss_q {r.ss_q} below bound {r.bound}")
        ss_levels.append(entry)

        if qvars:
            t = world.table.derive("__V__", atoms, rho).derive("__Q__", qvars, lambda v: v)
            n_k = len(t.marginal("__Q__"))
            i_bits = mutual_information(t, "__Q__", "__V__")
            cell: dict[str, Any] = {"level": ell, "n_k": n_k, "mutual_info": i_bits}
            try:
                lb = fano_error_lower_bound(i_bits, n_k)
            except InvalidGroupCount:
                lb = None
            err = best_estimator_error(t, "__Q__", "__V__")
            cell.update(error_lower_bound=lb, best_error=err, fano_max_groups=fano_max_groups(i_bits, epsilon))
            if lb is not None and err < lb - 1e-9:
                failures.append(f"level {ell}: MAP error {err} below Fano bound {lb}")
            fano.append(cell)

    report: dict[str, Any] = {
        "atoms": atoms,
        "query": qvars,
        "levels": [m.name for m in maps],
        "monotonicity": mono.to_dict(),
        "self_sufficiency": ss_levels,
        "fano": fano,
        "epsilon": epsilon,
    }
    if len(atoms) >= 2:
        b, L = optimal_branching(len(atoms))
        report["branching"] = {"b": b, "depth": L}
    report["failures"] = failures
    report["ok"] = not failures
    return report


def dump_json(obj: Any) -> str:
    def default(o: Any) -> Any:
        if isinstance(o, float) and not math.isfinite(o):
            return str(o)
        raise TypeError(f"not serialisable: {type(o).__name__}")

    return json.dumps(obj, indent=2, sort_keys=True, default=default)


__all__ = [
    "HierMemError",
    "cmd_build",
    "cmd_experiment",
    "cmd_measure",
    "cmd_query",
    "compression_ratio",
    "level_coherence",
    "load_world",
]
