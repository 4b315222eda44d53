"""TOML configuration for build and experiment runs."""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..coarsen import GroupingSpec, HttpGenerator, ProcessGenerator, RhoSpec
from ..core import LevelSpec, UnitGraph
from ..errors import ConfigError
from ..extract import (
    EntityMatcher,
    HashedBagOfWords,
    chunk_fixed,
    embed_units,
    parse_structural,
    parse_trace,
    read_document,
    segment_trace,
)
from ..synthworld import PRESETS, PlantedCorpus, gen_disjoint_label_corpus, gen_planted_corpus

GROUPING_KINDS = ("kmeans", "modularity", "path_prefix", "temporal", "sequential", "all", "labels")


def load_toml(path: str) -> dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass
class Corpus:
    """A loaded corpus: the atom graph, optional ground truth, and how reps are embedded."""

    graph: UnitGraph
    embedder: HashedBagOfWords | None
    planted: PlantedCorpus | None = None
    source: dict[str, Any] = field(default_factory=dict)


def _resolve(base_dir: str, p: str) -> str:
    return p if os.path.isabs(p) else os.path.join(base_dir, p)


def load_corpus(section: Mapping[str, Any], base_dir: str, seed: int, embedding: Mapping[str, Any]) -> Corpus:
    dim = int(embedding.get("dim", 256))
    preset = section.get("preset")
    if preset == "disjoint-label":
        emb = HashedBagOfWords(dim)
        params = {k: section[k] for k in ("blocks", "units_per_block") if k in section}
        pc = gen_disjoint_label_corpus(seed=seed, embedder=emb, **params)
        return Corpus(pc.graph, emb, pc, {"preset": preset, "seed": seed, "embedder": emb.describe()})
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown corpus preset {preset!r}; known: {sorted(PRESETS) + ['disjoint-label']}")
        params = dict(PRESETS[preset])
        params.update({k: section[k] for k in ("blocks", "units_per_block", "dim", "noise") if k in section})
        pc = gen_planted_corpus(seed=seed, **params)
        # synthetic embeddings: representatives take the member mean
        return Corpus(pc.graph, None, pc, {"preset": preset, "seed": seed, **params})

    files = section.get("files")
    if not files:
        raise ConfigError("corpus needs 'files' or 'preset'")
    ent = section.get("entities", {})
    matcher = EntityMatcher(ent.get("dictionary", ()), ent.get("patterns", ())) if ent else None
    extractor = section.get("extractor", "chunk")
    units, edges = [], []
    for f in files:
        path = _resolve(base_dir, f)
        if not os.path.exists(path):
            raise ConfigError(f"corpus file not found: {path}")
        if extractor == "chunk":
            g = chunk_fixed(read_document(path), int(section.get("chunk_tokens", 100)), entity_matcher=matcher)
        elif extractor == "structural":
            g = parse_structural(read_document(path), entity_matcher=matcher)
        elif extractor == "trace":
            with open(path, encoding="utf-8") as fh:
                g = segment_trace(parse_trace(fh.read()), entity_matcher=matcher)
        else:
            raise ConfigError(f"unknown extractor {extractor!r}")
        units.extend(g.units)
        edges.extend(g.edges)
    emb = HashedBagOfWords(dim)
    graph = embed_units(UnitGraph(tuple(units), tuple(edges)), emb)
    return Corpus(graph, emb, None, {"files": list(files), "extractor": extractor, "embedder": emb.describe()})


def rho_from_config(d: Mapping[str, Any] | str) -> RhoSpec:
    if isinstance(d, str):
        d = {"kind": d}
    try:
        return RhoSpec(d["kind"], k=d.get("k"), declared=d.get("ss_class"), max_tokens=int(d.get("max_tokens", 256)))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad rho spec {dict(d)!r}: {exc}") from exc


def generator_from_config(d: Mapping[str, Any] | None) -> Any:
    if not d:
        return None
    if "url" in d:
        return HttpGenerator(d["url"], float(d.get("timeout", 30)))
    if "command" in d:
        return ProcessGenerator(d["command"], float(d.get("timeout", 30)))
    raise ConfigError("generator needs 'url' or 'command'")


def grouping_from_config(d: Mapping[str, Any], corpus: Corpus, seed: int, level: int) -> GroupingSpec:
    kind = d.get("grouping")
    if kind not in GROUPING_KINDS:
        raise ConfigError(f"level {level}: unknown grouping {kind!r}; choose from {GROUPING_KINDS}")
    params = {k: v for k, v in d.items() if k not in ("grouping", "rho")}
    if kind in ("kmeans", "modularity"):
        params.setdefault("seed", seed)
    if kind == "labels":
        if corpus.planted is None or level != 1:
            raise ConfigError("'labels' grouping needs a planted corpus preset and applies to level 1 only")
        params = {"labels": dict(corpus.planted.labels)}
    return GroupingSpec(kind, params)


def level_specs_from_config(
    levels: Sequence[Mapping[str, Any]], corpus: Corpus, seed: int, rho: RhoSpec | None = None
) -> list[LevelSpec]:
    if not levels:
        raise ConfigError("config needs at least one [[levels]] entry")
    specs = []
    for i, lv in enumerate(levels, start=1):
        r = rho or rho_from_config(lv.get("rho", "concat"))
        specs.append(LevelSpec(grouping_from_config(lv, corpus, seed, i), r))
    return specs
