"""Command-line entry point: ``hiermem build|query|experiment|measure``.

Exit codes: 0 success, 1 usage or configuration error, 2 validation or
assertion failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Sequence

from ..errors import (
    ConfigError,
    HierMemError,
    LevelBuildError,
    UnknownAlgorithm,
)
from .config import load_toml
from .commands import cmd_build, cmd_experiment, cmd_measure, cmd_query, dump_json

EXIT_OK, EXIT_USAGE, EXIT_INVALID = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hiermem", description="Build, query and measure hierarchical memories.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("build", help="extract atoms and build the hierarchy")
    b.add_argument("--config", required=True)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", help="hierarchy JSON path (default from config)")

    q = sub.add_parser("query", help="run one query against a hierarchy file")
    q.add_argument("hierarchy")
    q.add_argument("query", help="query JSON file, or '-' for stdin")
    q.add_argument("--algorithm", help="topdown, collapsed, navigate, multiview or flat")
    q.add_argument("--config", help="build config whose [query] table supplies defaults")
    q.add_argument("--out")

    e = sub.add_parser("experiment", help="run the rho x tau x budget matrix")
    e.add_argument("--config", required=True)
    e.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    e.add_argument("--out", help="output directory")

    m = sub.add_parser("measure", help="information measurements on an enumerable world")
    m.add_argument("--config", required=True, help="world fixture JSON")
    m.add_argument("--levels", help="JSON list of level maps (overrides the fixture)")
    m.add_argument("--out")
    return p


def _read_json(path: str) -> object:
    if path == "-":
        return json.load(sys.stdin)
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "build":
        cmd_build(args.config, seed=args.seed, out=args.out, stdout=sys.stdout)
        return EXIT_OK
    if args.command == "query":
        query = _read_json(args.query)
        if not isinstance(query, dict):
            raise ConfigError("query JSON must be an object")
        if args.config:
            query = {**load_toml(args.config).get("query", {}), **query}
        _emit(dump_json(cmd_query(args.hierarchy, query, args.algorithm)), args.out)
        return EXIT_OK
    if args.command == "experiment":
        csv_path, json_path = cmd_experiment(args.config, seed=args.seed, out=args.out)
        print(f"wrote {csv_path}\nwrote {json_path}")
        return EXIT_OK
    fixture = _read_json(args.config)
    if not isinstance(fixture, dict):
        raise ConfigError("world fixture must be a JSON object")
    levels = _read_json(args.levels) if args.levels else None
    base = os.path.dirname(os.path.abspath(args.config))
    report = cmd_measure(fixture, base, levels)
    _emit(dump_json(report), args.out)
    return EXIT_OK if report["ok"] else EXIT_INVALID


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, UnknownAlgorithm) as exc:
        print(f"hiermem: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LevelBuildError as exc:
        print(f"hiermem: error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc.cause, ConfigError) else EXIT_INVALID
    except (HierMemError, ValueError, KeyError) as exc:
        print(f"hiermem: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
