"""``admarf`` command line: check, parse --dump-ast, run."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import harness
from .checker import check, reachability_report
from .parser import dump_ast, parse_file
from .scenario import ScenarioError, load_scenario
from .sim import ConfigError, PipelineWorld
from .trace import dumps


def _color() -> bool:
    return not os.environ.get("ADMARF_NO_COLOR") and sys.stderr.isatty()


def _io_error(path, exc) -> int:
    print(f"{path}: error: {exc.strerror or exc}", file=sys.stderr)
    return harness.EXIT_IO


def _load_spec(path):
    """(model, exit code).  Prints diagnostics and findings."""
    try:
        tree, diags = parse_file(path)
    except OSError as exc:
        return None, _io_error(path, exc)
    except UnicodeDecodeError as exc:
        print(f"{path}: error: not UTF-8 text ({exc.reason})", file=sys.stderr)
        return None, harness.EXIT_IO
    color = _color()
    for d in diags:
        print(d.format(color), file=sys.stderr)
    if tree is None:
        return None, harness.EXIT_SPEC
    report = check(tree)
    for f in report.errors:
        print(f.format())
    for f in report.warnings + (tuple(reachability_report(tree)) if report.passed else ()):
        print(f"{f.rule} {f.span} warning: {f.message}")
    if not report.passed:
        return None, harness.EXIT_SPEC
    return report.model, harness.EXIT_OK


def cmd_check(args) -> int:
    _, code = _load_spec(args.spec)
    return code


def cmd_parse(args) -> int:
    try:
        tree, diags = parse_file(args.spec)
    except OSError as exc:
        return _io_error(args.spec, exc)
    for d in diags:
        print(d.format(_color()), file=sys.stderr)
    if tree is None:
        return harness.EXIT_SPEC
    if args.dump_ast:
        sys.stdout.write(dump_ast(tree))
    return harness.EXIT_OK


def cmd_run(args) -> int:
    model, code = _load_spec(args.spec)
    if model is None:
        return code
    try:
        sc = load_scenario(args.scenario)
    except OSError as exc:
        return _io_error(args.scenario, exc)
    except ScenarioError as exc:
        print(f"{args.scenario}: error: {exc}", file=sys.stderr)
        return harness.EXIT_IO
    if sc.world_path() is None:
        print(f"{args.scenario}: error: no world header", file=sys.stderr)
        return harness.EXIT_IO
    seed = sc.seed if args.seed is None else args.seed
    try:
        world = PipelineWorld.from_file(sc.world_path(), seed)
    except OSError as exc:
        return _io_error(sc.world_path(), exc)
    except ConfigError as exc:
        print(f"{sc.world_path()}: error: {exc}", file=sys.stderr)
        return harness.EXIT_IO
    try:
        result = harness.run_scenario(model, sc, world, ticks=args.ticks)
    except ScenarioError as exc:
        print(f"{args.scenario}: error: {exc}", file=sys.stderr)
        return harness.EXIT_IO
    text = dumps(result.records)
    if args.trace:
        try:
            Path(args.trace).write_text(text, encoding="utf-8")
        except OSError as exc:
            return _io_error(args.trace, exc)
    else:
        sys.stdout.write(text)
    print(f"{result.message} (exit {result.exit_code})", file=sys.stderr)
    return result.exit_code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="admarf", description="Autonomic policy interpreter and pipeline simulator")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("check", help="parse and consistency-check a policy model")
    p.add_argument("spec")
    p.set_defaults(func=cmd_check)
    p = sub.add_parser("parse", help="parse a policy model")
    p.add_argument("--dump-ast", action="store_true", help="print the canonical form")
    p.add_argument("spec")
    p.set_defaults(func=cmd_parse)
    p = sub.add_parser("run", help="run a scenario against a policy model")
    p.add_argument("--spec", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--ticks", type=int)
    p.add_argument("--trace", help="trace output path (default: stdout)")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
