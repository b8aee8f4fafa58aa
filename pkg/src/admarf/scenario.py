"""Scenario files: a few header lines and a tick-stamped command list.

    seed 0
    ticks 30
    world worlds/pipeline.yaml
    expect job-done job-1
    @5 fail-node clas-1
    @2 send-public ext-1 publicMessage deadbeef unsigned

``#`` starts a comment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

NODE_COMMANDS = ("fail-node", "degrade-node", "restore-node", "mark-unrecoverable")
SEND_COMMANDS = ("send-public", "send-private")
SEND_MODES = ("signed", "unsigned", "forged")
COMMANDS = NODE_COMMANDS + SEND_COMMANDS + ("block-protocol", "submit-job", "enter-stage")
EXPECT_ARITY = {"job-done": 1, "fluent-inactive": 1, "delivered-count": 2, "cache-synced": 0, "protocol": 2}


class ScenarioError(Exception):
    def __init__(self, line: Optional[int], message: str):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass(frozen=True)
class Command:
    tick: int
    name: str
    args: tuple[str, ...]
    line: int = 0


@dataclass(frozen=True)
class Expect:
    kind: str
    args: tuple[str, ...]
    line: int = 0


@dataclass
class Scenario:
    seed: int = 0
    max_ticks: int = 100
    world: Optional[str] = None
    expects: list[Expect] = field(default_factory=list)
    commands: list[Command] = field(default_factory=list)
    base_dir: Optional[Path] = None

    def world_path(self) -> Optional[Path]:
        if self.world is None:
            return None
        p = Path(self.world)
        return p if p.is_absolute() or self.base_dir is None else self.base_dir / p


def _nat(text: str, lineno: int, what: str) -> int:
    if not text.isdigit():
        raise ScenarioError(lineno, f"{what} must be a non-negative integer, got {text!r}")
    return int(text)


def _command(tick: int, words: list[str], lineno: int) -> Command:
    name, args = words[0], words[1:]
    if name not in COMMANDS:
        raise ScenarioError(lineno, f"unknown command {name!r}")
    if name in SEND_COMMANDS:
        if len(args) not in (3, 4):
            raise ScenarioError(lineno, f"{name} takes <sender> <message> <payload-hex> [mode]")
        try:
            bytes.fromhex(args[2])
        except ValueError:
            raise ScenarioError(lineno, f"payload is not hex: {args[2]!r}") from None
        if len(args) == 3:
            args = args + ["signed"]
        if args[3] not in SEND_MODES:
            raise ScenarioError(lineno, f"send mode must be one of {', '.join(SEND_MODES)}")
    elif len(args) != 1:
        raise ScenarioError(lineno, f"{name} takes exactly one argument")
    return Command(tick, name, tuple(args), lineno)


def parse_scenario(text: str, base_dir: Optional[Path] = None) -> Scenario:
    sc = Scenario(base_dir=base_dir)
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        words = raw.split("#", 1)[0].split()
        if not words:
            continue
        head = words[0]
        if head.startswith("@"):
            tick = _nat(head[1:], lineno, "tick")
            if len(words) < 2:
                raise ScenarioError(lineno, "missing command after tick")
            sc.commands.append(_command(tick, words[1:], lineno))
        elif head in ("seed", "ticks", "world"):
            if head in seen:
                raise ScenarioError(lineno, f"duplicate {head} header")
            seen.add(head)
            if len(words) != 2:
                raise ScenarioError(lineno, f"{head} takes one value")
            if head == "seed":
                sc.seed = _nat(words[1], lineno, "seed")
            elif head == "ticks":
                sc.max_ticks = _nat(words[1], lineno, "ticks")
            else:
                sc.world = words[1]
        elif head == "expect":
            if len(words) < 2 or words[1] not in EXPECT_ARITY:
                raise ScenarioError(lineno, f"expect needs one of {', '.join(EXPECT_ARITY)}")
            kind, args = words[1], tuple(words[2:])
            if len(args) != EXPECT_ARITY[kind]:
                raise ScenarioError(lineno, f"expect {kind} takes {EXPECT_ARITY[kind]} argument(s)")
            if kind == "delivered-count":
                _nat(args[1], lineno, "count")
            sc.expects.append(Expect(kind, args, lineno))
        else:
            raise ScenarioError(lineno, f"unrecognized line {raw.strip()!r}")
    sc.commands.sort(key=lambda c: c.tick)  # stable: file order within a tick
    return sc


def load_scenario(path) -> Scenario:
    p = Path(path)
    return parse_scenario(p.read_text(encoding="utf-8"), p.parent)
