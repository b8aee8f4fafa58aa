"""Audit trace records and their JSON-lines form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

KINDS = ("metric", "slo", "event", "fluent", "action", "message", "error")


@dataclass(frozen=True)
class TraceRecord:
    tick: int
    kind: str
    subject: str
    detail: dict = field(default_factory=dict)

    def to_json(self) -> str:
        obj = {"tick": self.tick, "kind": self.kind, "subject": self.subject, "detail": self.detail}
        return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "TraceRecord":
        obj = json.loads(line)
        if list(obj) != ["tick", "kind", "subject", "detail"]:
            raise ValueError(f"trace line has keys {list(obj)}")
        if obj["kind"] not in KINDS:
            raise ValueError(f"unknown trace kind {obj['kind']!r}")
        return cls(obj["tick"], obj["kind"], obj["subject"], obj["detail"])


def dumps(records: Iterable[TraceRecord]) -> str:
    return "".join(r.to_json() + "\n" for r in records)


def loads(text: str) -> list[TraceRecord]:
    return [TraceRecord.from_json(line) for line in text.splitlines() if line.strip()]
