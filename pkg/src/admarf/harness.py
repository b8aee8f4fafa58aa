"""Bind the engine to the simulator and run scenarios in lockstep."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from . import model as m
from .runtime import Engine, EngineConfig, EngineError, InterfaceError
from .scenario import Expect, Scenario, ScenarioError
from .sim import Envelope, PipelineWorld, PresentedCertificate, SimError
from .trace import TraceRecord

EXIT_OK, EXIT_SPEC, EXIT_IO, EXIT_UNMET, EXIT_RUNTIME = 0, 1, 2, 3, 4


class SimPort:
    """WorldPort over a :class:`PipelineWorld`.  AEs are bound to stages (and
    optionally to one node) through the world config's ``bindings``."""

    def __init__(self, world: PipelineWorld, emit: Optional[Callable] = None):
        self.world = world
        self.emit = emit or (lambda *a, **k: None)
        self.bindings = dict(world.config.bindings)
        self._functions = {
            "countFailedNodes": lambda b, a: world.get_failed_nodes(b["stage"]),
            "countProblematicNodes": lambda b, a: world.get_problematic_nodes(b["stage"]),
            "getFailedNode": lambda b, a: world.first_node(b["stage"], "failed"),
            "getProblematicNode": lambda b, a: world.first_node(b["stage"], "problematic"),
            "runNodeReplica": lambda b, a: world.run_node_replica(*a),
            "recoverNode": lambda b, a: world.recover_node(*a),
            "reportProblem": self._report,
            "checkNodeCertificate": self._check_certificate,
            "syncCachedResults": lambda b, a: world.sync_results(b["stage"]),
        }

    def binding(self, scope: str) -> dict:
        b = self.bindings.get(scope)
        if b is None:
            raise InterfaceError(f"{scope} is not bound to a pipeline stage")
        return b

    def invoke(self, scope, element, function, args):
        fn = self._functions.get(function)
        if fn is None:
            raise InterfaceError(f"{scope}.{element}.{function} has no simulator binding")
        try:
            return fn(self.binding(scope), tuple(args))
        except (SimError, TypeError) as exc:
            raise InterfaceError(str(exc)) from exc

    def read_metric(self, scope, element, function):
        return self.invoke(scope, element, function, ())

    def poll_stimuli(self):
        return self.world.poll_stimuli()

    def deliver(self, envelope, scope, message, channel):
        self.world.deliver(m.key(scope, channel), envelope)

    def _report(self, b, args):
        stage = b["stage"]
        self.emit("error", "problem-report", stage=stage,
                  failed=self.world.get_failed_nodes(stage),
                  problematic=self.world.get_problematic_nodes(stage))

    def _check_certificate(self, b, args):
        (presented,) = args
        if not isinstance(presented, PresentedCertificate):
            return False
        return self.world.check_node_certificate(presented.certificate, presented.payload)

    def _adapt_cp(self, scope, args):
        node = self.binding(scope).get("node")
        if node is None:
            raise InterfaceError(f"{scope} is not bound to a node")
        try:
            return self.world.select_protocol(node)
        except SimError as exc:
            raise InterfaceError(str(exc)) from exc

    def hooks(self) -> dict:
        return {"adaptCP": self._adapt_cp}


@dataclass
class RunResult:
    exit_code: int
    records: list[TraceRecord]
    ticks_run: int
    quiescent: list[bool] = field(default_factory=list)
    message: str = ""
    world: Optional[PipelineWorld] = None
    engine: Optional[Engine] = None

    @property
    def met(self) -> bool:
        return self.exit_code == EXIT_OK


def _channel_key(name: str) -> str:
    return name if "." in name else m.key(m.AS_SCOPE, name)


def expect_met(e: Expect, engine: Engine, world: PipelineWorld) -> bool:
    if e.kind == "job-done":
        job = world.jobs.get(e.args[0])
        return job is not None and job.status == "done"
    if e.kind == "fluent-inactive":
        return not engine.fluent_active(_fluent_key(engine, e.args[0]))
    if e.kind == "delivered-count":
        return len(world.channels.get(_channel_key(e.args[0]), [])) == int(e.args[1])
    if e.kind == "cache-synced":
        caches = [n.result_cache for n in world.stage_nodes(world.stages[-1]) if n.counted]
        return bool(caches) and bool(caches[0]) and all(c == caches[0] for c in caches)
    if e.kind == "protocol":
        return world.node(e.args[0]).active_protocol == e.args[1]
    raise ValueError(e.kind)


def _fluent_key(engine: Engine, name: str) -> str:
    if name in engine.state.fluents:
        return name
    k = m.key(m.AS_SCOPE, name)
    if k in engine.state.fluents:
        return k
    raise ScenarioError(None, f"unknown fluent {name!r}")


def validate(sc: Scenario, engine: Engine, world: PipelineWorld) -> None:
    """Reject commands and expectations naming unknown things before tick 0."""
    for c in sc.commands:
        try:
            if c.name in ("fail-node", "degrade-node", "restore-node", "mark-unrecoverable"):
                world.node(c.args[0])
            elif c.name == "block-protocol" and c.args[0] not in world.costs:
                raise SimError(f"unknown protocol {c.args[0]!r}")
            elif c.name == "enter-stage" and c.args[0] not in world.config.stage_events:
                raise SimError(f"stage {c.args[0]!r} has no entry event")
            elif c.name in ("send-public", "send-private"):
                r = engine.resolve_message(c.args[1])
                if r is None:
                    raise SimError(f"unknown or ambiguous message {c.args[1]!r}")
                public = r.scope == m.AS_SCOPE
                if public != (c.name == "send-public"):
                    raise SimError(f"{c.args[1]} is not a {'public' if c.name == 'send-public' else 'private'} message")
        except SimError as exc:
            raise ScenarioError(c.line, str(exc)) from None
    for e in sc.expects:
        try:
            if e.kind == "fluent-inactive":
                _fluent_key(engine, e.args[0])
            elif e.kind == "protocol":
                world.node(e.args[0])
                if e.args[1] not in world.costs:
                    raise SimError(f"unknown protocol {e.args[1]!r}")
        except (SimError, ScenarioError) as exc:
            msg = exc.args[0] if isinstance(exc, SimError) else str(exc)
            raise ScenarioError(e.line, msg) from None


def apply(c, engine: Engine, world: PipelineWorld) -> None:
    if c.name == "fail-node":
        world.fail_node(c.args[0])
    elif c.name == "degrade-node":
        world.degrade_node(c.args[0])
    elif c.name == "restore-node":
        world.restore_node(c.args[0])
    elif c.name == "mark-unrecoverable":
        world.mark_unrecoverable(c.args[0])
    elif c.name == "block-protocol":
        world.block_protocol(c.args[0])
    elif c.name == "submit-job":
        world.submit_job(c.args[0])
    elif c.name == "enter-stage":
        world.enter_stage(c.args[0])
    else:
        sender, msg, hexpayload, mode = c.args
        payload = bytes.fromhex(hexpayload)
        cert = None if mode == "unsigned" else world.sign(sender, payload, forged=(mode == "forged"))
        engine.hook_message(Envelope(msg, sender, payload, cert), msg)


def run_scenario(model: m.SpecModel, sc: Scenario, world: PipelineWorld, *,
                 ticks: Optional[int] = None, config: Optional[EngineConfig] = None) -> RunResult:
    """Lockstep loop: commands, settle_tick, advance, quiescence probe, expectations."""
    port = SimPort(world)
    engine = Engine(model, port, hooks=port.hooks(), config=config)
    port.emit = engine.emit
    validate(sc, engine, world)
    max_ticks = sc.max_ticks if ticks is None else ticks
    by_tick: dict[int, list] = {}
    for c in sc.commands:
        by_tick.setdefault(c.tick, []).append(c)
    quiet: list[bool] = []
    result = RunResult(EXIT_UNMET, engine.records, 0, quiet, world=world, engine=engine)
    for t in range(max_ticks):
        try:
            for c in by_tick.get(t, ()):
                apply(c, engine, world)
            engine.settle_tick()
        except EngineError as exc:
            result.exit_code, result.message, result.ticks_run = EXIT_RUNTIME, str(exc), t + 1
            return result
        world.advance()
        quiet.append(engine.is_quiescent())
        result.ticks_run = t + 1
        if sc.expects and all(expect_met(e, engine, world) for e in sc.expects):
            result.exit_code, result.message = EXIT_OK, f"expectations met at tick {t}"
            return result
    if not sc.expects and max_ticks > 0:
        result.exit_code, result.message = EXIT_OK, f"ran {max_ticks} ticks"
    else:
        result.message = f"expectations not met after {max_ticks} ticks"
    return result
