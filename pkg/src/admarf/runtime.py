"""Edge-triggered policy engine.

One ``settle_tick`` refreshes RESOURCE metrics, then loops
recompute-SLOs / enqueue-edges / drain / dispatch until nothing moves.
Everything outside the model goes through a :class:`WorldPort`.
"""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Protocol

from . import model as m
from .model import (AS_SCOPE, EvaluationError, ResolutionError, Satisfaction, evaluate_slo,
                    key, metric_validity, resolve_reference)
from .trace import TraceRecord

MAX_CALL_DEPTH = 200


class EngineError(Exception):
    """Fatal runtime error; the run cannot continue."""


class DivergenceError(EngineError):
    def __init__(self, tick: int, steps: int):
        super().__init__(f"divergence at tick {tick}: more than {steps} micro-steps")
        self.tick = tick
        self.steps = steps


class UnboundHookError(EngineError):
    pass


class InterfaceError(Exception):
    """Raised by a world port or host hook when a managed-element call fails."""


class WorldPort(Protocol):
    def invoke(self, scope: str, element: str, function: str, args: tuple) -> Any: ...

    def read_metric(self, scope: str, element: str, function: str) -> Any: ...

    def poll_stimuli(self) -> list[str]: ...

    def deliver(self, envelope: Any, scope: str, message: str, channel: str) -> None: ...


class NullPort:
    """A world with nothing in it: every call fails, no stimuli."""

    def invoke(self, scope, element, function, args):
        raise InterfaceError(f"no binding for {scope}.{element}.{function}")

    def read_metric(self, scope, element, function):
        raise InterfaceError(f"no binding for {scope}.{element}.{function}")

    def poll_stimuli(self):
        return []

    def deliver(self, envelope, scope, message, channel):
        pass


Hook = Callable[[str, tuple], Any]


@dataclass
class EngineConfig:
    max_micro_steps: int = 10_000


@dataclass
class FluentState:
    active: bool = False
    since: Optional[int] = None
    dispatched: bool = False


@dataclass(frozen=True)
class EventInstance:
    event: str
    cause: str
    tick: int


@dataclass
class EngineState:
    tick: int = 0
    fluents: dict[str, FluentState] = field(default_factory=dict)
    metrics: dict[str, Any] = field(default_factory=dict)
    satisfaction: dict[str, Satisfaction] = field(default_factory=dict)
    queue: deque = field(default_factory=deque)
    seen_metrics: dict[str, Any] = field(default_factory=dict)  # last values step 3 looked at


class _Return(Exception):
    def __init__(self, value):
        self.value = value


@dataclass
class _Frame:
    scope: str
    owner: str
    locals: dict = field(default_factory=dict)
    binders: dict = field(default_factory=dict)
    errored: bool = False
    receives: list = field(default_factory=list)


class Engine:
    def __init__(self, model: m.SpecModel, port: Optional[WorldPort] = None,
                 hooks: Optional[dict[str, Hook]] = None,
                 sink: Optional[Callable[[TraceRecord], None]] = None,
                 config: Optional[EngineConfig] = None):
        self.model = model
        self.port = port if port is not None else NullPort()
        self.hooks = dict(hooks or {})
        self.sink = sink
        self.config = config or EngineConfig()
        self.records: list[TraceRecord] = []
        self._steps = 0
        self._depth = 0
        self._inflight: dict[str, Any] = {}
        self._index()
        st = EngineState()
        for k, _, md in self._metrics:
            st.metrics[k] = md.initial_value
            st.seen_metrics[k] = md.initial_value
        for k, _, _ in self._fluents:
            st.fluents[k] = FluentState()
        self.state = st
        for k, scope, slo in self._slos:
            st.satisfaction[k] = evaluate_slo(slo, model, st.metrics, scope)

    # -- indexes --

    def _resolve(self, ref, scope, binders=None) -> m.Resolved:
        path = ref.path if isinstance(ref, m.Ref) else ref
        return resolve_reference(path, self.model, scope, binders)

    def _index(self):
        mdl = self.model
        self._slos, self._metrics, self._fluents = [], [], []
        self._events: dict[str, tuple[str, m.EventDef]] = {}
        self._actions: dict[str, tuple[str, m.ActionDef]] = {}
        self._metric_defs: dict[str, tuple[str, m.MetricDef]] = {}
        self._on_slo = defaultdict(list)
        self._on_metric = defaultdict(list)
        self._on_sent = defaultdict(list)
        self._occurred = defaultdict(list)
        self._initiates = defaultdict(list)
        self._terminates = defaultdict(list)
        self._mappings = defaultdict(list)
        for scope in mdl.scopes:
            tier = mdl.tier(scope)
            self._slos += [(key(scope, s.name), scope, s) for s in tier.slos]
            for md in tier.metrics:
                self._metrics.append((key(scope, md.name), scope, md))
                self._metric_defs[key(scope, md.name)] = (scope, md)
            for a in tier.actions:
                self._actions[key(scope, a.name)] = (scope, a)
            for e in tier.events:
                ek = key(scope, e.name)
                self._events[ek] = (scope, e)
                act = e.activation
                if act is None:
                    continue
                for t in act.targets:
                    tk = self._resolve(t, scope).key
                    if act.kind in ("DEGRADED", "NORMALIZED"):
                        self._on_slo[(act.kind, tk)].append(ek)
                    elif act.kind == "CHANGED":
                        self._on_metric[tk].append(ek)
                    elif act.kind == "SENT":
                        self._on_sent[tk].append(ek)
                    else:
                        self._occurred[tk].append(ek)
            for p in tier.policies:
                for f in p.fluents:
                    fk = key(scope, f.name)
                    self._fluents.append((fk, scope, f))
                    for r in f.initiated_by:
                        self._initiates[self._resolve(r, scope).key].append(fk)
                    for r in f.terminated_by:
                        self._terminates[self._resolve(r, scope).key].append(fk)
                for mp in p.mappings:
                    conds = tuple(self._resolve(c, scope).key for c in mp.conditions)
                    acts = tuple(self._resolve(a, scope).key for a in mp.actions)
                    for c in conds:
                        self._mappings[c].append((conds, acts))

    # -- trace --

    def emit(self, kind: str, subject: str, **detail):
        rec = TraceRecord(self.state.tick, kind, subject, detail)
        self.records.append(rec)
        if self.sink is not None:
            self.sink(rec)

    def _step(self):
        self._steps += 1
        if self._steps > self.config.max_micro_steps:
            raise DivergenceError(self.state.tick, self.config.max_micro_steps)

    # -- metrics and SLOs --

    def set_metric(self, mkey: str, value, cause: str):
        _, md = self._metric_defs[mkey]
        valid = metric_validity(md, value)
        if self.state.metrics[mkey] == value and type(self.state.metrics[mkey]) is type(value):
            return
        self.state.metrics[mkey] = value
        self.emit("metric", mkey, value=value, valid=valid, cause=cause)

    def _refresh_resources(self):
        for mk, scope, md in self._metrics:
            if md.kind != "RESOURCE":
                continue
            src = self._resolve(md.source, scope)
            try:
                v = self.port.read_metric(src.scope, src.member, src.name)
                self.set_metric(mk, v, "refresh")
            except (InterfaceError, EvaluationError) as exc:
                self.emit("error", mk, message=str(exc))

    def _recompute(self):
        out = []
        for k, scope, slo in self._slos:
            new = evaluate_slo(slo, self.model, self.state.metrics, scope)
            if new is not self.state.satisfaction[k]:
                self.state.satisfaction[k] = new
                self.emit("slo", k, state=new.value)
                out.append((k, new))
        return out

    def _enqueue_edges(self, transitions) -> int:
        fired = 0
        for k, sat in transitions:
            kind = "NORMALIZED" if sat else "DEGRADED"
            for ev in self._on_slo.get((kind, k), ()):
                fired += self.enqueue(ev, f"{kind.lower()}:{k}")
        for mk, _, _ in self._metrics:
            cur, seen = self.state.metrics[mk], self.state.seen_metrics[mk]
            if cur != seen or type(cur) is not type(seen):
                self.state.seen_metrics[mk] = cur
                for ev in self._on_metric.get(mk, ()):
                    fired += self.enqueue(ev, f"changed:{mk}")
        return fired

    # -- events and fluents --

    def enqueue(self, ev_key: str, cause: str) -> int:
        """Queue an event if its guards hold now.  Returns 1 if queued."""
        scope, ev = self._events[ev_key]
        ok = True
        if ev.guards is not None:
            try:
                ok = _truthy(self._eval(ev.guards, _Frame(scope, ev_key)))
            except (EvaluationError, ResolutionError) as exc:
                self.emit("error", ev_key, message=f"guard: {exc}")
                ok = False
        self.emit("event", ev_key, status="fired" if ok else "suppressed", cause=cause)
        if ok:
            self.state.queue.append(EventInstance(ev_key, cause, self.state.tick))
        return int(ok)

    def _drain(self):
        drained = flips = 0
        fl = self.state.fluents
        while self.state.queue:
            self._step()
            inst = self.state.queue.popleft()
            drained += 1
            for dep in self._occurred.get(inst.event, ()):
                self.enqueue(dep, f"occurred:{inst.event}")
            ended = set()
            for fk in self._terminates.get(inst.event, ()):
                ended.add(fk)
                if fl[fk].active:
                    fl[fk] = FluentState()
                    self.emit("fluent", fk, state="inactive", event=inst.event)
                    flips += 1
            for fk in self._initiates.get(inst.event, ()):
                if fk in ended:
                    self.emit("fluent", fk, state="unchanged", event=inst.event, reason="terminated by the same event")
                elif fl[fk].active:
                    self.emit("fluent", fk, state="unchanged", event=inst.event, reason="already active")
                else:
                    fl[fk] = FluentState(True, self.state.tick, False)
                    self.emit("fluent", fk, state="active", event=inst.event)
                    flips += 1
        return drained, flips

    def _dispatch(self) -> int:
        ran = 0
        fl = self.state.fluents
        for fk, _, _ in self._fluents:
            st = fl[fk]
            if not st.active or st.dispatched:
                continue
            st.dispatched = True
            for conds, acts in self._mappings.get(fk, ()):
                if all(fl[c].active for c in conds):
                    for ak in acts:
                        self.run_action(ak, (), via=f"fluent:{fk}")
                        ran += 1
        return ran

    def _settle(self):
        while True:
            self._step()
            trans = self._recompute()
            fired = self._enqueue_edges(trans)
            drained, flips = self._drain()
            ran = self._dispatch()
            if not (trans or fired or drained or flips or ran or self.state.queue):
                return

    def settle_tick(self) -> list[TraceRecord]:
        """Run one logical tick to quiescence; returns the records it emitted."""
        start = len(self.records)
        self._refresh_resources()
        for name in self.port.poll_stimuli():
            ev = self._event_key(name)
            if ev is None:
                self.emit("error", name, message="unknown stimulus event")
            else:
                self.enqueue(ev, "external")
        self._settle()
        out = self.records[start:]
        self.state.tick += 1
        self._steps = 0
        return out

    def is_quiescent(self) -> bool:
        """True iff re-running recompute/enqueue/drain/dispatch would do nothing."""
        st = self.state
        if st.queue:
            return False
        for k, scope, slo in self._slos:
            if evaluate_slo(slo, self.model, st.metrics, scope) is not st.satisfaction[k]:
                return False
        for mk, _, _ in self._metrics:
            if st.metrics[mk] != st.seen_metrics[mk]:
                return False
        return not any(f.active and not f.dispatched for f in st.fluents.values())

    def fluent_active(self, fk: str) -> bool:
        return self.state.fluents[fk].active

    def _event_key(self, name: str) -> Optional[str]:
        if name in self._events:
            return name
        for scope in self.model.scopes:
            k = key(scope, name)
            if k in self._events:
                return k
        return None

    # -- actions --

    def run_action(self, akey: str, args: tuple = (), via: str = "host"):
        """Execute an action; returns ``(return value, errored)``."""
        scope, a = self._actions[akey]
        self._step()
        if a.guards is not None:
            try:
                ok = _truthy(self._eval(a.guards, _Frame(scope, akey)))
            except (EvaluationError, ResolutionError) as exc:
                self.emit("error", akey, message=f"guard: {exc}")
                ok = False
            if not ok:
                self.emit("action", akey, via=via, status="skipped")
                return None, False
        if self._depth >= MAX_CALL_DEPTH:
            raise EngineError(f"call depth exceeded in {akey}")
        self.emit("action", akey, via=via, status="started")
        frame = _Frame(scope, akey, {p.name: v for p, v in zip(a.params, args)})
        value = None
        self._depth += 1
        try:
            if a.impl:
                hook = self.hooks.get(a.name)
                if hook is None:
                    raise UnboundHookError(f"IMPL action '{akey}' has no host hook bound")
                try:
                    value = hook(scope, tuple(args))
                except InterfaceError as exc:
                    self.emit("error", akey, message=str(exc))
                    frame.errored = True
            if a.body is not None:
                try:
                    self._exec(a.body, frame)
                except _Return as r:
                    value = r.value
        finally:
            self._depth -= 1
        self.emit("action", akey, via=via, status="errored" if frame.errored else "completed")
        if frame.errored:
            for ref in a.onerr_triggers:
                self.enqueue(self._resolve(ref, scope).key, f"onerr:{akey}")
        else:
            for ref in a.triggers:
                self.enqueue(self._resolve(ref, scope).key, f"action:{akey}")
        return value, frame.errored

    def _exec(self, body, fr: _Frame):
        for s in body:
            try:
                self._exec_one(s, fr)
            except (EvaluationError, ResolutionError) as exc:
                self.emit("error", fr.owner, message=str(exc))
                fr.errored = True

    def _exec_one(self, s, fr: _Frame):
        if isinstance(s, m.Assign):
            fr.locals[s.name] = self._eval(s.value, fr)
        elif isinstance(s, m.If):
            if _truthy(self._eval(s.cond, fr)):
                self._exec(s.body, fr)
        elif isinstance(s, m.ForeachStmt):
            outer = fr.binders
            for ae in m.collection_members(self.model, s.collection, fr.scope, outer):
                fr.binders = {**outer, s.binder: ae}
                try:
                    self._exec(s.body, fr)
                finally:
                    fr.binders = outer
        elif isinstance(s, m.CallStmt):
            self._call(s.call, fr)
        elif isinstance(s, m.SetMetric):
            r = self._resolve(s.target, fr.scope, fr.binders)
            self.set_metric(r.key, s.value.value, f"set:{fr.owner}")
        elif isinstance(s, m.Trigger):
            r = self._resolve(s.event, fr.scope, fr.binders)
            self.enqueue(r.key, f"trigger:{fr.owner}")
        elif isinstance(s, m.Receive):
            msg = self._resolve(s.message, fr.scope, fr.binders)
            ch = self._resolve(s.channel, fr.scope, fr.binders)
            fr.receives.append((msg.key, ch.name))
        elif isinstance(s, m.Send):
            msg = self._resolve(s.message, fr.scope, fr.binders)
            ch = self._resolve(s.channel, fr.scope, fr.binders)
            self.emit("message", msg.key, status="sent", channel=key(ch.scope, ch.name))
        elif isinstance(s, m.Return):
            raise _Return(self._eval(s.value, fr))

    def _call(self, call: m.Call, fr: _Frame):
        r = self._resolve(call.target, fr.scope, fr.binders)
        args = tuple(self._eval(a, fr) for a in call.args)
        if r.kind == "action":
            value, errored = self.run_action(r.key, args, via=f"call:{fr.owner}")
            fr.errored |= errored
            return value
        if r.kind != "interface-function":
            raise EvaluationError(f"'{call.target.text}' is not callable")
        try:
            return self.port.invoke(r.scope, r.member, r.name, args)
        except InterfaceError as exc:
            self.emit("error", f"{r.scope}.{r.member}.{r.name}", message=str(exc), caller=fr.owner)
            for ref in r.entity.onerr_triggers:
                self.enqueue(self._resolve(ref, r.scope).key, f"onerr:{r.scope}.{r.member}.{r.name}")
            fr.errored = True
            return None

    def _eval(self, e, fr: _Frame):
        if isinstance(e, m.Literal):
            return e.value
        if isinstance(e, m.Not):
            return not _truthy(self._eval(e.operand, fr))
        if isinstance(e, m.BinOp):
            left = _truthy(self._eval(e.left, fr))
            if e.op == "AND":
                return left and _truthy(self._eval(e.right, fr))
            return left or _truthy(self._eval(e.right, fr))
        if isinstance(e, m.ForeachExpr):
            outer = fr.binders
            try:
                for ae in m.collection_members(self.model, e.collection, fr.scope, outer):
                    fr.binders = {**outer, e.binder: ae}
                    if not _truthy(self._eval(e.body, fr)):
                        return False
                return True
            finally:
                fr.binders = outer
        if isinstance(e, m.Call):
            return self._call(e, fr)
        if isinstance(e, m.Ref):
            if len(e.path) == 1:
                name = e.path[0]
                if name in fr.locals:
                    return fr.locals[name]
                if name in fr.binders:
                    return fr.binders[name]
            try:
                r = self._resolve(e, fr.scope, fr.binders)
            except ResolutionError as exc:
                raise EvaluationError(f"unresolved symbol '{e.text}'") from exc
            if r.kind == "metric":
                return metric_validity(r.entity, self.state.metrics[r.key])
            if r.kind == "slo":
                return bool(self.state.satisfaction[r.key])
            if r.kind == "fluent":
                return self.state.fluents[r.key].active
            if r.kind in ("message", "message-field"):
                env = self._inflight.get(r.key)
                if env is None:
                    raise EvaluationError(f"no '{r.key}' message in flight")
                return env if r.kind == "message" else env.field(r.member)
            if r.kind == "ae":
                return r.name
            raise EvaluationError(f"'{e.text}' is a {r.kind}, not a value")
        raise EvaluationError(f"cannot evaluate {type(e).__name__}")

    # -- message hook --

    def resolve_message(self, name: str) -> Optional[m.Resolved]:
        """``publicMessage`` or ``SCOPE.privateMessage``; unqualified names must be unique."""
        if "." in name:
            scope, short = name.split(".", 1)
            scopes = [AS_SCOPE] if scope in (AS_SCOPE, "ASIP") else [scope]
        else:
            short, scopes = name, list(self.model.scopes)
        hits = []
        for sc in scopes:
            if sc != AS_SCOPE and self.model.ae(sc) is None:
                continue
            for msg in self.model.protocol(sc).messages:
                if msg.name == short:
                    hits.append(m.Resolved("message", sc, short, msg))
        return hits[0] if len(hits) == 1 else None

    def _governing_function(self, scope: str, mkey: str):
        for fn in self.model.protocol(scope).functions:
            for s in _walk(fn.body):
                if isinstance(s, m.Receive) and self._resolve(s.message, scope).key == mkey:
                    return fn
        return None

    def hook_message(self, envelope, message: str) -> bool:
        """Gate an incoming envelope.  Returns True iff it was delivered."""
        sender = getattr(envelope, "sender", "?")
        r = self.resolve_message(message)
        if r is None:
            self.emit("error", message, message="unknown or ambiguous message", sender=sender)
            return False
        mkey = r.key
        self._inflight[mkey] = envelope
        try:
            self.emit("message", mkey, status="incoming", sender=sender)
            for ev in self._on_sent.get(mkey, ()):
                self.enqueue(ev, f"sent:{mkey}")
            self._settle()
            fn = self._governing_function(r.scope, mkey)
            if fn is None:
                self.emit("error", mkey, message="no communication function receives this message", sender=sender)
                return False
            fr = _Frame(r.scope, key(r.scope, fn.name))
            self._exec(fn.body, fr)
            got = [ch for mk, ch in fr.receives if mk == mkey]
            if got:
                self.port.deliver(envelope, r.scope, r.name, got[0])
                self.emit("message", mkey, status="delivered", sender=sender, channel=key(r.scope, got[0]))
                return True
            self.emit("message", mkey, status="discarded", sender=sender, function=fr.owner)
            for mk in self._condition_metrics(fn, r.scope):
                _, md = self._metric_defs[mk]
                if md.kind == "PLAIN":
                    self.set_metric(mk, md.initial_value, "reset")
            self._settle()
            return False
        finally:
            del self._inflight[mkey]

    def _condition_metrics(self, fn: m.FunctionDef, scope: str) -> list[str]:
        out = []
        for s in _walk(fn.body):
            if isinstance(s, m.If):
                for ref in _refs(s.cond):
                    try:
                        r = self._resolve(ref, scope)
                    except ResolutionError:
                        continue
                    if r.kind == "metric" and r.key not in out:
                        out.append(r.key)
        return out


def _truthy(v) -> bool:
    return bool(v) if v is not None else False


def _walk(body):
    for s in body:
        yield s
        if isinstance(s, (m.If, m.ForeachStmt)):
            yield from _walk(s.body)


def _refs(e):
    if isinstance(e, m.Ref):
        yield e
    elif isinstance(e, m.Not):
        yield from _refs(e.operand)
    elif isinstance(e, m.BinOp):
        yield from _refs(e.left)
        yield from _refs(e.right)
