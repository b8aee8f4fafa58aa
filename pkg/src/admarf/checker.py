"""Consistency rules R1-R9 over a parsed tree, plus a reachability report.

Rule ids:

    R1  unique names per namespace and scope
    R2  event references (fluents, TRIGGERS, ONERR_TRIGGERS, TRIGGER, OCCURRED)
    R3  action references (mappings, CALL targets) and mapping conditions
    R4  metric / SLO references (guards, SLO bodies, SET, activations), SLO cycles,
        initial values outside the metric domain
    R5  activation targets of the wrong entity kind
    R6  RESOURCE metrics must name a managed-element interface function as source
    R7  RECEIVE / SEND use messages and channels of their own protocol, only inside
        communication functions; SENT targets resolve
    R8  architecture groups and FOREACH collections name declared AEs
    R9  a fluent initiated and terminated by the same event (warning)
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import model as m
from .model import AS_SCOPE, ResolutionError, Span, resolve_reference


@dataclass(frozen=True)
class Finding:
    rule: str
    severity: str  # "error" | "warning"
    span: Optional[Span]
    message: str

    def format(self) -> str:
        where = str(self.span) if self.span else "<unknown>"
        return f"{self.rule} {where} {self.message}"


@dataclass(frozen=True)
class CheckReport:
    findings: tuple[Finding, ...]
    model: Optional[m.SpecModel] = None  # set iff passed

    @property
    def passed(self) -> bool:
        return not self.errors

    @property
    def errors(self) -> tuple[Finding, ...]:
        return tuple(f for f in self.findings if f.severity == "error")

    @property
    def warnings(self) -> tuple[Finding, ...]:
        return tuple(f for f in self.findings if f.severity == "warning")

    def rules(self) -> set[str]:
        return {f.rule for f in self.errors}


_ACTIVATION_KIND = {"DEGRADED": "slo", "NORMALIZED": "slo", "OCCURRED": "event",
                    "SENT": "message", "CHANGED": "metric"}
_ACTIVATION_RULE = {"DEGRADED": "R4", "NORMALIZED": "R4", "CHANGED": "R4",
                    "OCCURRED": "R2", "SENT": "R7"}


class _Checker:
    def __init__(self, tree: m.SpecModel):
        self.t = tree
        self.out: list[Finding] = []

    def err(self, rule, span, msg):
        self.out.append(Finding(rule, "error", span, msg))

    def warn(self, rule, span, msg):
        self.out.append(Finding(rule, "warning", span, msg))

    def resolve(self, ref: m.Ref, scope, binders=None):
        try:
            return resolve_reference(ref.path, self.t, scope, binders)
        except ResolutionError:
            return None

    def expect_kind(self, ref, scope, kinds, rule, what, binders=None):
        r = self.resolve(ref, scope, binders)
        if r is None:
            self.err(rule, ref.span, f"{what}: unresolved reference '{ref.text}'")
        elif r.kind not in kinds:
            self.err(rule, ref.span, f"{what}: '{ref.text}' is a {r.kind}, expected {' or '.join(kinds)}")
        return r

    def run(self) -> CheckReport:
        self.r1()
        for scope in self.t.scopes:
            self.tier(scope)
        self.r8_groups()
        self.slo_cycles()
        findings = tuple(sorted(self.out, key=_finding_order))
        passed = not any(f.severity == "error" for f in findings)
        return CheckReport(findings, self.t if passed else None)

    # -- R1 --

    def r1(self):
        def uniq(items, what, scope):
            seen = set()
            for it in items:
                if it.name in seen:
                    self.err("R1", it.span, f"duplicate {what} '{it.name}' in {scope}")
                seen.add(it.name)

        uniq(self.t.aes, "AE", "AES")
        uniq(self.t.architecture, "group", "ASARCHITECTURE")
        for scope in self.t.scopes:
            tier = self.t.tier(scope)
            uniq(tier.slos, "SLO", scope)
            uniq(tier.events, "event", scope)
            uniq(tier.actions, "action", scope)
            uniq(tier.metrics, "metric", scope)
            uniq([f for p in tier.policies for f in p.fluents], "fluent", scope)
            kinds = set()
            for p in tier.policies:
                if p.kind in kinds:
                    self.err("R1", p.span, f"duplicate policy '{p.kind}' in {scope}")
                kinds.add(p.kind)
            proto = self.t.protocol(scope)
            uniq(proto.messages, "message", scope)
            uniq(proto.channels, "channel", scope)
            uniq(proto.functions, "function", scope)
            uniq(proto.managed_elements, "managed element", scope)
            for me in proto.managed_elements:
                uniq(me.interface_functions, "interface function", f"{scope}.{me.name}")
            for a in tier.actions:
                uniq(a.params, "parameter", f"{scope}.{a.name}")

    # -- per tier --

    def tier(self, scope):
        tier = self.t.tier(scope)
        for slo in tier.slos:
            self.slo_expr(slo.expr, scope, {})
        for p in tier.policies:
            self.policy(p, scope)
        for e in tier.events:
            self.event(e, scope)
        for mt in tier.metrics:
            self.metric(mt, scope)
        for a in tier.actions:
            self.action(a, scope)
        proto = self.t.protocol(scope)
        for me in proto.managed_elements:
            for fn in me.interface_functions:
                for ref in fn.onerr_triggers:
                    self.expect_kind(ref, scope, ("event",), "R2",
                                     f"interface function '{fn.name}' ONERR_TRIGGERS")
        for fn in proto.functions:
            names = {p.name for p in fn.params}
            self.stmts(fn.body, scope, names, {}, comm_fn=fn.name)

    def slo_expr(self, e, scope, binders):
        if isinstance(e, m.Ref):
            self.expect_kind(e, scope, ("metric", "slo"), "R4", "SLO expression", binders)
        elif isinstance(e, m.Not):
            self.slo_expr(e.operand, scope, binders)
        elif isinstance(e, m.BinOp):
            self.slo_expr(e.left, scope, binders)
            self.slo_expr(e.right, scope, binders)
        elif isinstance(e, m.ForeachExpr):
            members = self.collection(e.collection, scope, binders)
            for ae in members or ():
                self.slo_expr(e.body, scope, {**binders, e.binder: ae})
        elif isinstance(e, m.Call):
            self.err("R4", e.span, "SLO expression: calls are not allowed")

    def collection(self, ref, scope, binders):
        r = self.resolve(ref, scope, binders)
        if r is None or r.kind not in ("ae-collection", "group"):
            self.err("R8", ref.span, f"FOREACH over '{ref.text}': not AES or an architecture group")
            return None
        if r.kind == "ae-collection":
            return self.t.ae_names
        out = []
        for mem in r.entity.members:
            mr = self.resolve(mem, AS_SCOPE)
            if mr is not None and mr.kind == "ae":
                out.append(mr.name)
        return tuple(out)

    def policy(self, p: m.PolicyDef, scope):
        for f in p.fluents:
            for label, refs in (("initiated by", f.initiated_by), ("terminated by", f.terminated_by)):
                if not refs:
                    self.err("R2", f.span, f"fluent '{f.name}' has an empty {label} set")
                for ref in refs:
                    r = self.resolve(ref, scope)
                    if r is None:
                        self.err("R2", ref.span, f"fluent '{f.name}' {label} unknown event '{ref.text}'")
                    elif r.kind != "event":
                        self.err("R2", ref.span, f"fluent '{f.name}' {label} '{ref.text}', a {r.kind}")
            init = {self._key(r, scope) for r in f.initiated_by}
            for ref in f.terminated_by:
                k = self._key(ref, scope)
                if k is not None and k in init:
                    self.warn("R9", ref.span,
                              f"fluent '{f.name}' is both initiated and terminated by '{ref.text}'")
        local = {f.name for f in p.fluents}
        for mp in p.mappings:
            for ref in mp.conditions:
                name = ref.path[-1]
                r = self.resolve(ref, scope)
                if r is None or r.kind != "fluent" or name not in local:
                    self.err("R3", ref.span,
                             f"mapping condition '{ref.text}' is not a fluent of policy {p.kind}")
            for ref in mp.actions:
                self.expect_kind(ref, scope, ("action",), "R3", "mapping DO_ACTIONS")

    def _key(self, ref, scope):
        r = self.resolve(ref, scope)
        return r.key if r is not None and r.kind == "event" else None

    def event(self, e: m.EventDef, scope):
        if e.guards is not None:
            self.guard(e.guards, scope, f"event '{e.name}' guards")
        act = e.activation
        if act is None:
            return
        want = _ACTIVATION_KIND[act.kind]
        if act.kind != "OCCURRED" and len(act.targets) != 1:
            self.err("R5", act.span, f"event '{e.name}': {act.kind} takes exactly one target")
        for ref in act.targets:
            r = self.resolve(ref, scope)
            if r is None:
                self.err(_ACTIVATION_RULE[act.kind], ref.span,
                         f"event '{e.name}': {act.kind} target '{ref.text}' is unresolved")
            elif r.kind != want:
                self.err("R5", ref.span,
                         f"event '{e.name}': {act.kind} target '{ref.text}' is a {r.kind}, expected {want}")

    def guard(self, e, scope, what, binders=None):
        for ref in _refs_in(e):
            self.expect_kind(ref, scope, ("metric", "slo", "fluent"), "R4", what, binders)
        for c in _calls_in(e):
            self.err("R4", c.span, f"{what}: calls are not allowed in guards")

    def metric(self, mt: m.MetricDef, scope):
        if not m.in_domain(mt.value_type, mt.initial_value):
            self.err("R4", mt.span,
                     f"metric '{mt.name}': initial value outside the {mt.value_type} domain")
        tc = mt.threshold_class
        if tc.is_interval and tc.low > tc.high:
            self.err("R4", tc.span, f"metric '{mt.name}': empty threshold interval")
        for v in tc.values:
            if not m.in_domain(tc.type_name, v):
                self.err("R4", tc.span, f"metric '{mt.name}': threshold value {v!r} is not {tc.type_name}")
        if mt.kind == "RESOURCE":
            if mt.source is None:
                self.err("R6", mt.span, f"RESOURCE metric '{mt.name}' has no METRIC_SOURCE")
            else:
                r = self.resolve(mt.source, scope)
                if r is None or r.kind != "interface-function":
                    self.err("R6", mt.source.span,
                             f"metric '{mt.name}': source '{mt.source.text}' is not a managed-element interface function")
        elif mt.source is not None:
            self.err("R6", mt.source.span, f"PLAIN metric '{mt.name}' cannot have a METRIC_SOURCE")

    def action(self, a: m.ActionDef, scope):
        if a.guards is not None:
            self.guard(a.guards, scope, f"action '{a.name}' guards")
        for label, refs in (("TRIGGERS", a.triggers), ("ONERR_TRIGGERS", a.onerr_triggers)):
            for ref in refs:
                self.expect_kind(ref, scope, ("event",), "R2", f"action '{a.name}' {label}")
        if a.body is not None:
            self.stmts(a.body, scope, {p.name for p in a.params}, {}, action=a.name)

    # -- statements --

    def stmts(self, body, scope, locals_, binders, action=None, comm_fn=None):
        where = f"action '{action}'" if action else f"function '{comm_fn}'"
        for s in body:
            if isinstance(s, m.Assign):
                self.value_expr(s.value, scope, locals_, binders, where)
                locals_.add(s.name)
            elif isinstance(s, m.If):
                self.value_expr(s.cond, scope, locals_, binders, where)
                self.stmts(s.body, scope, locals_, binders, action, comm_fn)
            elif isinstance(s, m.ForeachStmt):
                for ae in self.collection(s.collection, scope, binders) or ():
                    self.stmts(s.body, scope, set(locals_), {**binders, s.binder: ae}, action, comm_fn)
            elif isinstance(s, m.CallStmt):
                self.value_expr(s.call, scope, locals_, binders, where)
            elif isinstance(s, m.SetMetric):
                self.expect_kind(s.target, scope, ("metric",), "R4", f"{where} SET", binders)
                r = self.resolve(s.target, scope, binders)
                if r is not None and r.kind == "metric":
                    if not m.in_domain(r.entity.value_type, s.value.value):
                        self.err("R4", s.span, f"{where}: SET value outside the {r.entity.value_type} domain")
                    if r.entity.kind == "RESOURCE":
                        self.err("R4", s.span, f"{where}: SET on RESOURCE metric '{s.target.text}'")
            elif isinstance(s, m.Trigger):
                self.expect_kind(s.event, scope, ("event",), "R2", f"{where} TRIGGER", binders)
            elif isinstance(s, (m.Receive, m.Send)):
                op = "RECEIVE" if isinstance(s, m.Receive) else "SEND"
                if comm_fn is None:
                    self.err("R7", s.span, f"{where}: {op} outside a communication function")
                    continue
                for ref, kind in ((s.message, "message"), (s.channel, "channel")):
                    r = self.resolve(ref, scope, binders)
                    if r is None or r.kind != kind:
                        self.err("R7", ref.span, f"{where}: {op} needs a {kind} of its protocol, got '{ref.text}'")
                    elif r.scope != scope:
                        self.err("R7", ref.span, f"{where}: {op} uses {kind} '{ref.text}' of another protocol")
            elif isinstance(s, m.Return):
                self.value_expr(s.value, scope, locals_, binders, where)

    def value_expr(self, e, scope, locals_, binders, where):
        if isinstance(e, m.Ref):
            if len(e.path) == 1 and (e.path[0] in locals_ or e.path[0] in binders):
                return
            r = self.resolve(e, scope, binders)
            if r is None:
                self.err("R4", e.span, f"{where}: unresolved symbol '{e.text}'")
            elif r.kind not in ("metric", "slo", "fluent", "message", "message-field", "ae"):
                self.err("R4", e.span, f"{where}: '{e.text}' is a {r.kind}, not a value")
        elif isinstance(e, m.Not):
            self.value_expr(e.operand, scope, locals_, binders, where)
        elif isinstance(e, m.BinOp):
            self.value_expr(e.left, scope, locals_, binders, where)
            self.value_expr(e.right, scope, locals_, binders, where)
        elif isinstance(e, m.ForeachExpr):
            for ae in self.collection(e.collection, scope, binders) or ():
                self.value_expr(e.body, scope, locals_, {**binders, e.binder: ae}, where)
        elif isinstance(e, m.Call):
            r = self.expect_kind(e.target, scope, ("action", "interface-function"), "R3",
                                 f"{where} CALL", binders)
            if r is not None and r.kind in ("action", "interface-function"):
                want = len(r.entity.params)
                if len(e.args) != want:
                    self.err("R3", e.span,
                             f"{where}: '{e.target.text}' takes {want} argument(s), got {len(e.args)}")
            for arg in e.args:
                self.value_expr(arg, scope, locals_, binders, where)

    # -- R8 and SLO cycles --

    def r8_groups(self):
        for g in self.t.architecture:
            for mem in g.members:
                r = self.resolve(mem, AS_SCOPE)
                if r is None or r.kind != "ae":
                    self.err("R8", mem.span, f"group '{g.name}': member '{mem.text}' is not a declared AE")

    def slo_cycles(self):
        edges = defaultdict(set)
        spans = {}
        for scope in self.t.scopes:
            for slo in self.t.tier(scope).slos:
                k = m.key(scope, slo.name)
                spans[k] = slo.span
                for ref, binders in _slo_refs(slo.expr, self, scope, {}):
                    r = self.resolve(ref, scope, binders)
                    if r is not None and r.kind == "slo":
                        edges[k].add(r.key)
        state = {}

        def visit(k, stack):
            state[k] = 1
            for nxt in sorted(edges[k]):
                if state.get(nxt) == 1:
                    cyc = stack[stack.index(nxt):] + [nxt]
                    self.err("R4", spans.get(nxt), "cyclic SLO reference " + " -> ".join(cyc))
                elif nxt not in state:
                    visit(nxt, stack + [nxt])
            state[k] = 2

        for k in sorted(spans):
            if k not in state:
                visit(k, [k])


def _slo_refs(e, chk, scope, binders):
    if isinstance(e, m.Ref):
        yield e, binders
    elif isinstance(e, m.Not):
        yield from _slo_refs(e.operand, chk, scope, binders)
    elif isinstance(e, m.BinOp):
        yield from _slo_refs(e.left, chk, scope, binders)
        yield from _slo_refs(e.right, chk, scope, binders)
    elif isinstance(e, m.ForeachExpr):
        r = chk.resolve(e.collection, scope, binders)
        if r is not None and r.kind in ("ae-collection", "group"):
            try:
                members = m.collection_members(chk.t, e.collection, scope, binders)
            except ResolutionError:
                members = ()  # bad member, reported under R8
            for ae in members:
                yield from _slo_refs(e.body, chk, scope, {**binders, e.binder: ae})


def _refs_in(e) -> Iterable[m.Ref]:
    if isinstance(e, m.Ref):
        yield e
    elif isinstance(e, m.Not):
        yield from _refs_in(e.operand)
    elif isinstance(e, m.BinOp):
        yield from _refs_in(e.left)
        yield from _refs_in(e.right)


def _calls_in(e):
    if isinstance(e, (m.Call, m.ForeachExpr)):
        yield e
    elif isinstance(e, m.Not):
        yield from _calls_in(e.operand)
    elif isinstance(e, m.BinOp):
        yield from _calls_in(e.left)
        yield from _calls_in(e.right)


def _finding_order(f: Finding):
    s = f.span
    return (s.file, s.line, s.column, f.rule) if s else ("", 0, 0, f.rule)


def check(tree: m.SpecModel) -> CheckReport:
    """Run R1-R9.  Pure; ``report.model`` is the tree itself when no error was found."""
    return _Checker(tree).run()


# -- reachability -------------------------------------------------------------

@dataclass
class ReferenceGraph:
    """Who can fire whom.  Keys are qualified names prefixed by kind
    (``event:AS.x``, ``fluent:AE.y``, ``action:AS.z``, ``ifn:AE.STAGE_ME.f``)."""
    sources: set[str] = field(default_factory=set)
    edges: dict[str, set[str]] = field(default_factory=lambda: defaultdict(set))
    events: list[str] = field(default_factory=list)
    fluents: list[str] = field(default_factory=list)
    actions: list[str] = field(default_factory=list)
    spans: dict[str, Optional[Span]] = field(default_factory=dict)
    external: set[str] = field(default_factory=set)  # events only the host can fire
    mapped: set[str] = field(default_factory=set)  # fluents used by some mapping
    invoked: set[str] = field(default_factory=set)  # actions mapped or called

    def add(self, a, b):
        self.edges[a].add(b)


def reference_graph(model: m.SpecModel) -> ReferenceGraph:
    g = ReferenceGraph()

    def res(ref, scope, binders=None):
        try:
            return resolve_reference(ref.path, model, scope, binders)
        except ResolutionError:
            return None

    def body_edges(src, body, scope, binders):
        for s in body:
            if isinstance(s, m.If):
                expr_edges(src, s.cond, scope, binders)
                body_edges(src, s.body, scope, binders)
            elif isinstance(s, m.ForeachStmt):
                for ae in m.collection_members(model, s.collection, scope, binders):
                    body_edges(src, s.body, scope, {**binders, s.binder: ae})
            elif isinstance(s, m.Trigger):
                r = res(s.event, scope, binders)
                if r is not None:
                    g.add(src, "event:" + r.key)
            elif isinstance(s, m.CallStmt):
                expr_edges(src, s.call, scope, binders)
            elif isinstance(s, (m.Assign, m.Return)):
                expr_edges(src, s.value, scope, binders)

    def expr_edges(src, e, scope, binders):
        if isinstance(e, m.Call):
            r = res(e.target, scope, binders)
            if r is not None and r.kind == "action":
                g.add(src, "action:" + r.key)
                g.invoked.add("action:" + r.key)
            elif r is not None and r.kind == "interface-function":
                g.add(src, f"ifn:{r.scope}.{r.member}.{r.name}")
            for a in e.args:
                expr_edges(src, a, scope, binders)
        elif isinstance(e, m.Not):
            expr_edges(src, e.operand, scope, binders)
        elif isinstance(e, m.BinOp):
            expr_edges(src, e.left, scope, binders)
            expr_edges(src, e.right, scope, binders)
        elif isinstance(e, m.ForeachExpr):
            for ae in m.collection_members(model, e.collection, scope, binders):
                expr_edges(src, e.body, scope, {**binders, e.binder: ae})

    for scope in model.scopes:
        tier = model.tier(scope)
        for e in tier.events:
            k = "event:" + m.key(scope, e.name)
            g.events.append(k)
            g.spans[k] = e.span
            act = e.activation
            if act is None:
                continue
            if act.kind == "OCCURRED":
                for ref in act.targets:
                    r = res(ref, scope)
                    if r is not None:
                        g.add("event:" + r.key, k)
            else:
                g.sources.add(k)
        for p in tier.policies:
            for f in p.fluents:
                k = "fluent:" + m.key(scope, f.name)
                g.fluents.append(k)
                g.spans[k] = f.span
                for ref in f.initiated_by:
                    r = res(ref, scope)
                    if r is not None:
                        g.add("event:" + r.key, k)
            for mp in p.mappings:
                for c in mp.conditions:
                    rc = res(c, scope)
                    if rc is None:
                        continue
                    g.mapped.add("fluent:" + rc.key)
                    for a in mp.actions:
                        ra = res(a, scope)
                        if ra is not None:
                            g.add("fluent:" + rc.key, "action:" + ra.key)
                            g.invoked.add("action:" + ra.key)
        for a in tier.actions:
            k = "action:" + m.key(scope, a.name)
            g.actions.append(k)
            g.spans[k] = a.span
            for ref in a.triggers + a.onerr_triggers:
                r = res(ref, scope)
                if r is not None:
                    g.add(k, "event:" + r.key)
            if a.body is not None:
                body_edges(k, a.body, scope, {})
        for me in model.protocol(scope).managed_elements:
            for fn in me.interface_functions:
                k = f"ifn:{scope}.{me.name}.{fn.name}"
                for ref in fn.onerr_triggers:
                    r = res(ref, scope)
                    if r is not None:
                        g.add(k, "event:" + r.key)
    fired = {b for bs in g.edges.values() for b in bs}
    for k in g.events:
        if k not in g.sources and k not in fired:
            g.external.add(k)
    return g


def reachable(g: ReferenceGraph) -> set[str]:
    seen = g.sources | g.external
    stack = sorted(seen)
    while stack:
        for nxt in g.edges.get(stack.pop(), ()):
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def reachability_report(model: m.SpecModel) -> list[Finding]:
    """Warnings for events nothing can fire, fluents no mapping uses, and
    actions that are neither mapped nor called.

    Activation sources are events with a DEGRADED, NORMALIZED, SENT or
    CHANGED activation; firing propagates along OCCURRED, fluent initiation,
    mapping, CALL, TRIGGER and ONERR edges.  An event with no activation that
    nothing fires can only come from the host; it is reported once and then
    treated as a source.
    """
    g = reference_graph(model)
    live = reachable(g)
    out = []
    for k in g.events:
        if k in g.external:
            out.append(Finding("REACH", "warning", g.spans[k],
                               f"event '{k[6:]}' has no activation; only the host can fire it"))
        elif k not in live:
            out.append(Finding("REACH", "warning", g.spans[k], f"event '{k[6:]}' can never fire"))
    for k in g.fluents:
        if k not in g.mapped:
            out.append(Finding("REACH", "warning", g.spans[k], f"fluent '{k[7:]}' is used by no mapping"))
    for k in g.actions:
        if k not in g.invoked:
            out.append(Finding("REACH", "warning", g.spans[k], f"action '{k[7:]}' is never mapped or called"))
    return out
