"""Typed object graph for parsed policy models, plus the pure evaluation
semantics of metrics, SLOs and reference paths.

Every node is a frozen dataclass.  Source spans are carried on the nodes but
excluded from equality, so two trees compare equal iff they are structurally
identical.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Union

POLICY_KINDS = ("SELF_HEALING", "SELF_PROTECTING", "SELF_OPTIMIZING", "SELF_CONFIGURING")
ACTIVATION_KINDS = ("DEGRADED", "NORMALIZED", "OCCURRED", "SENT", "CHANGED")
AS_SCOPE = "AS"


@dataclass(frozen=True)
class Span:
    file: str
    line: int
    column: int
    length: int

    def __str__(self):
        return f"{self.file}:{self.line}:{self.column}"


def _span():
    return field(default=None, compare=False, repr=False)


# -- expressions -------------------------------------------------------------

@dataclass(frozen=True)
class Ref:
    """A dotted path (``EVENTS.x``, ``AES.A.EVENTS.y``) or a bare name."""
    path: tuple[str, ...]
    span: Optional[Span] = _span()

    @property
    def text(self) -> str:
        return ".".join(self.path)

    def __str__(self):
        return self.text


@dataclass(frozen=True)
class Literal:
    value: Union[bool, int]
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class Not:
    operand: "Expr"
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class BinOp:
    op: str  # "AND" | "OR"
    left: "Expr"
    right: "Expr"
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class Call:
    target: Ref
    args: tuple["Expr", ...] = ()
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class ForeachExpr:
    """Conjunction of ``body`` over every AE of ``collection``."""
    binder: str
    collection: Ref
    body: "Expr"
    span: Optional[Span] = _span()


Expr = Union[Ref, Literal, Not, BinOp, Call, ForeachExpr]


# -- statements --------------------------------------------------------------

@dataclass(frozen=True)
class Assign:
    name: str
    value: Expr
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class If:
    cond: Expr
    body: tuple["Stmt", ...]
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class ForeachStmt:
    binder: str
    collection: Ref
    body: tuple["Stmt", ...]
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class CallStmt:
    call: Call
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class SetMetric:
    target: Ref  # metric path, without the trailing ``.VALUE``
    value: Literal
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class Trigger:
    event: Ref
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class Receive:
    """``MESSAGES.m << CHANNELS.c``"""
    message: Ref
    channel: Ref
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class Send:
    """``MESSAGES.m >> CHANNELS.c``"""
    message: Ref
    channel: Ref
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class Return:
    value: Expr
    span: Optional[Span] = _span()


Stmt = Union[Assign, If, ForeachStmt, CallStmt, SetMetric, Trigger, Receive, Send, Return]


# -- declarations ------------------------------------------------------------

@dataclass(frozen=True)
class ThresholdClass:
    """Finite set (``values``) or closed interval (``low``..``high``)."""
    type_name: str  # "Integer" | "Boolean"
    values: tuple[Union[int, bool], ...] = ()
    low: Optional[int] = None
    high: Optional[int] = None
    span: Optional[Span] = _span()

    @property
    def is_interval(self) -> bool:
        return self.low is not None

    def __contains__(self, v) -> bool:
        if self.is_interval:
            return self.low <= v <= self.high
        return any(v == x and type(v) is type(x) for x in self.values)


@dataclass(frozen=True)
class MetricDef:
    name: str
    kind: str  # "RESOURCE" | "PLAIN"
    initial_value: Union[int, bool]
    threshold_class: ThresholdClass
    source: Optional[Ref] = None
    span: Optional[Span] = _span()

    @property
    def value_type(self) -> str:
        return self.threshold_class.type_name


@dataclass(frozen=True)
class SloDef:
    name: str
    expr: Expr
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class Activation:
    kind: str
    targets: tuple[Ref, ...]
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class EventDef:
    name: str
    guards: Optional[Expr] = None
    activation: Optional[Activation] = None
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class FluentDef:
    name: str
    initiated_by: tuple[Ref, ...]
    terminated_by: tuple[Ref, ...]
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class MappingDef:
    conditions: tuple[Ref, ...]
    actions: tuple[Ref, ...]
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class PolicyDef:
    kind: str
    fluents: tuple[FluentDef, ...] = ()
    mappings: tuple[MappingDef, ...] = ()
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class Param:
    type_name: str
    name: str
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class ActionDef:
    name: str
    impl: bool = False
    guards: Optional[Expr] = None
    params: tuple[Param, ...] = ()
    returns: Optional[str] = None
    body: Optional[tuple[Stmt, ...]] = None  # None: no DOES clause
    triggers: tuple[Ref, ...] = ()
    onerr_triggers: tuple[Ref, ...] = ()
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class InterfaceFunctionDef:
    name: str
    params: tuple[Param, ...] = ()
    returns: Optional[str] = None
    onerr_triggers: tuple[Ref, ...] = ()
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class ManagedElementDef:
    name: str
    interface_functions: tuple[InterfaceFunctionDef, ...] = ()
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class MessageDef:
    name: str
    params: tuple[Param, ...] = ()
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class ChannelDef:
    name: str
    access: str = "SEQUENTIAL"
    direction: str = "BIDIRECTIONAL"
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class FunctionDef:
    """Communication function of an interaction protocol."""
    name: str
    params: tuple[Param, ...] = ()
    body: tuple[Stmt, ...] = ()
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class InteractionProtocol:
    messages: tuple[MessageDef, ...] = ()
    channels: tuple[ChannelDef, ...] = ()
    functions: tuple[FunctionDef, ...] = ()
    managed_elements: tuple[ManagedElementDef, ...] = ()
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class OpaqueBlock:
    """Recovery protocols, behavior models, outcomes: kept verbatim, no semantics."""
    keyword: str
    tokens: tuple[str, ...] = ()
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class ArchGroup:
    name: str
    members: tuple[Ref, ...] = ()
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class ASTier:
    name: str
    slos: tuple[SloDef, ...] = ()
    policies: tuple[PolicyDef, ...] = ()
    actions: tuple[ActionDef, ...] = ()
    events: tuple[EventDef, ...] = ()
    metrics: tuple[MetricDef, ...] = ()
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class AESpec:
    name: str
    slos: tuple[SloDef, ...] = ()
    policies: tuple[PolicyDef, ...] = ()
    friends: tuple[Ref, ...] = ()
    aeip: InteractionProtocol = InteractionProtocol()
    opaque: tuple[OpaqueBlock, ...] = ()
    actions: tuple[ActionDef, ...] = ()
    events: tuple[EventDef, ...] = ()
    metrics: tuple[MetricDef, ...] = ()
    span: Optional[Span] = _span()

    @property
    def managed_elements(self):
        return self.aeip.managed_elements


@dataclass(frozen=True)
class SpecModel:
    as_tier: ASTier
    asip: InteractionProtocol = InteractionProtocol()
    aes: tuple[AESpec, ...] = ()  # declaration order
    architecture: tuple[ArchGroup, ...] = ()

    def ae(self, name: str) -> Optional[AESpec]:
        for ae in self.aes:
            if ae.name == name:
                return ae
        return None

    @property
    def ae_names(self) -> tuple[str, ...]:
        return tuple(ae.name for ae in self.aes)

    @property
    def scopes(self) -> tuple[str, ...]:
        return (AS_SCOPE,) + self.ae_names

    def tier(self, scope: str):
        """AS tier or AE spec for ``scope``; both expose slos/policies/actions/events/metrics."""
        if scope == AS_SCOPE:
            return self.as_tier
        ae = self.ae(scope)
        if ae is None:
            raise KeyError(scope)
        return ae

    def protocol(self, scope: str) -> InteractionProtocol:
        return self.asip if scope == AS_SCOPE else self.tier(scope).aeip

    def group(self, name: str) -> Optional[ArchGroup]:
        for g in self.architecture:
            if g.name == name:
                return g
        return None


def key(scope: str, name: str) -> str:
    """Qualified runtime name of an entity: ``AS.performance``, ``STAGE_AE.mustFixNode``."""
    return f"{scope}.{name}"


# -- evaluation --------------------------------------------------------------

class EvaluationError(Exception):
    pass


class ResolutionError(Exception):
    def __init__(self, path: str, prefix: str, reason: str = "unknown segment"):
        self.path = path
        self.prefix = prefix
        where = f" after '{prefix}'" if prefix else ""
        super().__init__(f"cannot resolve '{path}': {reason}{where}")


class Satisfaction(enum.Enum):
    SATISFIED = "satisfied"
    DEGRADED = "degraded"

    def __bool__(self):
        return self is Satisfaction.SATISFIED

    @classmethod
    def of(cls, ok: bool) -> "Satisfaction":
        return cls.SATISFIED if ok else cls.DEGRADED


def in_domain(value_type: str, v) -> bool:
    if value_type == "Boolean":
        return isinstance(v, bool)
    if value_type == "Integer":
        return isinstance(v, int) and not isinstance(v, bool)
    return False


def metric_validity(m: MetricDef, v) -> bool:
    """True iff ``v`` belongs to the metric's threshold class."""
    if not in_domain(m.value_type, v):
        raise EvaluationError(f"metric {m.name}: value {v!r} outside {m.value_type} domain")
    return v in m.threshold_class


@dataclass(frozen=True)
class Resolved:
    kind: str  # event, metric, action, slo, fluent, message, message-field, channel,
    #            function, managed-element, interface-function, ae, ae-collection, group
    scope: str
    name: str
    entity: Any = None
    member: Optional[str] = None  # message field or managed element name

    @property
    def key(self) -> str:
        return key(self.scope, self.name)


_TIER_SECTIONS = {"EVENTS": ("events", "event"), "METRICS": ("metrics", "metric"),
                  "ACTIONS": ("actions", "action")}


def _find(items, name):
    for it in items:
        if it.name == name:
            return it
    return None


def find_fluent(model: SpecModel, scope: str, name: str, policy_kind: Optional[str] = None):
    for p in model.tier(scope).policies:
        if policy_kind is not None and p.kind != policy_kind:
            continue
        f = _find(p.fluents, name)
        if f is not None:
            return p, f
    return None


def resolve_reference(path, model: SpecModel, scope: str = AS_SCOPE,
                      binders: Optional[Mapping[str, str]] = None) -> Resolved:
    """Resolve a dotted path relative to ``scope`` (``"AS"`` or an AE name).

    ``binders`` maps FOREACH binder names to the AE they are bound to, so
    ``member.AESLO.performance`` resolves inside that AE.
    """
    segs = tuple(path.split(".")) if isinstance(path, str) else tuple(path)
    text = ".".join(segs)
    binders = binders or {}
    pos = 0

    def fail(reason="unknown segment"):
        raise ResolutionError(text, ".".join(segs[:pos]), reason)

    def take():
        nonlocal pos
        if pos >= len(segs):
            fail("path ends early")
        s = segs[pos]
        pos += 1
        return s

    def done(r: Resolved) -> Resolved:
        if pos != len(segs):
            fail("trailing segments")
        return r

    if not segs or not all(segs):
        raise ResolutionError(text, "", "empty path")

    head = segs[0]
    if head in binders:
        pos = 1
        scope = binders[head]
        if pos == len(segs):
            return Resolved("ae", scope, scope, model.ae(scope))
    elif head == "AS":
        pos = 1
        scope = AS_SCOPE
    elif head == "AES":
        pos = 1
        if pos == len(segs):
            return Resolved("ae-collection", AS_SCOPE, "AES", model.aes)
        name = take()
        ae = model.ae(name)
        if ae is None:
            pos -= 1
            fail("unknown AE")
        if pos == len(segs):
            return Resolved("ae", name, name, ae)
        scope = name

    if scope != AS_SCOPE and model.ae(scope) is None:
        fail("unknown AE")
    if pos >= len(segs):
        fail("path ends early")

    section = take()
    tier = model.tier(scope)
    if section in _TIER_SECTIONS:
        attr, kind = _TIER_SECTIONS[section]
        name = take()
        ent = _find(getattr(tier, attr), name)
        if ent is None:
            pos -= 1
            fail(f"unknown {kind}")
        return done(Resolved(kind, scope, name, ent))
    if section in ("ASSLO", "AESLO"):
        slo_scope = AS_SCOPE if section == "ASSLO" else scope
        if section == "AESLO" and scope == AS_SCOPE:
            pos -= 1
            fail("AESLO outside an AE")
        name = take()
        ent = _find(model.tier(slo_scope).slos, name)
        if ent is None:
            pos -= 1
            fail("unknown SLO")
        return done(Resolved("slo", slo_scope, name, ent))
    if section in ("ASSELF_MANAGEMENT", "AESELF_MANAGEMENT"):
        pscope = AS_SCOPE if section == "ASSELF_MANAGEMENT" else scope
        kind = take()
        if not any(p.kind == kind for p in model.tier(pscope).policies):
            pos -= 1
            fail("unknown policy")
        name = take()
        found = find_fluent(model, pscope, name, kind)
        if found is None:
            pos -= 1
            fail("unknown fluent")
        return done(Resolved("fluent", pscope, name, found[1]))
    if section == "ASARCHITECTURE":
        name = take()
        g = model.group(name)
        if g is None:
            pos -= 1
            fail("unknown group")
        return done(Resolved("group", AS_SCOPE, name, g))
    if section in ("ASIP", "AEIP"):
        if section == "ASIP":
            scope = AS_SCOPE
        elif scope == AS_SCOPE:
            pos -= 1
            fail("AEIP outside an AE")
        section = take()
    elif section not in ("MESSAGES", "CHANNELS", "FUNCTIONS", "MANAGED_ELEMENTS"):
        if pos == 1 and len(segs) == 1:
            found = find_fluent(model, scope, section)
            if found is not None:
                return Resolved("fluent", scope, section, found[1])
        pos -= 1
        fail()

    proto = model.protocol(scope)
    if section == "MESSAGES":
        name = take()
        msg = _find(proto.messages, name)
        if msg is None:
            pos -= 1
            fail("unknown message")
        if pos == len(segs):
            return Resolved("message", scope, name, msg)
        fld = take()
        p = _find(msg.params, fld)
        if p is None:
            pos -= 1
            fail("unknown message field")
        return done(Resolved("message-field", scope, name, p, member=fld))
    if section == "CHANNELS":
        name = take()
        ch = _find(proto.channels, name)
        if ch is None:
            pos -= 1
            fail("unknown channel")
        return done(Resolved("channel", scope, name, ch))
    if section == "FUNCTIONS":
        name = take()
        fn = _find(proto.functions, name)
        if fn is None:
            pos -= 1
            fail("unknown function")
        return done(Resolved("function", scope, name, fn))
    if section == "MANAGED_ELEMENTS":
        me_name = take()
        me = _find(proto.managed_elements, me_name)
        if me is None:
            pos -= 1
            fail("unknown managed element")
        if pos == len(segs):
            return Resolved("managed-element", scope, me_name, me)
        name = take()
        fn = _find(me.interface_functions, name)
        if fn is None:
            pos -= 1
            fail("unknown interface function")
        return done(Resolved("interface-function", scope, name, fn, member=me_name))
    pos -= 1
    fail()


def collection_members(model: SpecModel, ref: Ref, scope: str = AS_SCOPE,
                       binders: Optional[Mapping[str, str]] = None) -> tuple[str, ...]:
    """AE names a FOREACH iterates: ``AES`` in declaration order, a group in member order."""
    r = resolve_reference(ref.path, model, scope, binders)
    if r.kind == "ae-collection":
        return model.ae_names
    if r.kind == "group":
        out = []
        for m in r.entity.members:
            out.append(resolve_reference(m.path, model, AS_SCOPE).name)
        return tuple(out)
    raise ResolutionError(ref.text, ref.text, "not an AE collection")


def evaluate_slo(slo: SloDef, model: SpecModel, values: Mapping[str, Any],
                 scope: str = AS_SCOPE) -> Satisfaction:
    """Satisfaction of ``slo`` given metric values keyed by qualified metric name.

    Metric references evaluate to their validity, SLO references recurse.
    Pure: neither ``values`` nor the model is touched.
    """
    return Satisfaction.of(_eval_slo_expr(slo.expr, model, values, scope, {}, (key(scope, slo.name),)))


def _eval_slo_expr(e, model, values, scope, binders, stack) -> bool:
    if isinstance(e, Literal):
        return bool(e.value)
    if isinstance(e, Not):
        return not _eval_slo_expr(e.operand, model, values, scope, binders, stack)
    if isinstance(e, BinOp):
        left = _eval_slo_expr(e.left, model, values, scope, binders, stack)
        if e.op == "AND":
            return left and _eval_slo_expr(e.right, model, values, scope, binders, stack)
        return left or _eval_slo_expr(e.right, model, values, scope, binders, stack)
    if isinstance(e, ForeachExpr):
        for ae in collection_members(model, e.collection, scope, binders):
            inner = {**binders, e.binder: ae}
            if not _eval_slo_expr(e.body, model, values, scope, inner, stack):
                return False
        return True
    if isinstance(e, Ref):
        try:
            r = resolve_reference(e.path, model, scope, binders)
        except ResolutionError as exc:
            raise EvaluationError(f"unresolved symbol '{e.text}'") from exc
        if r.kind == "metric":
            if r.key not in values:
                raise EvaluationError(f"no value for metric '{r.key}'")
            return metric_validity(r.entity, values[r.key])
        if r.kind == "slo":
            if r.key in stack:
                raise EvaluationError(f"cyclic SLO reference '{r.key}'")
            return _eval_slo_expr(r.entity.expr, model, values, r.scope, {}, stack + (r.key,))
        raise EvaluationError(f"'{e.text}' is a {r.kind}, not a metric or SLO")
    raise EvaluationError(f"unsupported SLO expression {type(e).__name__}")
