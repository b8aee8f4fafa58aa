"""Recursive-descent parser and canonical printer for the policy language.

    spec        := "AS" IDENT "{" as_section* "}" asip? aes?
    as_section  := slos | self_mgmt | arch | actions | events | metrics
    aes         := "AES" "{" ("AE" IDENT "{" ae_section* "}")* "}"

The remaining productions mirror the section layouts of the published
listings; see ``_Parser`` below.  Parsing never raises on bad input: every
problem becomes a :class:`ParseDiagnostic`, and the parser resynchronises on
the next section keyword so that several errors can be reported at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import model as m
from .lexer import KEYWORDS, LexError, Token, tokenize
from .model import Span

SourceSpan = Span

AS_SECTIONS = ("ASSLO", "ASSELF_MANAGEMENT", "ASARCHITECTURE", "ACTIONS", "EVENTS", "METRICS")
AE_SECTIONS = ("AESLO", "AESELF_MANAGEMENT", "FRIENDS", "AEIP", "RECOVERY_PROTOCOL",
               "BEHAVIOR_MODELS", "OUTCOMES", "ACTIONS", "EVENTS", "METRICS")
OPAQUE_SECTIONS = ("RECOVERY_PROTOCOL", "BEHAVIOR_MODELS", "OUTCOMES")
PROTOCOL_SECTIONS = ("MESSAGES", "CHANNELS", "FUNCTIONS", "MANAGED_ELEMENTS")
SYNC_KEYWORDS = frozenset(AS_SECTIONS + AE_SECTIONS + ("ASIP", "AES", "AE"))
MAX_DEPTH = 200


@dataclass(frozen=True)
class ParseDiagnostic:
    severity: str  # "error" | "warning"
    span: Span
    message: str
    expected: tuple[str, ...] = ()

    def format(self, color: bool = False) -> str:
        sev = self.severity
        if color:
            sev = ("\x1b[31m" if sev == "error" else "\x1b[33m") + sev + "\x1b[0m"
        return f"{self.span.file}:{self.span.line}:{self.span.column}: {sev}: {self.message}"

    def __str__(self):
        return self.format()


class _Abort(Exception):
    pass


class _Parser:
    def __init__(self, tokens: list[Token], file: str, diags: list):
        last = tokens[-1].span if tokens else Span(file, 1, 1, 0)
        eof_span = Span(file, last.line, last.column + last.length, 0)
        self.toks = tokens + [Token("EOF", None, eof_span)]
        self.i = 0
        self.file = file
        self.diags = diags
        self.depth = 0
        self.recovered = False

    # -- token plumbing --

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, k=1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def advance(self) -> Token:
        t = self.toks[self.i]
        if t.kind != "EOF":
            self.i += 1
        return t

    def at(self, *kinds) -> bool:
        return self.tok.kind in kinds

    def at_kw(self, *words) -> bool:
        return self.tok.is_kw(*words)

    def fail(self, expected=(), message=None, tok=None):
        tok = tok or self.tok
        if message is None:
            exp = ", ".join(expected)
            message = f"expected {exp}, found {describe(tok)}"
        raise _Abort(ParseDiagnostic("error", tok.span, message, tuple(expected)))

    def expect(self, kind, label=None) -> Token:
        if self.tok.kind != kind:
            self.fail((label or _KIND_LABEL.get(kind, kind),))
        return self.advance()

    def expect_kw(self, word) -> Token:
        if not self.at_kw(word):
            self.fail((word,))
        return self.advance()

    def ident(self) -> Token:
        return self.expect("IDENT", "identifier")

    def report(self, diag: ParseDiagnostic):
        self.diags.append(diag)

    def sync(self):
        self.recovered = True
        self.advance()
        while not self.at("EOF") and not (self.tok.kind == "KW" and self.tok.value in SYNC_KEYWORDS):
            self.advance()

    def enter(self):
        self.depth += 1
        if self.depth > MAX_DEPTH:
            self.fail(message="nesting too deep")

    def leave(self):
        self.depth -= 1

    def close_container(self, what):
        """Consume the closing brace of a container; lenient once recovery kicked in."""
        if self.at("RBRACE"):
            self.advance()
        elif not self.recovered:
            self.report(ParseDiagnostic("error", self.tok.span,
                                        f"unterminated {what}: expected '}}', found {describe(self.tok)}",
                                        ("'}'",)))
            self.recovered = True

    # -- top level --

    def parse(self) -> Optional[m.SpecModel]:
        as_tier = None
        arch: tuple = ()
        asip = None
        aes = None
        try:
            if not self.at_kw("AS"):
                self.fail(("AS",))
            as_tier, arch = self.as_tier()
        except _Abort as exc:
            self.report(exc.args[0])
            self.sync()
        while not self.at("EOF"):
            t = self.tok
            try:
                if t.is_kw("ASIP"):
                    if asip is not None:
                        self.report(ParseDiagnostic("error", t.span, "duplicate section ASIP"))
                    asip = self.protocol("ASIP")
                elif t.is_kw("AES"):
                    if aes is not None:
                        self.report(ParseDiagnostic("error", t.span, "duplicate section AES"))
                    aes = self.aes()
                else:
                    self.fail(("ASIP", "AES", "end-of-file"))
            except _Abort as exc:
                self.report(exc.args[0])
                self.sync()
        if as_tier is None:
            return None
        return m.SpecModel(as_tier=as_tier, asip=asip or m.InteractionProtocol(),
                           aes=aes or (), architecture=arch)

    def sections(self, allowed, what, handle):
        """Loop over ``KW { ... }`` sections until the closing brace."""
        seen = set()
        while True:
            t = self.tok
            if t.kind == "RBRACE":
                self.advance()
                return
            if t.kind == "EOF" or t.is_kw("ASIP", "AES", "AE"):
                self.close_container(what)
                return
            if t.kind == "KW" and t.value in allowed:
                if t.value in seen:
                    self.report(ParseDiagnostic("error", t.span, f"duplicate section {t.value}"))
                seen.add(t.value)
                try:
                    handle(t.value)
                except _Abort as exc:
                    self.report(exc.args[0])
                    self.sync()
                continue
            self.report(ParseDiagnostic("error", t.span,
                                        f"expected a section keyword of {what}, found {describe(t)}",
                                        tuple(allowed) + ("'}'",)))
            self.sync()

    def as_tier(self):
        self.expect_kw("AS")
        name_tok = self.ident()
        self.expect("LBRACE", "'{'")
        parts = {}

        def handle(kw):
            if kw == "ASSLO":
                parts["slos"] = self.slos("ASSLO")
            elif kw == "ASSELF_MANAGEMENT":
                parts["policies"] = self.self_mgmt("ASSELF_MANAGEMENT")
            elif kw == "ASARCHITECTURE":
                parts["arch"] = self.arch()
            elif kw == "ACTIONS":
                parts["actions"] = self.actions()
            elif kw == "EVENTS":
                parts["events"] = self.events()
            elif kw == "METRICS":
                parts["metrics"] = self.metrics()

        self.sections(AS_SECTIONS, "AS", handle)
        tier = m.ASTier(name=name_tok.value, slos=parts.get("slos", ()),
                        policies=parts.get("policies", ()), actions=parts.get("actions", ()),
                        events=parts.get("events", ()), metrics=parts.get("metrics", ()),
                        span=name_tok.span)
        return tier, parts.get("arch", ())

    def aes(self):
        self.expect_kw("AES")
        self.expect("LBRACE", "'{'")
        out = []
        while True:
            t = self.tok
            if t.kind == "RBRACE":
                self.advance()
                break
            if t.is_kw("AE"):
                try:
                    out.append(self.ae())
                except _Abort as exc:
                    self.report(exc.args[0])
                    self.sync()
                continue
            if t.kind == "EOF" or t.is_kw("ASIP", "AES"):
                self.close_container("AES")
                break
            self.report(ParseDiagnostic("error", t.span, f"expected AE or '}}', found {describe(t)}",
                                        ("AE", "'}'")))
            self.sync()
        return tuple(out)

    def ae(self):
        self.expect_kw("AE")
        name_tok = self.ident()
        self.expect("LBRACE", "'{'")
        parts = {}
        opaque = []

        def handle(kw):
            if kw == "AESLO":
                parts["slos"] = self.slos("AESLO")
            elif kw == "AESELF_MANAGEMENT":
                parts["policies"] = self.self_mgmt("AESELF_MANAGEMENT")
            elif kw == "FRIENDS":
                self.advance()
                parts["friends"] = self.refset()
            elif kw == "AEIP":
                parts["aeip"] = self.protocol("AEIP")
            elif kw in OPAQUE_SECTIONS:
                opaque.append(self.opaque())
            elif kw == "ACTIONS":
                parts["actions"] = self.actions()
            elif kw == "EVENTS":
                parts["events"] = self.events()
            elif kw == "METRICS":
                parts["metrics"] = self.metrics()

        self.sections(AE_SECTIONS, f"AE {name_tok.value}", handle)
        return m.AESpec(name=name_tok.value, slos=parts.get("slos", ()),
                        policies=parts.get("policies", ()), friends=parts.get("friends", ()),
                        aeip=parts.get("aeip", m.InteractionProtocol()), opaque=tuple(opaque),
                        actions=parts.get("actions", ()), events=parts.get("events", ()),
                        metrics=parts.get("metrics", ()), span=name_tok.span)

    # -- generic pieces --

    def items(self, item_kw, parse_item):
        """``{ item_kw ... item_kw ... }``"""
        self.expect("LBRACE", "'{'")
        out = []
        while not self.at("RBRACE"):
            if not self.at_kw(item_kw):
                self.fail((item_kw, "'}'"))
            out.append(parse_item())
        self.advance()
        return tuple(out)

    def ref(self) -> m.Ref:
        t = self.tok
        if t.kind == "PATH":
            self.advance()
            return m.Ref(t.value, span=t.span)
        if t.kind == "IDENT":
            self.advance()
            return m.Ref((t.value,), span=t.span)
        if t.is_kw("AES"):
            self.advance()
            return m.Ref(("AES",), span=t.span)
        self.fail(("reference",))

    def refset(self) -> tuple[m.Ref, ...]:
        self.expect("LBRACE", "'{'")
        out = []
        while not self.at("RBRACE"):
            out.append(self.ref())
            if self.at("COMMA"):
                self.advance()
            elif not self.at("RBRACE"):
                self.fail(("','", "'}'"))
        self.advance()
        return tuple(out)

    def clause_block(self, kw, inner):
        self.expect_kw(kw)
        self.expect("LBRACE", "'{'")
        v = inner()
        self.expect("RBRACE", "'}'")
        return v

    def clauses(self, allowed, handlers, what):
        """Clauses in any order, each at most once, until '}'."""
        seen = set()
        while not self.at("RBRACE"):
            t = self.tok
            if not (t.kind == "KW" and t.value in allowed):
                self.fail(tuple(allowed) + ("'}'",))
            if t.value in seen:
                self.fail(message=f"duplicate {t.value} clause in {what}")
            seen.add(t.value)
            handlers[t.value]()
        self.advance()

    def literal(self) -> m.Literal:
        t = self.tok
        if t.kind in ("INT", "BOOL"):
            self.advance()
            return m.Literal(t.value, span=t.span)
        self.fail(("literal",))

    def params(self) -> tuple[m.Param, ...]:
        self.expect_kw("PARAMETERS")
        self.expect("LBRACE", "'{'")
        out = []
        while not self.at("RBRACE"):
            type_tok = self.ident()
            name_tok = self.ident()
            out.append(m.Param(type_tok.value, name_tok.value, span=name_tok.span))
            if self.at("COMMA", "SEMI"):
                self.advance()
        self.advance()
        return tuple(out)

    def returns(self) -> str:
        return self.clause_block("RETURNS", lambda: self.ident().value)

    def opaque(self) -> m.OpaqueBlock:
        kw = self.advance()
        self.expect("LBRACE", "'{'")
        depth = 1
        toks = []
        while True:
            t = self.tok
            if t.kind == "EOF":
                self.fail(message=f"unterminated {kw.value} block")
            self.advance()
            if t.kind == "LBRACE":
                depth += 1
            elif t.kind == "RBRACE":
                depth -= 1
                if depth == 0:
                    break
            toks.append(t.text)
        return m.OpaqueBlock(kw.value, tuple(toks), span=kw.span)

    # -- AS / AE sections --

    def slos(self, kw):
        self.expect_kw(kw)

        def slo():
            self.expect_kw("SLO")
            name = self.ident()
            self.expect("LBRACE", "'{'")
            e = self.expr()
            self.expect("RBRACE", "'}'")
            return m.SloDef(name.value, e, span=name.span)

        return self.items("SLO", slo)

    def self_mgmt(self, kw):
        self.expect_kw(kw)
        self.expect("LBRACE", "'{'")
        out = []
        while not self.at("RBRACE"):
            if not self.at_kw(*m.POLICY_KINDS):
                self.fail(m.POLICY_KINDS + ("'}'",))
            out.append(self.policy())
        self.advance()
        return tuple(out)

    def policy(self):
        kind = self.advance()
        self.expect("LBRACE", "'{'")
        fluents, mappings = [], []
        while not self.at("RBRACE"):
            if self.at_kw("FLUENT"):
                fluents.append(self.fluent())
            elif self.at_kw("MAPPING"):
                mappings.append(self.mapping())
            else:
                self.fail(("FLUENT", "MAPPING", "'}'"))
        self.advance()
        return m.PolicyDef(kind.value, tuple(fluents), tuple(mappings), span=kind.span)

    def fluent(self):
        self.expect_kw("FLUENT")
        name = self.ident()
        self.expect("LBRACE", "'{'")
        self.expect_kw("INITIATED_BY")
        init = self.refset()
        self.expect_kw("TERMINATED_BY")
        term = self.refset()
        self.expect("RBRACE", "'}'")
        return m.FluentDef(name.value, init, term, span=name.span)

    def mapping(self):
        kw = self.expect_kw("MAPPING")
        self.expect("LBRACE", "'{'")
        self.expect_kw("CONDITIONS")
        conds = self.refset()
        self.expect_kw("DO_ACTIONS")
        acts = self.refset()
        self.expect("RBRACE", "'}'")
        return m.MappingDef(conds, acts, span=kw.span)

    def arch(self):
        self.expect_kw("ASARCHITECTURE")

        def group():
            self.expect_kw("GROUP")
            name = self.ident()
            self.expect("LBRACE", "'{'")
            self.expect_kw("MEMBERS")
            members = self.refset()
            self.expect("RBRACE", "'}'")
            return m.ArchGroup(name.value, members, span=name.span)

        return self.items("GROUP", group)

    def events(self):
        self.expect_kw("EVENTS")
        return self.items("EVENT", self.event)

    def event(self):
        self.expect_kw("EVENT")
        name = self.ident()
        self.expect("LBRACE", "'{'")
        parts = {}

        def activation():
            self.expect_kw("ACTIVATION")
            self.expect("LBRACE", "'{'")
            if not self.at_kw(*m.ACTIVATION_KINDS):
                self.fail(m.ACTIVATION_KINDS)
            kind = self.advance()
            targets = self.refset()
            if not targets:
                self.fail(message=f"{kind.value} needs a target", tok=kind)
            self.expect("RBRACE", "'}'")
            parts["activation"] = m.Activation(kind.value, targets, span=kind.span)

        self.clauses(("GUARDS", "ACTIVATION"), {
            "GUARDS": lambda: parts.__setitem__("guards", self.clause_block("GUARDS", self.expr)),
            "ACTIVATION": activation,
        }, f"EVENT {name.value}")
        return m.EventDef(name.value, parts.get("guards"), parts.get("activation"), span=name.span)

    def metrics(self):
        self.expect_kw("METRICS")
        return self.items("METRIC", self.metric)

    def metric(self):
        self.expect_kw("METRIC")
        name = self.ident()
        self.expect("LBRACE", "'{'")
        parts = {}

        def metric_type():
            def inner():
                if not self.at_kw("RESOURCE", "PLAIN"):
                    self.fail(("RESOURCE", "PLAIN"))
                return self.advance().value
            parts["kind"] = self.clause_block("METRIC_TYPE", inner)

        self.clauses(("METRIC_TYPE", "VALUE", "THRESHOLD_CLASS", "METRIC_SOURCE"), {
            "METRIC_TYPE": metric_type,
            "VALUE": lambda: parts.__setitem__("value", self.clause_block("VALUE", self.literal)),
            "THRESHOLD_CLASS": lambda: parts.__setitem__(
                "tclass", self.clause_block("THRESHOLD_CLASS", self.tclass)),
            "METRIC_SOURCE": lambda: parts.__setitem__("source", self.clause_block("METRIC_SOURCE", self.ref)),
        }, f"METRIC {name.value}")
        for req in ("value", "tclass"):
            if req not in parts:
                self.fail(message=f"METRIC {name.value} lacks {'VALUE' if req == 'value' else 'THRESHOLD_CLASS'}",
                          tok=name)
        return m.MetricDef(name.value, parts.get("kind", "PLAIN"), parts["value"].value, parts["tclass"],
                           parts.get("source"), span=name.span)

    def tclass(self):
        type_tok = self.ident()
        if type_tok.value not in ("Integer", "Boolean"):
            self.fail(message=f"unknown threshold type {type_tok.value!r}", tok=type_tok)
        self.expect("LBRACKET", "'['")
        first = self.literal()
        if self.at("DOTDOT"):
            self.advance()
            last = self.literal()
            self.expect("RBRACKET", "']'")
            if not (isinstance(first.value, int) and isinstance(last.value, int)
                    and not isinstance(first.value, bool) and not isinstance(last.value, bool)):
                self.fail(message="interval bounds must be integers", tok=type_tok)
            return m.ThresholdClass(type_tok.value, low=first.value, high=last.value, span=type_tok.span)
        values = [first.value]
        while self.at("COMMA"):
            self.advance()
            values.append(self.literal().value)
        self.expect("RBRACKET", "']'")
        return m.ThresholdClass(type_tok.value, values=tuple(values), span=type_tok.span)

    def actions(self):
        self.expect_kw("ACTIONS")
        return self.items("ACTION", self.action)

    def action(self):
        self.expect_kw("ACTION")
        impl = False
        if self.at_kw("IMPL"):
            self.advance()
            impl = True
        name = self.ident()
        self.expect("LBRACE", "'{'")
        p = {}
        self.clauses(("GUARDS", "PARAMETERS", "RETURNS", "DOES", "TRIGGERS", "ONERR_TRIGGERS"), {
            "GUARDS": lambda: p.__setitem__("guards", self.clause_block("GUARDS", self.expr)),
            "PARAMETERS": lambda: p.__setitem__("params", self.params()),
            "RETURNS": lambda: p.__setitem__("returns", self.returns()),
            "DOES": lambda: p.__setitem__("body", self.does()),
            "TRIGGERS": lambda: p.__setitem__("triggers", self.kw_refset("TRIGGERS")),
            "ONERR_TRIGGERS": lambda: p.__setitem__("onerr", self.kw_refset("ONERR_TRIGGERS")),
        }, f"ACTION {name.value}")
        return m.ActionDef(name.value, impl, p.get("guards"), p.get("params", ()), p.get("returns"),
                           p.get("body"), p.get("triggers", ()), p.get("onerr", ()), span=name.span)

    def kw_refset(self, kw):
        self.expect_kw(kw)
        return self.refset()

    # -- interaction protocols --

    def protocol(self, kw):
        self.expect_kw(kw)
        self.expect("LBRACE", "'{'")
        p = {}
        allowed = PROTOCOL_SECTIONS if kw == "AEIP" else PROTOCOL_SECTIONS[:3]
        self.clauses(allowed, {
            "MESSAGES": lambda: p.__setitem__("messages", self.kw_items("MESSAGES", "MESSAGE", self.message)),
            "CHANNELS": lambda: p.__setitem__("channels", self.kw_items("CHANNELS", "CHANNEL", self.channel)),
            "FUNCTIONS": lambda: p.__setitem__("functions", self.kw_items("FUNCTIONS", "FUNCTION", self.function)),
            "MANAGED_ELEMENTS": lambda: p.__setitem__(
                "mes", self.kw_items("MANAGED_ELEMENTS", "MANAGED_ELEMENT", self.managed_element)),
        }, kw)
        return m.InteractionProtocol(p.get("messages", ()), p.get("channels", ()),
                                     p.get("functions", ()), p.get("mes", ()))

    def kw_items(self, kw, item_kw, parse_item):
        self.expect_kw(kw)
        return self.items(item_kw, parse_item)

    def message(self):
        self.expect_kw("MESSAGE")
        name = self.ident()
        self.expect("LBRACE", "'{'")
        params = ()
        if self.at_kw("PARAMETERS"):
            params = self.params()
        self.expect("RBRACE", "'}'")
        return m.MessageDef(name.value, params, span=name.span)

    def channel(self):
        self.expect_kw("CHANNEL")
        name = self.ident()
        self.expect("LBRACE", "'{'")
        p = {}
        word = lambda: self.ident().value.upper()  # noqa: E731
        self.clauses(("ACCESS", "DIRECTION"), {
            "ACCESS": lambda: p.__setitem__("access", self.clause_block("ACCESS", word)),
            "DIRECTION": lambda: p.__setitem__("direction", self.clause_block("DIRECTION", word)),
        }, f"CHANNEL {name.value}")
        return m.ChannelDef(name.value, p.get("access", "SEQUENTIAL"), p.get("direction", "BIDIRECTIONAL"),
                            span=name.span)

    def function(self):
        self.expect_kw("FUNCTION")
        name = self.ident()
        self.expect("LBRACE", "'{'")
        p = {}
        self.clauses(("PARAMETERS", "DOES"), {
            "PARAMETERS": lambda: p.__setitem__("params", self.params()),
            "DOES": lambda: p.__setitem__("body", self.does()),
        }, f"FUNCTION {name.value}")
        return m.FunctionDef(name.value, p.get("params", ()), p.get("body", ()), span=name.span)

    def managed_element(self):
        self.expect_kw("MANAGED_ELEMENT")
        name = self.ident()
        fns = self.items("INTERFACE_FUNCTION", self.interface_function)
        return m.ManagedElementDef(name.value, fns, span=name.span)

    def interface_function(self):
        self.expect_kw("INTERFACE_FUNCTION")
        name = self.ident()
        self.expect("LBRACE", "'{'")
        p = {}
        self.clauses(("PARAMETERS", "RETURNS", "ONERR_TRIGGERS"), {
            "PARAMETERS": lambda: p.__setitem__("params", self.params()),
            "RETURNS": lambda: p.__setitem__("returns", self.returns()),
            "ONERR_TRIGGERS": lambda: p.__setitem__("onerr", self.kw_refset("ONERR_TRIGGERS")),
        }, f"INTERFACE_FUNCTION {name.value}")
        return m.InterfaceFunctionDef(name.value, p.get("params", ()), p.get("returns"),
                                      p.get("onerr", ()), span=name.span)

    # -- statements --

    def does(self):
        self.expect_kw("DOES")
        self.expect("LBRACE", "'{'")
        body = self.stmts(("RBRACE",))
        self.advance()
        return body

    def stmts(self, stop_kinds=(), stop_kw=()):
        out = []
        while not (self.at(*stop_kinds) or self.at_kw(*stop_kw)):
            if self.at("EOF"):
                self.fail(("statement",) + tuple(_KIND_LABEL.get(k, k) for k in stop_kinds) + tuple(stop_kw))
            out.append(self.stmt())
            while self.at("SEMI"):
                self.advance()
        return tuple(out)

    def stmt(self):
        self.enter()
        try:
            return self._stmt()
        finally:
            self.leave()

    def _stmt(self):
        t = self.tok
        if t.is_kw("IF"):
            self.advance()
            cond = self.expr()
            self.expect_kw("THEN")
            body = self.stmts(stop_kw=("END",))
            self.advance()
            return m.If(cond, body, span=t.span)
        if t.is_kw("FOREACH"):
            self.advance()
            binder = self.ident()
            self.expect_kw("IN")
            coll = self.ref()
            self.expect("LBRACE", "'{'")
            body = self.stmts(("RBRACE",))
            self.advance()
            return m.ForeachStmt(binder.value, coll, body, span=t.span)
        if t.is_kw("CALL"):
            return m.CallStmt(self.call(), span=t.span)
        if t.is_kw("SET"):
            self.advance()
            target = self.ref()
            path = target.path
            if len(path) > 1 and path[-1] == "VALUE":
                target = m.Ref(path[:-1], span=target.span)
            self.expect("EQ", "'='")
            return m.SetMetric(target, self.literal(), span=t.span)
        if t.is_kw("TRIGGER"):
            self.advance()
            return m.Trigger(self.ref(), span=t.span)
        if t.is_kw("RETURN"):
            self.advance()
            return m.Return(self.expr(), span=t.span)
        if t.kind == "PATH" and self.peek().kind in ("LSHIFT", "RSHIFT"):
            msg = self.ref()
            op = self.advance()
            chan = self.ref()
            cls = m.Receive if op.kind == "LSHIFT" else m.Send
            return cls(msg, chan, span=t.span)
        if t.kind == "IDENT" and self.peek().kind == "EQ":
            self.advance()
            self.advance()
            return m.Assign(t.value, self.expr(), span=t.span)
        self.fail(("statement",))

    # -- expressions --

    def expr(self):
        self.enter()
        try:
            left = self.and_expr()
            while self.at_kw("OR"):
                op = self.advance()
                left = m.BinOp("OR", left, self.and_expr(), span=op.span)
            return left
        finally:
            self.leave()

    def and_expr(self):
        left = self.unary()
        while self.at_kw("AND"):
            op = self.advance()
            left = m.BinOp("AND", left, self.unary(), span=op.span)
        return left

    def unary(self):
        if self.at_kw("NOT"):
            op = self.advance()
            self.enter()
            try:
                return m.Not(self.unary(), span=op.span)
            finally:
                self.leave()
        return self.primary()

    def primary(self):
        t = self.tok
        if t.kind == "LPAREN":
            self.advance()
            e = self.expr()
            self.expect("RPAREN", "')'")
            return e
        if t.kind in ("INT", "BOOL"):
            return self.literal()
        if t.is_kw("CALL"):
            return self.call()
        if t.is_kw("FOREACH"):
            self.advance()
            binder = self.ident()
            self.expect_kw("IN")
            coll = self.ref()
            self.expect("LBRACE", "'{'")
            body = self.expr()
            self.expect("RBRACE", "'}'")
            return m.ForeachExpr(binder.value, coll, body, span=t.span)
        if t.kind in ("PATH", "IDENT"):
            return self.ref()
        self.fail(("expression",))

    def call(self):
        kw = self.expect_kw("CALL")
        target = self.ref()
        self.expect("LPAREN", "'('")
        args = []
        while not self.at("RPAREN"):
            args.append(self.expr())
            if self.at("COMMA"):
                self.advance()
            elif not self.at("RPAREN"):
                self.fail(("','", "')'"))
        self.advance()
        return m.Call(target, tuple(args), span=kw.span)


_KIND_LABEL = {"LBRACE": "'{'", "RBRACE": "'}'", "LPAREN": "'('", "RPAREN": "')'",
               "IDENT": "identifier", "EOF": "end-of-file"}


def describe(tok: Token) -> str:
    if tok.kind == "EOF":
        return "end-of-file"
    if tok.kind == "KW":
        return f"keyword {tok.value}"
    if tok.kind == "IDENT":
        return f"identifier '{tok.value}'"
    return f"'{tok.text}'"


def parse_spec(src: str, file: str = "<input>") -> tuple[Optional[m.SpecModel], list[ParseDiagnostic]]:
    """Parse source text.  Returns ``(tree, diagnostics)``; ``tree`` is None
    whenever an error diagnostic was produced."""
    diags: list[ParseDiagnostic] = []
    lex_errors: list[LexError] = []
    tokens = tokenize(src, file, errors=lex_errors)
    for e in lex_errors:
        diags.append(ParseDiagnostic("error", e.span, e.message))
    tree = _Parser(tokens, file, diags).parse()
    diags.sort(key=lambda d: (d.span.line, d.span.column))
    if any(d.severity == "error" for d in diags):
        return None, diags
    return tree, diags


def parse_file(path) -> tuple[Optional[m.SpecModel], list[ParseDiagnostic]]:
    with open(path, encoding="utf-8") as fh:
        src = fh.read()
    return parse_spec(src, str(path))


# -- canonical printer --------------------------------------------------------

def dump_ast(tree: m.SpecModel) -> str:
    """Deterministic pretty-print; ``parse_spec(dump_ast(t))`` is structurally equal to ``t``."""
    p = _Printer()
    p.spec(tree)
    return "\n".join(p.lines) + "\n"


def _lit(v) -> str:
    if isinstance(v, bool):
        return "TRUE" if v else "FALSE"
    return str(v)


def format_expr(e) -> str:
    if isinstance(e, m.Ref):
        return e.text
    if isinstance(e, m.Literal):
        return _lit(e.value)
    if isinstance(e, m.Not):
        inner = format_expr(e.operand)
        if isinstance(e.operand, m.BinOp):
            inner = f"({inner})"
        return f"NOT {inner}"
    if isinstance(e, m.BinOp):
        parts = []
        for side in (e.left, e.right):
            s = format_expr(side)
            parts.append(f"({s})" if isinstance(side, m.BinOp) else s)
        return f"{parts[0]} {e.op} {parts[1]}"
    if isinstance(e, m.Call):
        return f"CALL {e.target.text}({', '.join(format_expr(a) for a in e.args)})"
    if isinstance(e, m.ForeachExpr):
        return f"FOREACH {e.binder} IN {e.collection.text} {{ {format_expr(e.body)} }}"
    raise TypeError(type(e).__name__)


def _refs(refs) -> str:
    if not refs:
        return "{ }"
    return "{ " + ", ".join(r.text for r in refs) + " }"


class _Printer:
    def __init__(self):
        self.lines: list[str] = []
        self.level = 0

    def emit(self, s):
        self.lines.append("  " * self.level + s)

    def open(self, s):
        self.emit(s + " {")
        self.level += 1

    def close(self):
        self.level -= 1
        self.emit("}")

    def spec(self, t: m.SpecModel):
        a = t.as_tier
        self.open(f"AS {a.name}")
        self.slos("ASSLO", a.slos)
        self.policies("ASSELF_MANAGEMENT", a.policies)
        if t.architecture:
            self.open("ASARCHITECTURE")
            for g in t.architecture:
                self.open(f"GROUP {g.name}")
                self.emit(f"MEMBERS {_refs(g.members)}")
                self.close()
            self.close()
        self.actions(a.actions)
        self.events(a.events)
        self.metrics(a.metrics)
        self.close()
        if t.asip != m.InteractionProtocol():
            self.protocol("ASIP", t.asip)
        if t.aes:
            self.open("AES")
            for ae in t.aes:
                self.ae(ae)
            self.close()

    def ae(self, ae: m.AESpec):
        self.open(f"AE {ae.name}")
        self.slos("AESLO", ae.slos)
        self.policies("AESELF_MANAGEMENT", ae.policies)
        if ae.friends:
            self.emit(f"FRIENDS {_refs(ae.friends)}")
        if ae.aeip != m.InteractionProtocol():
            self.protocol("AEIP", ae.aeip)
        for blk in ae.opaque:
            self.emit(f"{blk.keyword} {{ {' '.join(blk.tokens)} }}" if blk.tokens else f"{blk.keyword} {{ }}")
        self.actions(ae.actions)
        self.events(ae.events)
        self.metrics(ae.metrics)
        self.close()

    def slos(self, kw, slos):
        if not slos:
            return
        self.open(kw)
        for s in slos:
            self.open(f"SLO {s.name}")
            self.emit(format_expr(s.expr))
            self.close()
        self.close()

    def policies(self, kw, policies):
        if not policies:
            return
        self.open(kw)
        for p in policies:
            self.open(p.kind)
            for f in p.fluents:
                self.open(f"FLUENT {f.name}")
                self.emit(f"INITIATED_BY {_refs(f.initiated_by)}")
                self.emit(f"TERMINATED_BY {_refs(f.terminated_by)}")
                self.close()
            for mp in p.mappings:
                self.open("MAPPING")
                self.emit(f"CONDITIONS {_refs(mp.conditions)}")
                self.emit(f"DO_ACTIONS {_refs(mp.actions)}")
                self.close()
            self.close()
        self.close()

    def params(self, params):
        if params:
            self.emit("PARAMETERS { " + ", ".join(f"{p.type_name} {p.name}" for p in params) + " }")

    def actions(self, actions):
        if not actions:
            return
        self.open("ACTIONS")
        for a in actions:
            self.open(f"ACTION {'IMPL ' if a.impl else ''}{a.name}")
            if a.guards is not None:
                self.emit(f"GUARDS {{ {format_expr(a.guards)} }}")
            self.params(a.params)
            if a.returns is not None:
                self.emit(f"RETURNS {{ {a.returns} }}")
            if a.body is not None:
                self.body("DOES", a.body)
            if a.triggers:
                self.emit(f"TRIGGERS {_refs(a.triggers)}")
            if a.onerr_triggers:
                self.emit(f"ONERR_TRIGGERS {_refs(a.onerr_triggers)}")
            self.close()
        self.close()

    def body(self, kw, stmts):
        self.open(kw)
        for s in stmts:
            self.stmt(s)
        self.close()

    def stmt(self, s):
        if isinstance(s, m.Assign):
            self.emit(f"{s.name} = {format_expr(s.value)}")
        elif isinstance(s, m.If):
            self.emit(f"IF {format_expr(s.cond)} THEN")
            self.level += 1
            for x in s.body:
                self.stmt(x)
            self.level -= 1
            self.emit("END")
        elif isinstance(s, m.ForeachStmt):
            self.open(f"FOREACH {s.binder} IN {s.collection.text}")
            for x in s.body:
                self.stmt(x)
            self.close()
        elif isinstance(s, m.CallStmt):
            self.emit(format_expr(s.call))
        elif isinstance(s, m.SetMetric):
            self.emit(f"SET {s.target.text}.VALUE = {_lit(s.value.value)}")
        elif isinstance(s, m.Trigger):
            self.emit(f"TRIGGER {s.event.text}")
        elif isinstance(s, m.Return):
            self.emit(f"RETURN {format_expr(s.value)}")
        elif isinstance(s, m.Receive):
            self.emit(f"{s.message.text} << {s.channel.text}")
        elif isinstance(s, m.Send):
            self.emit(f"{s.message.text} >> {s.channel.text}")
        else:
            raise TypeError(type(s).__name__)

    def events(self, events):
        if not events:
            return
        self.open("EVENTS")
        for e in events:
            self.open(f"EVENT {e.name}")
            if e.guards is not None:
                self.emit(f"GUARDS {{ {format_expr(e.guards)} }}")
            if e.activation is not None:
                self.emit(f"ACTIVATION {{ {e.activation.kind} {_refs(e.activation.targets)} }}")
            self.close()
        self.close()

    def metrics(self, metrics):
        if not metrics:
            return
        self.open("METRICS")
        for mt in metrics:
            self.open(f"METRIC {mt.name}")
            self.emit(f"METRIC_TYPE {{ {mt.kind} }}")
            self.emit(f"VALUE {{ {_lit(mt.initial_value)} }}")
            tc = mt.threshold_class
            if tc.is_interval:
                self.emit(f"THRESHOLD_CLASS {{ {tc.type_name} [{tc.low} .. {tc.high}] }}")
            else:
                vals = ", ".join(_lit(v) for v in tc.values)
                self.emit(f"THRESHOLD_CLASS {{ {tc.type_name} [{vals}] }}")
            if mt.source is not None:
                self.emit(f"METRIC_SOURCE {{ {mt.source.text} }}")
            self.close()
        self.close()

    def protocol(self, kw, p: m.InteractionProtocol):
        self.open(kw)
        if p.messages:
            self.open("MESSAGES")
            for msg in p.messages:
                self.open(f"MESSAGE {msg.name}")
                self.params(msg.params)
                self.close()
            self.close()
        if p.channels:
            self.open("CHANNELS")
            for c in p.channels:
                self.open(f"CHANNEL {c.name}")
                self.emit(f"ACCESS {{ {c.access} }}")
                self.emit(f"DIRECTION {{ {c.direction} }}")
                self.close()
            self.close()
        if p.functions:
            self.open("FUNCTIONS")
            for f in p.functions:
                self.open(f"FUNCTION {f.name}")
                self.params(f.params)
                self.body("DOES", f.body)
                self.close()
            self.close()
        if p.managed_elements:
            self.open("MANAGED_ELEMENTS")
            for me in p.managed_elements:
                self.open(f"MANAGED_ELEMENT {me.name}")
                for fn in me.interface_functions:
                    self.open(f"INTERFACE_FUNCTION {fn.name}")
                    self.params(fn.params)
                    if fn.returns is not None:
                        self.emit(f"RETURNS {{ {fn.returns} }}")
                    if fn.onerr_triggers:
                        self.emit(f"ONERR_TRIGGERS {_refs(fn.onerr_triggers)}")
                    self.close()
                self.close()
            self.close()
        self.close()


__all__ = ["ParseDiagnostic", "SourceSpan", "dump_ast", "format_expr", "parse_file", "parse_spec",
           "tokenize", "KEYWORDS"]
