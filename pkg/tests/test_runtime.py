import pytest

from admarf.checker import check
from admarf.runtime import (DivergenceError, Engine, EngineConfig, InterfaceError,
                            UnboundHookError)
from admarf.sim import Envelope

from conftest import CORPUS, checked, parse_ok


class FakePort:
    """Counts per (scope, function); other calls go through ``handlers``."""

    def __init__(self, counts=None, handlers=None):
        self.counts = dict(counts or {})
        self.handlers = dict(handlers or {})
        self.calls = []
        self.stimuli = []
        self.delivered = []

    def invoke(self, scope, element, function, args):
        self.calls.append((scope, function, args))
        h = self.handlers.get(function)
        if h is None:
            raise InterfaceError(f"{function} unbound")
        return h(scope, *args)

    def read_metric(self, scope, element, function):
        return self.counts.get((scope, function), 0)

    def poll_stimuli(self):
        out, self.stimuli = self.stimuli, []
        return out

    def deliver(self, envelope, scope, message, channel):
        self.delivered.append((scope, message, channel))


def rec(records, kind=None, subject=None, **detail):
    return [r for r in records
            if (kind is None or r.kind == kind) and (subject is None or r.subject == subject)
            and all(r.detail.get(k) == v for k, v in detail.items())]


def index_of(records, kind, subject, **detail):
    for i, r in enumerate(records):
        if r.kind == kind and r.subject == subject and all(r.detail.get(k) == v for k, v in detail.items()):
            return i
    raise AssertionError(f"no {kind} record for {subject} {detail}")


def in_order(records, *steps):
    idx = [index_of(records, *s[:2], **(s[2] if len(s) > 2 else {})) for s in steps]
    assert idx == sorted(idx), idx


CLAS = "CLASSIFICATION_AE"


def healing_port(failed=0, problematic=0, **handlers):
    port = FakePort({(CLAS, "countFailedNodes"): failed, (CLAS, "countProblematicNodes"): problematic})
    port.handlers.update({"getFailedNode": lambda s: "clas-1", "getProblematicNode": lambda s: "clas-1",
                          "runNodeReplica": lambda s, n: "clas-1r", "recoverNode": lambda s, n: None,
                          "reportProblem": lambda s: None})
    port.handlers.update(handlers)
    return port


def test_low_performance_chain(corpus):
    port = healing_port(failed=1)
    eng = Engine(corpus["self_healing"], port)
    recs = eng.settle_tick()
    in_order(recs,
             ("metric", f"{CLAS}.numberOfFailedNodes", {"value": 1, "valid": False}),
             ("slo", "AS.performance", {"state": "degraded"}),
             ("slo", f"{CLAS}.performance", {"state": "degraded"}),
             ("event", "AS.lowPerformanceDetected", {"status": "fired"}),
             ("fluent", "AS.inLowPerformance", {"state": "active"}),
             ("action", "AS.startSelfHealing", {"status": "started"}),
             ("event", f"{CLAS}.mustDoSelfHealing", {"status": "fired"}),
             ("fluent", f"{CLAS}.inActiveSelfHealing", {"state": "active"}),
             ("action", f"{CLAS}.analyzeProblem", {"status": "started"}),
             ("event", f"{CLAS}.mustSwitchToNodeReplica", {"status": "fired"}),
             ("action", f"{CLAS}.startReplicaNode", {"status": "completed"}),
             ("event", f"{CLAS}.nodeReplicaStarted", {"status": "fired"}))
    assert (CLAS, "runNodeReplica", ("clas-1",)) in port.calls
    # other AEs are satisfied, so only the degraded one is told to heal
    assert not rec(recs, "event", "LOADING_AE.mustDoSelfHealing")
    assert eng.is_quiescent()

    port.counts[(CLAS, "countFailedNodes")] = 0
    recs = eng.settle_tick()
    in_order(recs,
             ("slo", "AS.performance", {"state": "satisfied"}),
             ("event", "AS.performanceNormalized", {"status": "fired"}),
             ("fluent", "AS.inLowPerformance", {"state": "inactive"}))
    assert not any(eng.state.fluents[k].active for k in eng.state.fluents)


def test_recoverable_problematic_node_takes_fix_branch(corpus):
    port = healing_port(problematic=1)
    recs = Engine(corpus["self_healing"], port).settle_tick()
    assert rec(recs, "event", f"{CLAS}.mustFixNode", status="fired")
    assert not rec(recs, "event", f"{CLAS}.mustSwitchToNodeReplica")
    in_order(recs, ("action", f"{CLAS}.fixProblematicNode", {"status": "completed"}),
             ("event", f"{CLAS}.nodeFixed", {"status": "fired"}),
             ("fluent", f"{CLAS}.inProblematicNodesDetected", {"state": "inactive"}))


def test_failed_recovery_switches_to_replica(corpus):
    def refuse(scope, node):
        raise InterfaceError("cannot be recovered")

    port = healing_port(problematic=1, recoverNode=refuse)
    recs = Engine(corpus["self_healing"], port).settle_tick()
    in_order(recs,
             ("error", f"{CLAS}.STAGE_ME.recoverNode"),
             ("event", f"{CLAS}.nodeCannotBeFixed", {"status": "fired", "cause": f"onerr:{CLAS}.STAGE_ME.recoverNode"}),
             ("action", f"{CLAS}.fixProblematicNode", {"status": "errored"}),
             ("event", f"{CLAS}.mustSwitchToNodeReplica", {"status": "fired", "cause": f"occurred:{CLAS}.nodeCannotBeFixed"}),
             ("fluent", f"{CLAS}.inFailedNodesDetected", {"state": "active"}),
             ("action", f"{CLAS}.startReplicaNode", {"status": "started"}))
    assert not rec(recs, "event", f"{CLAS}.nodeFixed")


def test_missing_replica_reports_problem(corpus):
    def none_left(scope, node):
        raise InterfaceError("no replica")

    port = healing_port(failed=1, runNodeReplica=none_left)
    eng = Engine(corpus["self_healing"], port)
    recs = eng.settle_tick()
    in_order(recs,
             ("event", f"{CLAS}.nodeReplicaFailed", {"status": "fired"}),
             ("event", f"{CLAS}.selfHealingFailed", {"status": "fired"}),
             ("event", "AS.performanceNormFailed", {"status": "fired"}),
             ("fluent", "AS.inLowPerformance", {"state": "inactive"}),
             ("action", f"{CLAS}.reportProblem", {"status": "completed"}))
    assert (CLAS, "reportProblem", ()) in port.calls
    assert eng.state.satisfaction["AS.performance"].value == "degraded"


@pytest.mark.parametrize("name", CORPUS)
def test_no_stimulus_leaves_fluents_alone(corpus, name):
    eng = Engine(corpus[name], FakePort())
    before = {k: v.active for k, v in eng.state.fluents.items()}
    recs = [r for _ in range(3) for r in eng.settle_tick()]
    assert {k: v.active for k, v in eng.state.fluents.items()} == before
    assert not rec(recs, "fluent") and not rec(recs, "action")
    assert eng.state.tick == 3


def test_secure_and_insecure_follow_metric_edges(corpus):
    port = FakePort(handlers={"checkNodeCertificate": lambda s, pc: pc.certificate is not None})
    eng = Engine(corpus["self_protection"], port)
    assert not eng.hook_message(Envelope("publicMessage", "ext-1", b"\x01", None), "publicMessage")
    recs = eng.records
    in_order(recs,
             ("message", "AS.publicMessage", {"status": "incoming"}),
             ("event", "AS.publicMessageIsComing", {"status": "fired"}),
             ("fluent", "AS.inSecurityCheck", {"state": "active"}),
             ("metric", "AS.thereIsInsecurePublicMessage", {"value": True, "valid": False}),
             ("event", "AS.publicMessageSecure", {"status": "suppressed"}),
             ("event", "AS.publicMessageInsecure", {"status": "fired"}),
             ("fluent", "AS.inSecurityCheck", {"state": "inactive"}),
             ("message", "AS.publicMessage", {"status": "discarded"}),
             ("metric", "AS.thereIsInsecurePublicMessage", {"value": False, "cause": "reset"}),
             ("event", "AS.publicMessageInsecure", {"status": "suppressed"}),
             ("event", "AS.publicMessageSecure", {"status": "fired"}))
    assert port.delivered == []


def test_secure_message_is_delivered(corpus):
    port = FakePort(handlers={"checkNodeCertificate": lambda s, cert: True})
    eng = Engine(corpus["self_protection"], port)
    assert eng.hook_message(Envelope("publicMessage", "prep-1", b"", "cert"), "publicMessage")
    assert port.delivered == [("AS", "publicMessage", "publicLink")]
    assert not rec(eng.records, "metric")
    assert not eng.fluent_active("AS.inSecurityCheck")


def test_unknown_message_is_an_error_record(corpus):
    eng = Engine(corpus["self_protection"], FakePort())
    assert not eng.hook_message(Envelope("nope", "x", b"", None), "nope")
    assert [r.kind for r in eng.records] == ["error"]


def test_private_message_needs_qualification_when_ambiguous(corpus):
    eng = Engine(corpus["self_protection"], FakePort())
    assert eng.resolve_message("privateMessage") is None
    assert eng.resolve_message(f"{CLAS}.privateMessage").scope == CLAS
    assert eng.resolve_message("publicMessage").scope == "AS"


TIE = """
AS X {
  ASSELF_MANAGEMENT { SELF_HEALING {
    FLUENT f { INITIATED_BY { EVENTS.a } TERMINATED_BY { EVENTS.a, EVENTS.b } }
    FLUENT g { INITIATED_BY { EVENTS.c } TERMINATED_BY { EVENTS.b } }
    MAPPING { CONDITIONS { f } DO_ACTIONS { ACTIONS.act } }
    MAPPING { CONDITIONS { g } DO_ACTIONS { ACTIONS.guarded } }
  } }
  ACTIONS {
    ACTION act { DOES { } }
    ACTION guarded { GUARDS { ASSELF_MANAGEMENT.SELF_HEALING.f } DOES { } TRIGGERS { EVENTS.b } }
  }
  EVENTS { EVENT a { } EVENT b { } EVENT c { } }
}
"""


def tie_engine():
    tree = parse_ok(TIE)
    assert check(tree).passed
    return Engine(tree)


def test_termination_wins_ties():
    eng = tie_engine()
    eng.enqueue("AS.a", "host")
    recs = eng.settle_tick()
    (r,) = rec(recs, "fluent", "AS.f")
    assert r.detail["state"] == "unchanged" and "same event" in r.detail["reason"]
    assert not eng.fluent_active("AS.f") and not rec(recs, "action")


def test_reinitiation_is_a_noop_and_dispatch_happens_once():
    eng = tie_engine()
    eng.enqueue("AS.c", "host")
    first = eng.settle_tick()
    eng.enqueue("AS.c", "host")
    second = eng.settle_tick()
    assert rec(second, "fluent", "AS.g")[0].detail["reason"] == "already active"
    assert len(rec(first + second, "action", "AS.guarded")) == 1


def test_false_guard_writes_one_skip_record():
    eng = tie_engine()
    eng.enqueue("AS.c", "host")
    recs = eng.settle_tick()
    (r,) = rec(recs, "action")
    assert r.subject == "AS.guarded" and r.detail == {"via": "fluent:AS.g", "status": "skipped"}
    assert not rec(recs, "event", "AS.b")
    assert eng.fluent_active("AS.g")


ONERR = """
AS X {
  ASSELF_MANAGEMENT { SELF_HEALING {
    FLUENT f { INITIATED_BY { EVENTS.go } TERMINATED_BY { EVENTS.done, EVENTS.bad } }
    MAPPING { CONDITIONS { f } DO_ACTIONS { ACTIONS.act } }
  } }
  ACTIONS {
    ACTION act {
      DOES { call AES.A.ACTIONS.work() }
      TRIGGERS { EVENTS.done }
      ONERR_TRIGGERS { EVENTS.bad }
    }
  }
  EVENTS { EVENT go { } EVENT done { } EVENT bad { } }
}
AES {
  AE A {
    AEIP { MANAGED_ELEMENTS { MANAGED_ELEMENT ME {
      INTERFACE_FUNCTION poke { ONERR_TRIGGERS { EVENTS.poked } }
    } } }
    ACTIONS { ACTION work { DOES { call AEIP.MANAGED_ELEMENTS.ME.poke() } } }
    EVENTS { EVENT poked { } }
  }
}
"""


def test_interface_error_propagates_to_caller_and_fires_onerr():
    eng = Engine(checked(ONERR))
    eng.enqueue("AS.go", "host")
    recs = eng.settle_tick()
    in_order(recs,
             ("action", "AS.act", {"status": "started"}),
             ("action", "A.work", {"status": "started", "via": "call:AS.act"}),
             ("error", "A.ME.poke"),
             ("event", "A.poked", {"status": "fired"}),
             ("action", "A.work", {"status": "errored"}),
             ("action", "AS.act", {"status": "errored"}),
             ("event", "AS.bad", {"status": "fired", "cause": "onerr:AS.act"}),
             ("fluent", "AS.f", {"state": "inactive", "event": "AS.bad"}))
    assert not rec(recs, "event", "AS.done")


def test_successful_interface_call_fires_triggers():
    eng = Engine(checked(ONERR), FakePort(handlers={"poke": lambda s: 1}))
    eng.enqueue("AS.go", "host")
    recs = eng.settle_tick()
    assert rec(recs, "event", "AS.done", status="fired") and not rec(recs, "event", "AS.bad")


def test_unbound_impl_hook_is_an_engine_error():
    tree = checked(ONERR.replace("ACTION act {", "ACTION IMPL act {"))
    eng = Engine(tree)
    eng.enqueue("AS.go", "host")
    with pytest.raises(UnboundHookError):
        eng.settle_tick()
    eng = Engine(tree, FakePort(handlers={"poke": lambda s: 1}), hooks={"act": lambda scope, args: "ok"})
    eng.enqueue("AS.go", "host")
    assert rec(eng.settle_tick(), "action", "AS.act", status="completed")


CYCLE = """
AS X {
  EVENTS {
    EVENT a { ACTIVATION { OCCURRED { EVENTS.b } } }
    EVENT b { ACTIVATION { OCCURRED { EVENTS.a } } }
  }
}
"""


def test_occurred_cycle_diverges():
    eng = Engine(checked(CYCLE), config=EngineConfig(max_micro_steps=50))
    eng.enqueue("AS.a", "host")
    with pytest.raises(DivergenceError) as ei:
        eng.settle_tick()
    assert ei.value.steps == 50 and ei.value.tick == 0


def test_stimuli_are_external(corpus):
    port = FakePort()
    port.stimuli.append("enteringClassificationStage")
    port.handlers["syncCachedResults"] = lambda s: None
    eng = Engine(corpus["self_optimization"], port, hooks={"adaptCP": lambda scope, args: "corba"})
    recs = eng.settle_tick()
    assert rec(recs, "event", "AS.enteringClassificationStage", cause="external", status="fired")
    adapted = [r.subject for r in rec(recs, "action", status="completed") if r.subject.endswith(".adaptCP")]
    assert adapted == [f"CLASSF_NODE_{i}.adaptCP" for i in (1, 2, 3)]
    assert rec(recs, "event", "AS.optimizationSucceeded", status="fired")
    assert not any(eng.state.fluents[k].active for k in eng.state.fluents)


def test_sink_sees_every_record(corpus):
    seen = []
    eng = Engine(corpus["self_healing"], healing_port(failed=1), sink=seen.append)
    eng.settle_tick()
    assert seen == eng.records and seen
