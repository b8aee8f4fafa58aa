"""Deterministic model of the four-stage pattern-recognition pipeline.

Stages are black boxes: a job carries a work counter per stage and nothing
else.  The world exposes the operations the managed-element interface
functions need (node counts, replica promotion, recovery, certificate
checks, cache sync, protocol selection) plus fault injection.
"""

from __future__ import annotations

import hashlib
import hmac
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import yaml

STAGES = ("loading", "preprocessing", "feature_extraction", "classification")
HEALTH = ("healthy", "problematic", "failed")
DEFAULT_COSTS = {"rmi": 1, "corba": 2, "xmlrpc": 3}
WORK_PER_STAGE = 2  # half-units: healthy nodes do 2 per tick, problematic ones 1


class SimError(Exception):
    pass


class NoReplicaError(SimError):
    pass


class PreconditionError(SimError):
    pass


class UnrecoverableError(SimError):
    pass


class CacheConflictError(SimError):
    pass


class NoCommonProtocolError(SimError):
    pass


class ConfigError(SimError):
    pass


# -- signatures --

class SignatureScheme(Protocol):
    def sign(self, key: bytes, subject: str, payload: bytes) -> bytes: ...

    def verify(self, key: bytes, subject: str, payload: bytes, sig: bytes) -> bool: ...


class KeyedDigestScheme:
    """HMAC-SHA256 over ``subject || 0x00 || sha256(payload)``."""

    def sign(self, key: bytes, subject: str, payload: bytes) -> bytes:
        msg = subject.encode() + b"\0" + hashlib.sha256(payload).digest()
        return hmac.new(key, msg, hashlib.sha256).digest()

    def verify(self, key: bytes, subject: str, payload: bytes, sig: bytes) -> bool:
        return hmac.compare_digest(self.sign(key, subject, payload), sig)


@dataclass(frozen=True)
class ProxyCertificate:
    subject: str
    sig: bytes


@dataclass(frozen=True)
class PresentedCertificate:
    """A certificate together with the payload it claims to cover."""
    certificate: Optional[ProxyCertificate]
    payload: bytes


@dataclass(frozen=True)
class Envelope:
    message: str
    sender: str
    payload: bytes
    certificate: Optional[ProxyCertificate] = None

    def field(self, name: str):
        if name == "senderSignature":
            return PresentedCertificate(self.certificate, self.payload)
        raise KeyError(name)


def default_key(node_id: str) -> bytes:
    return hashlib.sha256(b"key:" + node_id.encode()).digest()


def forged_key(node_id: str) -> bytes:
    return hashlib.sha256(b"forged:" + node_id.encode()).digest()


# -- state --

@dataclass
class NodeState:
    id: str
    stage: str
    health: str = "healthy"
    is_replica_of: Optional[str] = None
    replaced_by: Optional[str] = None
    recoverable: bool = True
    supported_protocols: set = field(default_factory=set)
    active_protocol: Optional[str] = None
    result_cache: dict = field(default_factory=dict)
    key: bytes = b""

    @property
    def retired(self) -> bool:
        return self.replaced_by is not None

    @property
    def counted(self) -> bool:
        """Part of the stage's working set: not a standby replica, not retired."""
        return self.is_replica_of is None and not self.retired

    @property
    def eligible(self) -> bool:
        return self.counted and self.health != "failed"


@dataclass
class Job:
    id: str
    stage_index: int = 0
    work: int = 0
    status: str = "queued"  # queued | in-stage | done | stalled
    node: Optional[str] = None


@dataclass
class NodeConfig:
    id: str
    stage: str
    replica_of: Optional[str] = None
    health: str = "healthy"
    recoverable: bool = True
    protocols: Optional[list] = None
    active_protocol: Optional[str] = None
    cache: dict = field(default_factory=dict)
    key: Optional[str] = None  # hex


@dataclass
class WorldConfig:
    nodes: list
    stages: tuple = STAGES
    costs: dict = field(default_factory=lambda: dict(DEFAULT_COSTS))
    trust: Optional[list] = None  # default: every node
    bindings: dict = field(default_factory=dict)  # AE name -> {stage, node?}
    stage_events: dict = field(default_factory=dict)  # stage -> event name
    assignment: str = "lowest-id"  # or "random"

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d or {})
        known = {"nodes", "stages", "costs", "trust", "bindings", "stage_events", "assignment"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown world keys: {sorted(extra)}")
        try:
            nodes = [NodeConfig(**n) for n in d.pop("nodes", [])]
        except TypeError as exc:
            raise ConfigError(f"bad node entry: {exc}") from exc
        if "stages" in d:
            d["stages"] = tuple(d["stages"])
        return cls(nodes=nodes, **d)

    @classmethod
    def load(cls, path) -> "WorldConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))


class PipelineWorld:
    def __init__(self, config: WorldConfig, seed: int = 0, scheme: Optional[SignatureScheme] = None):
        self.config = config
        self.stages = tuple(config.stages)
        if len(self.stages) != 4:
            raise ConfigError("the pipeline has exactly four stages")
        self.costs = dict(config.costs)
        if any(c <= 0 for c in self.costs.values()):
            raise ConfigError("protocol costs must be positive")
        self.scheme = scheme or KeyedDigestScheme()
        self.rng = random.Random(seed)
        self.clock = 0
        self.nodes: dict[str, NodeState] = {}
        for nc in config.nodes:
            if nc.stage not in self.stages:
                raise ConfigError(f"node {nc.id}: unknown stage {nc.stage!r}")
            if nc.id in self.nodes:
                raise ConfigError(f"duplicate node {nc.id}")
            if nc.health not in HEALTH:
                raise ConfigError(f"node {nc.id}: unknown health {nc.health!r}")
            protos = set(nc.protocols if nc.protocols is not None else self.costs)
            unknown = protos - set(self.costs)
            if unknown:
                raise ConfigError(f"node {nc.id}: protocols without cost {sorted(unknown)}")
            active = nc.active_protocol or (self._cheapest(protos) if protos else None)
            if active is not None and active not in protos:
                raise ConfigError(f"node {nc.id}: active protocol {active} not supported")
            self.nodes[nc.id] = NodeState(
                nc.id, nc.stage, nc.health, nc.replica_of, None, nc.recoverable, protos, active,
                dict(nc.cache), bytes.fromhex(nc.key) if nc.key else default_key(nc.id))
        for n in self.nodes.values():
            if n.is_replica_of is not None and n.is_replica_of not in self.nodes:
                raise ConfigError(f"node {n.id}: replica of unknown node {n.is_replica_of}")
        trusted = config.trust if config.trust is not None else list(self.nodes)
        self.trust_store = {nid: self.key_of(nid) for nid in trusted}
        self.jobs: dict[str, Job] = {}
        self.channels: dict[str, list] = {}
        self.stimuli: list[str] = []
        self.warnings: list[str] = []

    @classmethod
    def from_file(cls, path, seed: int = 0) -> "PipelineWorld":
        return cls(WorldConfig.load(Path(path)), seed)

    def key_of(self, node_id: str) -> bytes:
        n = self.nodes.get(node_id)
        return n.key if n is not None else default_key(node_id)

    def node(self, node_id: str) -> NodeState:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise SimError(f"unknown node {node_id!r}") from None

    def stage_nodes(self, stage: str) -> list[NodeState]:
        if stage not in self.stages:
            raise SimError(f"unknown stage {stage!r}")
        return sorted((n for n in self.nodes.values() if n.stage == stage), key=lambda n: n.id)

    # -- counts --

    def get_failed_nodes(self, stage: str) -> int:
        return sum(1 for n in self.stage_nodes(stage) if n.counted and n.health == "failed")

    def get_problematic_nodes(self, stage: str) -> int:
        return sum(1 for n in self.stage_nodes(stage) if n.counted and n.health == "problematic")

    def first_node(self, stage: str, health: str) -> str:
        for n in self.stage_nodes(stage):
            if n.counted and n.health == health:
                return n.id
        raise PreconditionError(f"no {health} node in stage {stage}")

    # -- repair --

    def run_node_replica(self, node_id: str) -> str:
        n = self.node(node_id)
        if n.health != "failed" or not n.counted:
            raise PreconditionError(f"node {node_id} is not a failed working node")
        spares = [r for r in self.stage_nodes(n.stage)
                  if r.is_replica_of == node_id and r.health == "healthy"]
        if not spares:
            raise NoReplicaError(f"no replica available for {node_id}")
        r = spares[0]
        r.is_replica_of = None
        n.replaced_by = r.id
        for job in self.jobs.values():
            if job.node == node_id:
                job.node = r.id
        return r.id

    def recover_node(self, node_id: str) -> None:
        n = self.node(node_id)
        if n.health != "problematic" or not n.counted:
            raise PreconditionError(f"node {node_id} is not problematic")
        if not n.recoverable:
            n.health = "failed"
            raise UnrecoverableError(f"node {node_id} cannot be recovered")
        n.health = "healthy"

    # -- security --

    def sign(self, sender: str, payload: bytes, forged: bool = False) -> ProxyCertificate:
        k = forged_key(sender) if forged else self.key_of(sender)
        return ProxyCertificate(sender, self.scheme.sign(k, sender, payload))

    def check_node_certificate(self, cert: Optional[ProxyCertificate], payload: bytes) -> bool:
        if cert is None:
            return False
        k = self.trust_store.get(cert.subject)
        if k is None:
            return False
        return self.scheme.verify(k, cert.subject, payload, cert.sig)

    def deliver(self, channel: str, envelope: Envelope) -> None:
        self.channels.setdefault(channel, []).append(envelope)

    # -- optimization --

    def sync_results(self, stage: str = "classification") -> None:
        nodes = [n for n in self.stage_nodes(stage) if n.counted]
        union: dict = {}
        for n in nodes:
            for pid, digest in sorted(n.result_cache.items()):
                if union.setdefault(pid, digest) != digest:
                    raise CacheConflictError(
                        f"problem {pid!r} has digests {union[pid]!r} and {digest!r}")
        for n in nodes:
            n.result_cache = dict(sorted(union.items()))

    def _cheapest(self, protos) -> str:
        return min(protos, key=lambda p: (self.costs[p], p))

    def select_protocol(self, node_id: str) -> str:
        n = self.node(node_id)
        peers = [p for p in self.stage_nodes(n.stage) if p.counted]
        common = set(n.supported_protocols)
        for p in peers:
            common &= p.supported_protocols
        if not common:
            msg = f"no protocol common to {node_id} and its peers; keeping {n.active_protocol}"
            self.warnings.append(msg)
            raise NoCommonProtocolError(msg)
        n.active_protocol = self._cheapest(common)
        return n.active_protocol

    # -- faults --

    def fail_node(self, node_id: str):
        self.node(node_id).health = "failed"

    def degrade_node(self, node_id: str):
        self.node(node_id).health = "problematic"

    def restore_node(self, node_id: str):
        self.node(node_id).health = "healthy"

    def mark_unrecoverable(self, node_id: str):
        self.node(node_id).recoverable = False

    def block_protocol(self, proto: str):
        if proto not in self.costs:
            raise SimError(f"unknown protocol {proto!r}")
        for n in self.nodes.values():
            n.supported_protocols.discard(proto)
            if n.active_protocol == proto:
                n.active_protocol = self._cheapest(n.supported_protocols) if n.supported_protocols else None

    def enter_stage(self, stage: str):
        ev = self.config.stage_events.get(stage)
        if ev is None:
            raise SimError(f"stage {stage!r} has no entry event")
        self.stimuli.append(ev)

    def submit_job(self, job_id: str):
        if job_id in self.jobs:
            raise SimError(f"duplicate job {job_id!r}")
        self.jobs[job_id] = Job(job_id)

    def poll_stimuli(self) -> list[str]:
        out, self.stimuli = self.stimuli, []
        return out

    # -- time --

    def _assign(self, stage: str) -> Optional[NodeState]:
        ok = [n for n in self.stage_nodes(stage) if n.eligible]
        if not ok:
            return None
        if self.config.assignment == "random":
            return self.rng.choice(ok)
        healthy = [n for n in ok if n.health == "healthy"]
        return (healthy or ok)[0]

    def advance(self) -> None:
        for job in self.jobs.values():
            if job.status == "done":
                continue
            stage = self.stages[job.stage_index]
            n = self._assign(stage)
            if n is None:
                job.status, job.node = "stalled", None
                continue
            job.status, job.node = "in-stage", n.id
            job.work += 2 if n.health == "healthy" else 1
            if job.work < WORK_PER_STAGE:
                continue
            job.work = 0
            if job.stage_index == len(self.stages) - 1:
                job.status, job.node = "done", None
                n.result_cache[job.id] = hashlib.sha256(job.id.encode()).hexdigest()[:16]
            else:
                job.stage_index += 1
                job.status, job.node = "queued", None
                ev = self.config.stage_events.get(self.stages[job.stage_index])
                if ev is not None:
                    self.stimuli.append(ev)
        self.clock += 1
