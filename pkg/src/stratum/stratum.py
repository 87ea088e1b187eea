"""A single intelligence layer instance: wires repository, interpreter, management and the four interfaces."""

from __future__ import annotations

import logging
import random
from typing import Callable, Iterable, Mapping

from stratum.eastbound import PEER_TO_PEER, DomainDescriptor, DomainKind, Eastbound
from stratum.errors import (
    LinkDown,
    NotAssociated,
    PeerRejected,
    PolicyRevoked,
    PolicyVeto,
    RemoteUnavailable,
    Timeout,
    TransferFailed,
)
from stratum.interpreter.engine import ActorsEngine
from stratum.management import Action, Decision, Effect, ManagementEngine, MetricSample, Request, ViolationKind
from stratum.model.signing import Principal
from stratum.model.types import ActorManifest, Kind, Role, TrustStore
from stratum.model.values import Value
from stratum.net import Envelope, SimNetwork
from stratum.repository import Repository
from stratum.southbound import DeviceManager, HardwareClass
from stratum.westbound import Westbound

log = logging.getLogger(__name__)

WESTBOUND_KINDS = frozenset({"OfferSet", "PackageResponse", "DataBundle"})
EASTBOUND_KINDS = frozenset({
    "Propose", "Accept", "Counter", "Reject", "NonceChallenge", "NonceProof",
    "Redeploy", "RedeployAck", "Invoke", "Result", "MetricsGossip",
})


def merge_decisions(*decisions: Decision) -> Decision:
    """DENY wins; otherwise CONSTRAIN limits are intersected (the tighter cap per key)."""
    limits: dict[str, float] = {}
    constrained = False
    for d in decisions:
        if d.effect is Effect.DENY:
            return d
        if d.effect is Effect.CONSTRAIN:
            constrained = True
            for k, v in d.limits.items():
                limits[k] = min(v, limits.get(k, v))
    last = decisions[-1]
    return Decision(Effect.CONSTRAIN if constrained else Effect.PERMIT, last.rule_id, limits, last.policy_version)


class Stratum:
    def __init__(
        self,
        principal: Principal,
        hardware_class: HardwareClass | str = HardwareClass.CPU,
        mem_units: int = 64,
        compute_units: int = 4,
        features: Iterable[str] = ("dsl-1",),
        software: Iterable[str] = (),
        topologies: Iterable[str] = (PEER_TO_PEER,),
        timeout: int = 10,
        gossip_period: int = 5,
        directory=None,
        seed: int = 0,
    ) -> None:
        self.principal = principal
        self.node_id = principal.principal_id
        self.trust = TrustStore()
        self.management = ManagementEngine()
        self.net: SimNetwork | None = None
        self._clock = 0
        self.rng = random.Random(f"{seed}|{self.node_id}")
        self.repository = Repository(directory, authority=self.management, clock=self.now)
        self.device = DeviceManager(self.node_id, hardware_class, mem_units, compute_units, features, software,
                                    metrics_sink=self.management.record_metric)
        self.engine = ActorsEngine(self.repository.resolve, self._payload_of)
        self.westbound = Westbound(self, timeout)
        self.eastbound = Eastbound(self, topologies, timeout, gossip_period)
        self.suspended: set[str] = set()
        self.local_trace: list[dict] = []
        self.max_wait = 4 * timeout + 4
        self._suspension_listeners: list[Callable[[str, bool, int], None]] = []
        from stratum.northbound import Northbound  # northbound reaches back into the node

        self.northbound = Northbound(self)

    @property
    def identity(self):
        return self.principal.identity

    # -- plumbing ------------------------------------------------------------

    def attach(self, net: SimNetwork) -> None:
        self.net = net
        net.add_node(self)

    def now(self) -> int:
        return self.net.now if self.net is not None else self._clock

    def trace(self, event: str, **fields) -> None:
        if self.net is not None:
            self.net.record(event, node=self.node_id, **fields)
        else:
            self.local_trace.append({"tick": self._clock, "event": event, "node": self.node_id, **fields})

    def send(self, recipient: str, kind: str, body: dict, cid: str) -> None:
        env = Envelope(kind, self.node_id, recipient, cid, body).signed(self.principal)
        if self.net is None:
            self.trace("drop", reason="detached", kind=kind, to=recipient)
            return
        self.net.send(env)

    def run_until(self, predicate: Callable[[], bool], max_ticks: int | None = None) -> bool:
        if self.net is None:
            return predicate()
        return self.net.run_until(predicate, self.max_wait if max_ticks is None else max_ticks)

    def receive(self, env: Envelope) -> None:
        if env.recipient != self.node_id or not env.verify_sender(self.trust):
            self.trace("reject", kind=env.kind, sender=env.sender, reason="BadSender")
            return
        if env.kind in WESTBOUND_KINDS:
            self.westbound.handle(env)
        elif env.kind in EASTBOUND_KINDS:
            self.eastbound.handle(env)
        else:
            self.trace("ignored", kind=env.kind, sender=env.sender)

    def on_tick(self, now: int) -> None:
        self._clock = now
        self.device.run_probes(now)
        for v in self.management.tick_watchdogs(now):
            self.trace("watchdog", watch=v.watch_id, action=v.kind.value, actor=v.actor_id)
            if v.kind is ViolationKind.SUSPEND and v.actor_id:
                self.suspend(v.actor_id)
        self.westbound.on_tick(now)
        self.eastbound.on_tick(now)

    def advance(self, ticks: int = 1) -> None:
        """Standalone clock (no network attached)."""
        if self.net is not None:
            self.net.advance(ticks)
            return
        for _ in range(ticks):
            self.on_tick(self._clock + 1)

    def trust_identity(self, identity) -> None:
        self.trust.add(identity)

    # -- suspension ---------------------------------------------------------

    def on_suspension(self, listener: Callable[[str, bool, int], None]) -> None:
        self._suspension_listeners.append(listener)

    def suspend(self, actor_id: str) -> None:
        if actor_id in self.suspended:
            return
        self.suspended.add(actor_id)
        self.trace("suspend", actor=actor_id)
        for listener in list(self._suspension_listeners):
            listener(actor_id, True, self.now())

    def resume(self, actor_id: str) -> None:
        if actor_id not in self.suspended:
            return
        self.suspended.discard(actor_id)
        self.trace("resume", actor=actor_id)
        for listener in list(self._suspension_listeners):
            listener(actor_id, False, self.now())

    # -- execution ----------------------------------------------------------

    def _payload_of(self, manifest: ActorManifest) -> bytes:
        return self.repository.payload(manifest.actor_id, manifest.version)

    def record_metric(self, name: str, value: float) -> None:
        self.management.record_metric(MetricSample(name, value, self.now()))

    def local_domain(self) -> DomainDescriptor:
        m = self.management.snapshot_metrics()
        load = m.get("cpu_load", 0.0)
        if "mem_pressure" in m:
            mem = m["mem_pressure"]
        else:
            used, _ = self.device.reserved()
            total = self.device.report.mem_units
            mem = used / total if total else 0.0
        return DomainDescriptor(self.node_id, DomainKind.LOCAL, 0.0, load, mem, self.device.report)

    def list_domains(self) -> list[DomainDescriptor]:
        return self.eastbound.list_domains()

    def placement_check(self, app_id: str | None) -> Callable[[str, ActorManifest, DomainDescriptor], Decision]:
        def check(node_id: str, manifest: ActorManifest, d: DomainDescriptor) -> Decision:
            base = dict(app_id=app_id, actor_id=manifest.actor_id, tags=manifest.tags,
                        data_classes=manifest.data_classes)
            if d.kind is DomainKind.LOCAL:
                return self.management.decide(Request(Action.LOCAL_EXECUTE, domain="local", **base))
            if manifest.kind is Kind.FGIS:
                # nested compositions run where their parent runs
                return Decision(Effect.DENY, None)
            return merge_decisions(
                self.management.decide(Request(Action.REMOTE_EXECUTE, domain=d.kind.value, **base)),
                self.management.decide(Request(Action.OUTBOUND_DATA, domain=d.kind.value, **base)),
            )

        return check

    def dispatch(self, domain_id: str, node_id: str, manifest: ActorManifest, inputs: Mapping[str, Value],
                 cid: str) -> Mapping[str, Value]:
        if domain_id == self.node_id or domain_id == "local":
            return self.engine.run_local(manifest, inputs)
        key = (domain_id, manifest.actor_id, manifest.version)
        eb = self.eastbound
        try:
            handle = eb.handles.get(key) or eb.redeploy(manifest.actor_id, manifest.version, domain_id)
            self.trace("dispatch", node_id=node_id, domain=domain_id, cid=cid)
            return eb.remote_invoke(handle, inputs)
        except PolicyVeto as exc:
            raise PolicyRevoked(f"{domain_id} vetoed node {node_id!r}: {exc}") from exc
        except (LinkDown, Timeout, TransferFailed, NotAssociated, PeerRejected) as exc:
            raise RemoteUnavailable(domain_id, f"{type(exc).__name__}: {exc}") from exc

    # -- wiring helpers -----------------------------------------------------

    def trusts(self, *identities) -> "Stratum":
        for ident in identities:
            self.trust.add(ident)
        return self


def make_stratum(node_id: str, seed: int = 0, key_seed: int = 0, **kwargs) -> Stratum:
    return Stratum(Principal.derive(node_id, Role.PEER_STRATUM, key_seed), seed=seed, **kwargs)
