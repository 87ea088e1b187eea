"""Peer stratum association, topology negotiation, actor redeployment and remote invocation."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Mapping

from stratum.errors import (
    AssocError,
    BadNonceSignature,
    DecodeError,
    Denied,
    DuplicateVersion,
    LinkDown,
    NodeEvalError,
    NoCommonTopology,
    NotAssociated,
    PeerRejected,
    PolicyVeto,
    RemoteError,
    StratumError,
    Timeout,
    TransferFailed,
    UntrustedPeer,
    VerificationError,
)
from stratum.management import Action, Request
from stratum.model import codec
from stratum.model.signing import verify, verify_package
from stratum.model.types import ActorPackage, Role
from stratum.model.values import Value
from stratum.net import Envelope
from stratum.repository import Cause
from stratum.southbound import CapabilityReport, admissible

if TYPE_CHECKING:
    from stratum.stratum import Stratum

log = logging.getLogger(__name__)

PEER_TO_PEER = "peer_to_peer"
MASTER_SLAVE = "master_slave"


def master_of(topology: str) -> str | None:
    kind, _, master = topology.partition(":")
    return master if kind == MASTER_SLAVE else None


def absolute_topology(relative: str, self_id: str, peer_id: str) -> str:
    """``master_slave:self`` / ``master_slave:peer`` -> ``master_slave:<id>``."""
    if relative == PEER_TO_PEER:
        return relative
    kind, _, who = relative.partition(":")
    if kind != MASTER_SLAVE or who not in ("self", "peer"):
        raise ValueError(f"unknown topology {relative!r}")
    return f"{MASTER_SLAVE}:{self_id if who == 'self' else peer_id}"


class AssocState(str, Enum):
    UNASSOCIATED = "UNASSOCIATED"
    PROPOSED = "PROPOSED"
    COUNTERED = "COUNTERED"
    TRUSTED = "TRUSTED"
    ASSOCIATED = "ASSOCIATED"
    REVOKED = "REVOKED"


A = AssocState
ASSOC_LEGAL: frozenset[tuple[AssocState, AssocState]] = frozenset(
    {
        (A.UNASSOCIATED, A.PROPOSED),
        (A.PROPOSED, A.COUNTERED),
        (A.PROPOSED, A.TRUSTED),
        (A.COUNTERED, A.TRUSTED),
        (A.TRUSTED, A.ASSOCIATED),
        (A.PROPOSED, A.UNASSOCIATED),
        (A.COUNTERED, A.UNASSOCIATED),
        (A.REVOKED, A.UNASSOCIATED),  # operator reset only
    }
    | {(s, A.REVOKED) for s in AssocState if s is not A.REVOKED}
)

HANDSHAKE_KINDS = frozenset({"Propose", "Accept", "Counter", "Reject", "NonceChallenge", "NonceProof"})


class DomainKind(str, Enum):
    LOCAL = "local"
    PEER = "peer"
    REMOTE = "remote"


@dataclass(frozen=True)
class DomainDescriptor:
    domain_id: str
    kind: DomainKind
    latency: float
    load: float
    mem_pressure: float
    capability: CapabilityReport
    peer_id: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", DomainKind(self.kind))
        object.__setattr__(self, "load", min(max(float(self.load), 0.0), 1.0))
        object.__setattr__(self, "mem_pressure", min(max(float(self.mem_pressure), 0.0), 1.0))
        object.__setattr__(self, "latency", float(self.latency))


@dataclass
class PeerAssociation:
    peer_id: str
    state: AssocState = AssocState.UNASSOCIATED
    topology: str | None = None
    initiator: bool = False
    kind: DomainKind = DomainKind.PEER
    proposed: tuple[str, ...] = ()
    nonce_self: str | None = None
    nonce_peer: str | None = None
    round: int = 0
    deadline: int = 0
    failure: str | None = None
    latency: float = 0.0
    drop_rate: float = 0.0
    peer_load: float = 0.0
    peer_mem_pressure: float = 0.0
    peer_capability: CapabilityReport | None = None
    last_gossip: int | None = None
    history: list[AssocState] = field(default_factory=lambda: [AssocState.UNASSOCIATED])

    def move(self, to: AssocState) -> None:
        if (self.state, to) not in ASSOC_LEGAL:
            raise AssocError(f"association with {self.peer_id}: {self.state.value} -> {to.value} is illegal")
        self.state = to
        self.history.append(to)


@dataclass(frozen=True)
class RemoteActorHandle:
    peer_id: str
    actor_id: str
    version: int


def nonce_bytes(signer: str, other: str, nonce: str) -> bytes:
    return f"stratum-nonce|{signer}|{other}|{nonce}".encode()


class Eastbound:
    def __init__(self, stratum: "Stratum", supported: Iterable[str] = (PEER_TO_PEER,), timeout: int = 10,
                 gossip_period: int = 5) -> None:
        self.s = stratum
        self.supported = tuple(supported)
        self.timeout = timeout
        self.gossip_period = gossip_period
        self.associations: dict[str, PeerAssociation] = {}
        self.handles: dict[tuple[str, str, int], RemoteActorHandle] = {}
        self._responses: dict[str, Envelope] = {}
        self._nonces = itertools.count(1)
        self._cids = itertools.count(1)

    # -- helpers -----------------------------------------------------------

    def _assoc(self, peer_id: str) -> PeerAssociation:
        a = self.associations.get(peer_id)
        if a is None:
            a = PeerAssociation(peer_id)
            self.associations[peer_id] = a
        return a

    def _move(self, a: PeerAssociation, to: AssocState, failure: str | None = None) -> None:
        a.move(to)
        if failure is not None:
            a.failure = failure
        self.s.trace("assoc", peer=a.peer_id, state=to.value, **({"failure": failure} if failure else {}))

    def _nonce(self) -> str:
        return f"{self.s.node_id}-{self.s.rng.getrandbits(64):016x}-{next(self._nonces)}"

    def _my_topologies(self, peer_id: str) -> list[str]:
        return [absolute_topology(t, self.s.node_id, peer_id) for t in self.supported]

    def _cid(self, tag: str) -> str:
        return f"{self.s.node_id}:eb{next(self._cids)}:{tag}"

    def _send(self, peer_id: str, kind: str, body: dict, cid: str | None = None) -> str:
        cid = cid or self._cid(kind)
        self.s.send(peer_id, kind, body, cid)
        return cid

    def _link_metrics(self, a: PeerAssociation) -> None:
        net = self.s.net
        if net is not None:
            link = net.links.get((self.s.node_id, a.peer_id))
            if link is not None:
                a.latency = float(link.latency)
                a.drop_rate = link.drop

    # -- association --------------------------------------------------------

    def associate(self, peer_id: str, topologies: Iterable[str] | None = None,
                  kind: DomainKind | str = DomainKind.PEER) -> PeerAssociation:
        """Start negotiation; returns the association in PROPOSED (drive the network to finish)."""
        if self.s.trust.get(peer_id, Role.PEER_STRATUM) is None:
            raise UntrustedPeer(peer_id)
        a = self._assoc(peer_id)
        if a.state is not AssocState.UNASSOCIATED:
            raise AssocError(f"association with {peer_id} is {a.state.value}")
        rel = tuple(topologies) if topologies is not None else self.supported
        a.proposed = tuple(absolute_topology(t, self.s.node_id, peer_id) for t in rel)
        a.initiator, a.kind, a.round, a.failure, a.topology = True, DomainKind(kind), 1, None, None
        a.deadline = self.s.now() + self.timeout
        self._link_metrics(a)
        self._move(a, AssocState.PROPOSED)
        self._send(peer_id, "Propose", {"topologies": list(a.proposed), "round": 1,
                                        "capability": codec.to_doc(self.s.device.report)})
        return a

    def associate_sync(self, peer_id: str, topologies: Iterable[str] | None = None,
                       kind: DomainKind | str = DomainKind.PEER) -> PeerAssociation:
        a = self.associate(peer_id, topologies, kind)
        self.s.run_until(lambda: a.state in (AssocState.ASSOCIATED, AssocState.UNASSOCIATED, AssocState.REVOKED))
        if a.state is AssocState.ASSOCIATED:
            return a
        if a.failure == "NoCommonTopology":
            raise NoCommonTopology(peer_id)
        if a.failure == "BadNonceSignature":
            raise BadNonceSignature(peer_id)
        if a.failure == "UntrustedPeer":
            raise UntrustedPeer(peer_id)
        raise Timeout(f"association with {peer_id} did not complete")

    def reset(self, peer_id: str) -> None:
        a = self.associations.get(peer_id)
        if a is not None and a.state is AssocState.REVOKED:
            self._move(a, AssocState.UNASSOCIATED)

    def revoke(self, peer_id: str, reason: str = "revoked") -> None:
        a = self.associations.get(peer_id)
        if a is not None and a.state is not AssocState.REVOKED:
            self._move(a, AssocState.REVOKED, reason)

    def _on_propose(self, env: Envelope) -> None:
        a = self._assoc(env.sender)
        offered = [t for t in env.body.get("topologies", []) if isinstance(t, str)]
        rnd = int(env.body.get("round", 1))
        if rnd == 1 and a.state is AssocState.UNASSOCIATED:
            a.initiator, a.round, a.failure, a.topology = False, 1, None, None
            a.deadline = self.s.now() + self.timeout
            self._link_metrics(a)
            self._move(a, AssocState.PROPOSED)
        elif not (rnd == 2 and a.state is AssocState.COUNTERED and not a.initiator):
            self.s.trace("ignored", kind=env.kind, sender=env.sender, state=a.state.value)
            return
        self._absorb_capability(a, env.body.get("capability"))
        mine = self._my_topologies(env.sender)
        chosen = next((t for t in mine if t in offered), None)
        if chosen is not None:
            a.topology = chosen
            a.nonce_self = self._nonce()
            self._send(env.sender, "Accept", {"topology": chosen, "nonce": a.nonce_self,
                                              "capability": codec.to_doc(self.s.device.report)},
                       env.correlation_id)
        elif rnd == 1:
            a.round = 1
            self._move(a, AssocState.COUNTERED)
            self._send(env.sender, "Counter", {"topologies": mine}, env.correlation_id)
        else:
            self._move(a, AssocState.UNASSOCIATED, "NoCommonTopology")
            self._send(env.sender, "Reject", {"reason": "NoCommonTopology"}, env.correlation_id)

    def _on_counter(self, env: Envelope) -> None:
        a = self.associations.get(env.sender)
        if a is None or not a.initiator or a.state is not AssocState.PROPOSED or a.round != 1:
            self.s.trace("ignored", kind=env.kind, sender=env.sender)
            return
        self._move(a, AssocState.COUNTERED)
        countered = [t for t in env.body.get("topologies", []) if isinstance(t, str)]
        acceptable = [t for t in self._my_topologies(env.sender) if t in countered]
        if not acceptable:
            self._move(a, AssocState.UNASSOCIATED, "NoCommonTopology")
            self._send(env.sender, "Reject", {"reason": "NoCommonTopology"}, env.correlation_id)
            return
        a.round = 2
        a.proposed = tuple(acceptable)
        self._send(env.sender, "Propose", {"topologies": acceptable, "round": 2,
                                           "capability": codec.to_doc(self.s.device.report)}, env.correlation_id)

    def _on_reject(self, env: Envelope) -> None:
        a = self.associations.get(env.sender)
        if a is None or a.state not in (AssocState.PROPOSED, AssocState.COUNTERED):
            return
        self._move(a, AssocState.UNASSOCIATED, str(env.body.get("reason", "NoCommonTopology")))

    def _on_accept(self, env: Envelope) -> None:
        a = self.associations.get(env.sender)
        t = env.body.get("topology")
        if a is None or not a.initiator or a.state not in (AssocState.PROPOSED, AssocState.COUNTERED) \
                or t not in a.proposed or not isinstance(env.body.get("nonce"), str):
            self.s.trace("ignored", kind=env.kind, sender=env.sender)
            return
        a.topology = t
        a.nonce_peer = env.body["nonce"]
        a.nonce_self = self._nonce()
        self._absorb_capability(a, env.body.get("capability"))
        proof = self.s.principal.sign(nonce_bytes(self.s.node_id, env.sender, a.nonce_peer))
        self._send(env.sender, "NonceChallenge", {"nonce": a.nonce_self, "proof": proof.hex()}, env.correlation_id)

    def _check_proof(self, a: PeerAssociation, env: Envelope) -> bool:
        ident = self.s.trust.get(env.sender, Role.PEER_STRATUM)
        try:
            proof = codec.dec_bytes(env.body.get("proof", ""))
        except DecodeError:
            return False
        return ident is not None and a.nonce_self is not None and verify(
            nonce_bytes(env.sender, self.s.node_id, a.nonce_self), proof, ident.public_key
        )

    def _on_challenge(self, env: Envelope) -> None:
        a = self.associations.get(env.sender)
        if a is None or a.initiator or a.state not in (AssocState.PROPOSED, AssocState.COUNTERED) \
                or a.topology is None or not isinstance(env.body.get("nonce"), str):
            self.s.trace("ignored", kind=env.kind, sender=env.sender)
            return
        if not self._check_proof(a, env):
            self._move(a, AssocState.REVOKED, "BadNonceSignature")
            return
        a.nonce_peer = env.body["nonce"]
        self._move(a, AssocState.TRUSTED)
        self._move(a, AssocState.ASSOCIATED)
        proof = self.s.principal.sign(nonce_bytes(self.s.node_id, env.sender, a.nonce_peer))
        self._send(env.sender, "NonceProof", {"proof": proof.hex()}, env.correlation_id)

    def _on_proof(self, env: Envelope) -> None:
        a = self.associations.get(env.sender)
        if a is None or not a.initiator or a.state not in (AssocState.PROPOSED, AssocState.COUNTERED) \
                or a.topology is None:
            self.s.trace("ignored", kind=env.kind, sender=env.sender)
            return
        if not self._check_proof(a, env):
            self._move(a, AssocState.REVOKED, "BadNonceSignature")
            return
        self._move(a, AssocState.TRUSTED)
        self._move(a, AssocState.ASSOCIATED)

    def _absorb_capability(self, a: PeerAssociation, doc) -> None:
        if doc is None:
            return
        try:
            cap = codec.from_doc(doc)
        except DecodeError:
            return
        if isinstance(cap, CapabilityReport):
            a.peer_capability = cap

    # -- direction rule -------------------------------------------------------

    def may_offload_to_me(self, sender: str) -> bool:
        a = self.associations.get(sender)
        if a is None or a.state is not AssocState.ASSOCIATED:
            return False
        master = master_of(a.topology or PEER_TO_PEER)
        return master is None or master == sender

    # -- redeploy -----------------------------------------------------------

    def _outbound_check(self, manifest) -> None:
        for action in (Action.REMOTE_EXECUTE, Action.OUTBOUND_DATA):
            d = self.s.management.decide(Request(action, actor_id=manifest.actor_id, tags=manifest.tags,
                                                 data_classes=manifest.data_classes, domain="peer"))
            if not d.permitted:
                raise Denied(d.rule_id, f"{action.value} of {manifest.service_id} denied")

    def _await(self, cid: str, peer_id: str, timeout: int | None = None) -> Envelope:
        ok = self.s.run_until(lambda: cid in self._responses, timeout if timeout is not None else self.timeout)
        if not ok:
            raise Timeout(f"no response from {peer_id} for {cid}")
        return self._responses.pop(cid)

    def redeploy(self, actor_id: str, version: int, peer_id: str) -> RemoteActorHandle:
        a = self.associations.get(peer_id)
        if a is None or a.state is not AssocState.ASSOCIATED:
            raise NotAssociated(peer_id)
        rec = self.s.repository.get(actor_id, version)
        manifest = rec.manifest
        self._outbound_check(manifest)
        body = {
            "package": codec.to_doc(rec.package.package),
            "origin": self.s.node_id,
            "policy_version": self.s.management.policy.version,
        }
        cid = self._send(peer_id, "Redeploy", body)
        try:
            ack = self._await(cid, peer_id)
        except Timeout as exc:
            raise TransferFailed(str(exc)) from exc
        err = ack.body.get("error")
        if err == "PolicyVeto":
            raise PolicyVeto(f"{peer_id} refuses offload from {self.s.node_id}")
        if err is not None:
            raise PeerRejected(f"{peer_id}: {err}")
        handle = RemoteActorHandle(peer_id, actor_id, version)
        self.handles[(peer_id, actor_id, version)] = handle
        return handle

    def _on_redeploy(self, env: Envelope) -> None:
        def ack(body):
            self._send(env.sender, "RedeployAck", body, env.correlation_id)

        if not self.may_offload_to_me(env.sender):
            ack({"error": "PolicyVeto"})
            return
        try:
            pkg = codec.from_doc(env.body["package"])
            if not isinstance(pkg, ActorPackage):
                raise DecodeError("not a package")
        except (DecodeError, KeyError, TypeError, ValueError):
            ack({"error": "IntegrityFailure"})
            return
        try:
            verified = verify_package(pkg, self.s.trust)
        except VerificationError as exc:
            ack({"error": "IntegrityFailure", "detail": type(exc).__name__})
            return
        m = pkg.manifest
        if not admissible(m.requirements, self.s.device.report):
            ack({"error": "Inadmissible"})
            return
        existing = self.s.repository.find(m.actor_id, m.version)
        if existing is not None and existing.package is not None:
            ack({"ok": True, "actor_id": m.actor_id, "version": m.version})
            return
        try:
            token = self.s.management.authorize_lcm(Cause.SETUP, m.actor_id, m.tags, m.data_classes)
        except Denied:
            ack({"error": "PolicyRejection"})
            return
        try:
            self.s.repository.onboard(verified, redeployed_from=str(env.body.get("origin", env.sender)))
        except DuplicateVersion:
            ack({"error": "DuplicateVersion"})
            return
        self.s.repository.transition(m.actor_id, m.version, Cause.SETUP, token)
        ack({"ok": True, "actor_id": m.actor_id, "version": m.version})

    # -- remote invocation ---------------------------------------------------

    def remote_invoke(self, handle: RemoteActorHandle, inputs: Mapping[str, Value],
                      timeout: int | None = None) -> dict[str, Value]:
        a = self.associations.get(handle.peer_id)
        if a is None or a.state is not AssocState.ASSOCIATED:
            raise NotAssociated(handle.peer_id)
        net = self.s.net
        if net is not None:
            link = net.links.get((self.s.node_id, handle.peer_id))
            if link is None or not link.up:
                raise LinkDown(handle.peer_id)
        cid = self._send(handle.peer_id, "Invoke", {
            "actor_id": handle.actor_id, "version": handle.version, "inputs": codec.values_doc(dict(inputs))})
        res = self._await(cid, handle.peer_id, timeout)
        err = res.body.get("error")
        if err == "PolicyVeto":
            raise PolicyVeto(f"{handle.peer_id} vetoed {handle.actor_id}@{handle.version}")
        if err == "NodeEvalError":
            inner = RemoteError(str(res.body.get("detail", "")))
            raise NodeEvalError(f"{handle.peer_id}:{handle.actor_id}", inner)
        if err is not None:
            raise RemoteError(f"{handle.peer_id}: {err}")
        return codec.values_from(res.body["outputs"])

    def _on_invoke(self, env: Envelope) -> None:
        def result(body):
            self._send(env.sender, "Result", body, env.correlation_id)

        if not self.may_offload_to_me(env.sender):
            result({"error": "PolicyVeto"})
            return
        try:
            actor_id, version = str(env.body["actor_id"]), int(env.body["version"])
            inputs = codec.values_from(env.body["inputs"])
        except (DecodeError, KeyError, TypeError, ValueError):
            result({"error": "Malformed"})
            return
        rec = self.s.repository.find(actor_id, version)
        if rec is None or rec.lcm_state.value not in ("READY", "ACTIVE"):
            result({"error": "UnknownActor"})
            return
        m = rec.manifest
        d = self.s.management.decide(Request(Action.LOCAL_EXECUTE, app_id=env.sender, actor_id=actor_id,
                                             tags=m.tags, data_classes=m.data_classes, domain="local"))
        if not d.permitted or actor_id in self.s.suspended:
            result({"error": "PolicyVeto"})
            return
        try:
            outputs = self.s.engine.run_local(m, inputs)
        except StratumError as exc:
            result({"error": "NodeEvalError", "detail": f"{type(exc).__name__}: {exc}"})
            return
        result({"outputs": codec.values_doc(outputs)})

    # -- domains & gossip ------------------------------------------------------

    def list_domains(self) -> list[DomainDescriptor]:
        out = [self.s.local_domain()]
        for pid in sorted(self.associations):
            a = self.associations[pid]
            if a.state is not AssocState.ASSOCIATED or a.peer_capability is None:
                continue
            self._link_metrics(a)
            out.append(DomainDescriptor(pid, a.kind, a.latency, a.peer_load, a.peer_mem_pressure,
                                        a.peer_capability, pid))
        return out

    def _on_gossip(self, env: Envelope) -> None:
        a = self.associations[env.sender]
        try:
            a.peer_load = codec.dec_decimal(env.body["load"])
            a.peer_mem_pressure = codec.dec_decimal(env.body["mem_pressure"])
        except (DecodeError, KeyError):
            return
        self._absorb_capability(a, env.body.get("capability"))
        a.last_gossip = self.s.now()

    def on_tick(self, now: int) -> None:
        for pid in sorted(self.associations):
            a = self.associations[pid]
            if a.state in (AssocState.PROPOSED, AssocState.COUNTERED) and now >= a.deadline:
                self._move(a, AssocState.UNASSOCIATED, "Timeout")
        if self.gossip_period > 0 and now % self.gossip_period == 0:
            local = self.s.local_domain()
            for pid in sorted(self.associations):
                if self.associations[pid].state is AssocState.ASSOCIATED:
                    self._send(pid, "MetricsGossip", {
                        "load": codec.enc_decimal(local.load),
                        "mem_pressure": codec.enc_decimal(local.mem_pressure),
                        "capability": codec.to_doc(self.s.device.report)})

    def handle(self, env: Envelope) -> None:
        if env.kind in HANDSHAKE_KINDS:
            if self.s.trust.get(env.sender, Role.PEER_STRATUM) is None:
                self.s.trace("reject", kind=env.kind, sender=env.sender, reason="UntrustedPeer")
                return
            a = self.associations.get(env.sender)
            if a is not None and a.state is AssocState.REVOKED:
                self.s.trace("reject", kind=env.kind, sender=env.sender, reason="Revoked")
                return
            try:
                {
                    "Propose": self._on_propose,
                    "Accept": self._on_accept,
                    "Counter": self._on_counter,
                    "Reject": self._on_reject,
                    "NonceChallenge": self._on_challenge,
                    "NonceProof": self._on_proof,
                }[env.kind](env)
            except (KeyError, TypeError, ValueError, AttributeError) as exc:
                self.s.trace("malformed", kind=env.kind, sender=env.sender, error=type(exc).__name__)
            return
        a = self.associations.get(env.sender)
        if a is None or a.state is not AssocState.ASSOCIATED:
            self.s.trace("reject", kind=env.kind, sender=env.sender, reason="NotAssociated")
            return
        if env.kind in ("RedeployAck", "Result"):
            self._responses[env.correlation_id] = env
        elif env.kind == "Redeploy":
            self._on_redeploy(env)
        elif env.kind == "Invoke":
            self._on_invoke(env)
        elif env.kind == "MetricsGossip":
            self._on_gossip(env)
        else:
            self.s.trace("ignored", kind=env.kind, sender=env.sender)
