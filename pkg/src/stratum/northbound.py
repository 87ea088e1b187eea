"""Application-facing exposure: sessions, local discovery, invocation, operator policy, update events."""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping

from stratum.discovery import ServiceQuery, signature_satisfies, tag_overlap, tags_satisfy
from stratum.errors import (
    DecodeError,
    Denied,
    InvalidSession,
    Suspended,
    StratumError,
    UnknownActor,
    UnknownService,
    UnresolvedActor,
)
from stratum.interpreter.engine import execute_plan
from stratum.interpreter.placement import plan_placement, within_limits
from stratum.management import Action, Effect, Request, parse_policy
from stratum.model import codec
from stratum.model.signing import Principal, verify
from stratum.model.types import AT_LEAST_ONE, ActorManifest, Kind, Port, Role, VersionConstraint
from stratum.model.values import Value
from stratum.repository import Cause, LcmState, TransitionLogEntry

if TYPE_CHECKING:
    from stratum.stratum import Stratum

RELATIONS = ("invoke", "describe", "subscribe")


@dataclass(frozen=True)
class AppSession:
    session_id: str
    app_id: str
    operator: bool = False


@dataclass(frozen=True)
class ServiceDescriptor:
    service_id: str
    actor_id: str
    version: int
    tags: frozenset[str]
    input_ports: tuple[Port, ...]
    output_ports: tuple[Port, ...]
    links: tuple[tuple[str, str], ...]

    def doc(self) -> dict:
        return {
            "service_id": self.service_id,
            "tags": sorted(self.tags),
            "inputs": [[p.name, p.type.value] for p in self.input_ports],
            "outputs": [[p.name, p.type.value] for p in self.output_ports],
            "links": [list(link) for link in self.links],
        }


@dataclass(frozen=True)
class UpdateEvent:
    seq: int
    tick: int
    kind: str  # UPDATED | DEPRECATED | SUSPENDED | RESUMED | LCM:<cause>
    actor_id: str
    version: int | None

    def doc(self) -> dict:
        return {"seq": self.seq, "tick": self.tick, "kind": self.kind, "actor_id": self.actor_id,
                "version": self.version}


@dataclass
class EventStream:
    actor_id: str
    events: list[UpdateEvent] = field(default_factory=list)

    def lines(self) -> list[bytes]:
        return [codec.dumps_doc(e.doc()) for e in self.events]

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(list(self.events))


def operator_bytes(node_id: str, operator_id: str) -> bytes:
    return f"stratum-operator|{node_id}|{operator_id}".encode()


def operator_credentials(principal: Principal, node_id: str) -> bytes:
    return principal.sign(operator_bytes(node_id, principal.principal_id))


def split_service_id(service_id: str) -> tuple[str, VersionConstraint]:
    actor_id, sep, version = service_id.partition("@")
    if not actor_id:
        raise UnknownService(service_id)
    if not sep:
        return actor_id, AT_LEAST_ONE
    try:
        return actor_id, VersionConstraint("==", int(version))
    except ValueError as exc:
        raise UnknownService(service_id) from exc


def event_kind(cause: Cause) -> str:
    if cause is Cause.UPDATE_COMMIT:
        return "UPDATED"
    if cause is Cause.DEPRECATE:
        return "DEPRECATED"
    return f"LCM:{cause.value}"


class Northbound:
    def __init__(self, stratum: "Stratum") -> None:
        self.s = stratum
        self.sessions: dict[str, AppSession] = {}
        self._ids = itertools.count(1)
        self._calls = itertools.count(1)
        self._streams: list[EventStream] = []
        self._seq = itertools.count(1)
        self._configure_lock = threading.Lock()
        stratum.repository.subscribe(self._on_transition)
        stratum.on_suspension(self._on_suspension)

    # -- sessions ------------------------------------------------------------

    def register_app(self, app_id: str, credentials: bytes = b"") -> AppSession:
        if not app_id:
            raise ValueError("app_id must be non-empty")
        d = self.s.management.decide(Request(Action.EXPOSE_SERVICE, app_id=app_id))
        if not d.permitted:
            raise Denied(d.rule_id, f"app {app_id!r} may not use exposed services")
        session = AppSession(f"{app_id}#{next(self._ids)}", app_id)
        self.sessions[session.session_id] = session
        return session

    def operator_session(self, operator_id: str, credentials: bytes) -> AppSession:
        ident = self.s.trust.get(operator_id, Role.OPERATOR)
        if ident is None or not verify(operator_bytes(self.s.node_id, operator_id), credentials, ident.public_key):
            raise Denied(None, f"operator {operator_id!r} credentials do not verify")
        session = AppSession(f"{operator_id}#op{next(self._ids)}", operator_id, True)
        self.sessions[session.session_id] = session
        return session

    def _session(self, session: AppSession | str) -> AppSession:
        sid = session.session_id if isinstance(session, AppSession) else session
        found = self.sessions.get(sid)
        if found is None:
            raise InvalidSession(str(sid))
        return found

    # -- discovery -------------------------------------------------------------

    def _descriptor(self, m: ActorManifest) -> ServiceDescriptor:
        sid = m.service_id
        links = tuple((rel, f"nb://{self.s.node_id}/{sid}/{rel}") for rel in RELATIONS)
        return ServiceDescriptor(sid, m.actor_id, m.version, m.tags, m.input_ports, m.output_ports, links)

    def discover(self, session: AppSession | str, q: ServiceQuery) -> list[ServiceDescriptor]:
        self._session(session)
        hits = [
            r.manifest
            for r in self.s.repository.records()
            if r.lcm_state is LcmState.ACTIVE
            and tags_satisfy(q.required_tags, r.manifest.tags)
            and signature_satisfies(q, r.manifest.input_ports, r.manifest.output_ports)
        ]
        hits.sort(key=lambda m: (-tag_overlap(q.required_tags, m.tags), m.service_id))
        return [self._descriptor(m) for m in hits[: q.max_results]]

    def describe(self, session: AppSession | str, service_id: str) -> dict:
        self._session(session)
        actor_id, constraint = split_service_id(service_id)
        try:
            rec = self.s.repository.resolve_record(actor_id, constraint)
        except (UnknownActor, UnresolvedActor) as exc:
            raise UnknownService(service_id) from exc
        return {"descriptor": self._descriptor(rec.manifest).doc(), "manifest": codec.to_doc(rec.manifest)}

    # -- invocation --------------------------------------------------------------

    def _resolve_active(self, service_id: str, constraint: VersionConstraint | str | None) -> ActorManifest:
        actor_id, pinned = split_service_id(service_id)
        if constraint is not None:
            pinned = VersionConstraint.parse(constraint) if isinstance(constraint, str) else constraint
        candidates = [
            r for r in self.s.repository.records(actor_id)
            if r.lcm_state is LcmState.ACTIVE and pinned.satisfied_by(r.version)
        ]
        if not candidates:
            raise UnknownService(service_id)
        return max(candidates, key=lambda r: r.version).manifest

    def invoke(self, session: AppSession | str, service_id: str, inputs: Mapping[str, Value],
               constraint: VersionConstraint | str | None = None) -> dict[str, Value]:
        sess = self._session(session)
        m = self._resolve_active(service_id, constraint)
        if m.actor_id in self.s.suspended:
            raise Suspended(m.service_id)
        d = self.s.management.decide(Request(Action.LOCAL_EXECUTE, app_id=sess.app_id, actor_id=m.actor_id,
                                             tags=m.tags, data_classes=m.data_classes, domain="local"))
        if not d.permitted:
            raise Denied(d.rule_id, f"{sess.app_id!r} may not execute {m.service_id}")
        if m.requires_support_data and not self.s.westbound.readable_bundles(m):
            raise Denied(None, f"{m.service_id} needs readable support data and none is held")
        bound = dict(self.s.westbound.bundle_inputs(m))
        bound.update(inputs)
        if m.kind is Kind.AIS:
            local = self.s.local_domain()
            if d.effect is Effect.CONSTRAIN and not within_limits(m.requirements, local, d.limits):
                raise Denied(d.rule_id, f"{m.service_id} exceeds the limits of rule {d.rule_id!r}")
            reservation = self.s.device.reserve(m.requirements, sess.app_id,
                                                d.limits if d.effect is Effect.CONSTRAIN else None)
            try:
                return self.s.engine.run_local(m, bound)
            finally:
                self.s.device.release(reservation)
        plan = self.s.engine.plan(m)
        placement = plan_placement(plan, self.s.list_domains(), self.s.placement_check(sess.app_id),
                                   limits=d.limits if d.effect is Effect.CONSTRAIN else None)
        self.s.trace("placement", service=m.service_id,
                     assignment={k: placement.assignment[k] for k in sorted(placement.assignment)})
        root = m.actor_id

        def veto(node_id: str, node: ActorManifest) -> bool:
            return root in self.s.suspended or node.actor_id in self.s.suspended

        prefix = f"{sess.session_id}:{next(self._calls)}:"
        wanted = {p.name: bound[p.name] for p in plan.exposed_inputs if p.name in bound}
        return execute_plan(plan, wanted, placement, self.s.dispatch, veto, prefix)

    # -- operator ------------------------------------------------------------

    def configure(self, session: AppSession | str, policy: bytes | str) -> int:
        sess = self._session(session)
        if not sess.operator:
            raise Denied(None, f"session {sess.session_id!r} is not an operator session")
        with self._configure_lock:
            rules = parse_policy(policy)
            version = self.s.management.policy.configure(rules)
        self.s.trace("policy", version=version)
        return version

    # -- update events -----------------------------------------------------------

    def subscribe_updates(self, session: AppSession | str, service_id: str) -> EventStream:
        self._session(session)
        actor_id, _ = split_service_id(service_id)
        if not self.s.repository.records(actor_id):
            raise UnknownService(service_id)
        stream = EventStream(actor_id)
        self._streams.append(stream)
        return stream

    def _emit(self, actor_id: str, kind: str, version: int | None, tick: int) -> None:
        for stream in self._streams:
            if stream.actor_id == actor_id:
                stream.events.append(UpdateEvent(next(self._seq), tick, kind, actor_id, version))

    def _on_transition(self, entry: TransitionLogEntry) -> None:
        cause = entry.transition.cause
        version = entry.version
        if cause is Cause.UPDATE_COMMIT:
            active = [r.version for r in self.s.repository.records(entry.actor_id) if r.lcm_state is LcmState.ACTIVE]
            version = max(active, default=entry.version)
        self._emit(entry.actor_id, event_kind(cause), version, entry.tick)

    def _on_suspension(self, actor_id: str, suspended: bool, tick: int) -> None:
        self._emit(actor_id, "SUSPENDED" if suspended else "RESUMED", None, tick)

    # -- line transport --------------------------------------------------------

    def handle_request(self, line: bytes) -> bytes:
        """One canonical request line {op, session, body, correlation_id} -> one response line."""
        cid = None
        try:
            req = codec.loads(line)
            if not isinstance(req, dict):
                raise DecodeError("request must be an object")
            cid = req.get("correlation_id")
            body = req.get("body") or {}
            result = self._dispatch(str(req["op"]), req.get("session"), body)
            resp = {"correlation_id": cid, "ok": True, "body": result}
        except (StratumError, KeyError, TypeError, ValueError) as exc:
            resp = {"correlation_id": cid, "ok": False, "error": {"type": type(exc).__name__, "message": str(exc)}}
        return codec.dumps_doc(resp)

    def _dispatch(self, op: str, session, body: dict):
        if op == "register_app":
            return {"session": self.register_app(str(body["app_id"])).session_id}
        if op == "operator_session":
            s = self.operator_session(str(body["operator_id"]), codec.dec_bytes(body["credentials"]))
            return {"session": s.session_id}
        if op == "discover":
            q = codec.from_doc(body["query"])
            return {"services": [d.doc() for d in self.discover(session, q)]}
        if op == "describe":
            return self.describe(session, str(body["service_id"]))
        if op == "invoke":
            out = self.invoke(session, str(body["service_id"]), codec.values_from(body["inputs"]),
                              body.get("constraint"))
            return {"outputs": codec.values_doc(out)}
        if op == "configure":
            return {"version": self.configure(session, str(body["policy"]))}
        if op == "subscribe_updates":
            stream = self.subscribe_updates(session, str(body["service_id"]))
            return {"actor_id": stream.actor_id}
        raise KeyError(f"unknown op {op!r}")
