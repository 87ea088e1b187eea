"""Intelligence LCM exposure: broker handshake, provisioning, updates, and data ingestion."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Mapping

from stratum.broker import Endpoint, Offer, offer_rank_key
from stratum.discovery import ServiceQuery
from stratum.errors import (
    BadSignature,
    DecodeError,
    Denied,
    DuplicateVersion,
    IllegalState,
    IndexOutOfRange,
    NoMatchingActor,
    NoTrustedBroker,
    StratumError,
    UnresolvedActor,
    VerificationError,
)
from stratum.management import Action, Request
from stratum.model import codec
from stratum.model.signing import Principal, verify, verify_package
from stratum.model.types import ActorManifest, ActorPackage, Role
from stratum.model.values import Value
from stratum.net import Envelope
from stratum.repository import Cause, LcmState

if TYPE_CHECKING:
    from stratum.stratum import Stratum

log = logging.getLogger(__name__)


class HsState(str, Enum):
    IDLE = "IDLE"
    QUERIED = "QUERIED"
    OFFERED = "OFFERED"
    SELECTED = "SELECTED"
    PROVISIONING = "PROVISIONING"
    VERIFYING = "VERIFYING"
    ONBOARDED = "ONBOARDED"
    FAILED = "FAILED"


HS_FORWARD = {
    HsState.IDLE: HsState.QUERIED,
    HsState.QUERIED: HsState.OFFERED,
    HsState.OFFERED: HsState.SELECTED,
    HsState.SELECTED: HsState.PROVISIONING,
    HsState.PROVISIONING: HsState.VERIFYING,
    HsState.VERIFYING: HsState.ONBOARDED,
}
HS_TERMINAL = frozenset({HsState.ONBOARDED, HsState.FAILED})


def hs_legal(a: HsState, b: HsState) -> bool:
    if a in HS_TERMINAL:
        return False
    return b is HsState.FAILED or HS_FORWARD.get(a) is b


class FailReason(str, Enum):
    NO_OFFER = "NoOffer"
    TIMEOUT = "Timeout"
    INTEGRITY = "IntegrityFailure"
    POLICY = "PolicyRejection"
    FETCH = "FetchFailed"
    DUPLICATE = "DuplicateVersion"


@dataclass
class HandshakeSession:
    session_id: str
    query: ServiceQuery | None
    brokers: tuple[str, ...]
    state: HsState = HsState.IDLE
    offers: list[Offer] = field(default_factory=list)
    chosen: Offer | None = None
    deadline: int = 0
    failure: FailReason | None = None
    pending: set[str] = field(default_factory=set)
    history: list[HsState] = field(default_factory=lambda: [HsState.IDLE])
    fetch_from: str | None = None
    record_key: tuple[str, int] | None = None
    update_of: str | None = None
    result: object = None

    def advance(self, to: HsState, reason: FailReason | None = None) -> None:
        if not hs_legal(self.state, to):
            raise IllegalState(f"handshake {self.session_id}: {self.state.value} -> {to.value}")
        self.state = to
        self.history.append(to)
        if to is HsState.FAILED:
            self.failure = reason

    @property
    def terminal(self) -> bool:
        return self.state in HS_TERMINAL

    def add_offers(self, offers: Iterable[Offer]) -> None:
        seen = {o.key for o in self.offers}
        for o in offers:
            if o.key not in seen:
                seen.add(o.key)
                self.offers.append(o)


class Purpose(str, Enum):
    INFERENCE_SUPPORT = "inference_support"
    TRAINING = "training"


@dataclass(frozen=True)
class DataBundle:
    bundle_id: str
    provider_id: str
    data_classes: frozenset[str]
    payload: Mapping[str, Value] = field(hash=False)
    purpose: Purpose = Purpose.INFERENCE_SUPPORT
    retention_ticks: int = 1
    signature: bytes = b""

    def __post_init__(self) -> None:
        object.__setattr__(self, "data_classes", frozenset(self.data_classes))
        object.__setattr__(self, "purpose", Purpose(self.purpose))
        if self.retention_ticks < 1:
            raise ValueError("retention_ticks must be >= 1")

    def signing_bytes(self) -> bytes:
        doc = _bundle_doc(self)
        doc.pop("signature")
        return codec.dumps_doc(doc)

    def signed(self, principal: Principal) -> "DataBundle":
        return replace(self, signature=principal.sign(replace(self, signature=b"").signing_bytes()))


def _bundle_doc(b: DataBundle) -> dict:
    return {
        "bundle_id": b.bundle_id,
        "provider_id": b.provider_id,
        "data_classes": sorted(b.data_classes),
        "payload": codec.values_doc(dict(b.payload)),
        "purpose": b.purpose.value,
        "retention_ticks": b.retention_ticks,
        "signature": b.signature.hex(),
    }


def _bundle_from(d: dict) -> DataBundle:
    return DataBundle(
        str(d["bundle_id"]),
        str(d["provider_id"]),
        frozenset(d["data_classes"]),
        codec.values_from(d["payload"]),
        Purpose(d["purpose"]),
        int(d["retention_ticks"]),
        codec.dec_bytes(d["signature"]),
    )


codec.register(DataBundle, "DataBundle", _bundle_doc, _bundle_from)


@dataclass
class StoredBundle:
    bundle: DataBundle
    expires_at: int
    mapped: tuple[str, ...]


@dataclass(frozen=True)
class UpdateResult:
    status: str  # "UpToDate" | "Updated" | "Failed" | "Denied"
    version: int
    reason: str | None = None


class DataProvider:
    """Third-party data source pushing signed bundles to devices."""

    def __init__(self, principal: Principal) -> None:
        self.principal = principal
        self.node_id = principal.principal_id
        self.net = None
        self._cids = itertools.count(1)

    def make_bundle(self, bundle_id: str, data_classes, payload: Mapping[str, Value],
                    purpose: Purpose | str = Purpose.INFERENCE_SUPPORT, retention_ticks: int = 1) -> DataBundle:
        b = DataBundle(bundle_id, self.node_id, frozenset(data_classes), dict(payload), Purpose(purpose),
                       retention_ticks)
        return b.signed(self.principal)

    def send_bundle(self, device_id: str, bundle: DataBundle) -> None:
        env = Envelope("DataBundle", self.node_id, device_id, f"{self.node_id}:db{next(self._cids)}",
                       {"bundle": codec.to_doc(bundle)})
        self.net.send(env.signed(self.principal))

    def receive(self, env: Envelope) -> None:
        pass

    def on_tick(self, now: int) -> None:
        pass


class Westbound:
    def __init__(self, stratum: "Stratum", timeout: int = 10) -> None:
        self.s = stratum
        self.timeout = timeout
        self.sessions: dict[str, HandshakeSession] = {}
        self._cid_session: dict[str, str] = {}
        self._ids = itertools.count(1)
        self.bundles: dict[str, StoredBundle] = {}
        self.ingest_log: list[tuple[int, str, str]] = []

    # -- handshake ----------------------------------------------------------

    def trusted_brokers(self, brokers: Iterable[str] | None = None) -> list[str]:
        if brokers is None:
            return [i.principal_id for i in self.s.trust if i.role is Role.BROKER]
        return [b for b in brokers if self.s.trust.get(b, Role.BROKER) is not None]

    def _new_session(self, query, brokers) -> HandshakeSession:
        sid = f"{self.s.node_id}:hs{next(self._ids)}"
        session = HandshakeSession(sid, query, tuple(brokers))
        self.sessions[sid] = session
        return session

    def _fail(self, session: HandshakeSession, reason: FailReason) -> None:
        session.advance(HsState.FAILED, reason)
        self.s.trace("handshake", session=session.session_id, state="FAILED", reason=reason.value)

    def _to(self, session: HandshakeSession, state: HsState) -> None:
        session.advance(state)
        self.s.trace("handshake", session=session.session_id, state=state.value)

    def query_brokers(self, query: ServiceQuery, brokers: Iterable[str] | None = None,
                      timeout: int | None = None) -> HandshakeSession:
        trusted = self.trusted_brokers(brokers)
        if not trusted:
            raise NoTrustedBroker("no trusted broker to query")
        session = self._new_session(query, trusted)
        cap = codec.to_doc(self.s.device.report)
        self._to(session, HsState.QUERIED)
        session.pending = set(trusted)
        session.deadline = self.s.now() + (self.timeout if timeout is None else timeout)
        for b in trusted:
            cid = f"{session.session_id}:q:{b}"
            self._cid_session[cid] = session.session_id
            self.s.send(b, "IntelligenceQuery", {"query": codec.to_doc(query), "capability": cap}, cid)
        return session

    def select_offer(self, session: HandshakeSession, index: int | None = None) -> HandshakeSession:
        if session.state is not HsState.OFFERED:
            raise IllegalState(f"select_offer in state {session.state.value}")
        if index is None:
            required = session.query.required_tags if session.query is not None else ()
            ranked = sorted(session.offers, key=lambda o: offer_rank_key(required, o))
            chosen = ranked[0]
        else:
            if not 0 <= index < len(session.offers):
                raise IndexOutOfRange(f"offer index {index} outside {len(session.offers)} offers")
            chosen = session.offers[index]
        session.chosen = chosen
        self._to(session, HsState.SELECTED)
        return session

    def ranked_offers(self, session: HandshakeSession) -> list[Offer]:
        required = session.query.required_tags if session.query is not None else ()
        return sorted(session.offers, key=lambda o: offer_rank_key(required, o))

    def provision(self, session: HandshakeSession, timeout: int | None = None) -> HandshakeSession:
        if session.state is not HsState.SELECTED:
            raise IllegalState(f"provision in state {session.state.value}")
        offer = session.chosen
        target = offer.provider_id if offer.endpoint is Endpoint.DIRECT else offer.broker_id
        session.fetch_from = target
        self._to(session, HsState.PROVISIONING)
        session.deadline = self.s.now() + (self.timeout if timeout is None else timeout)
        cid = f"{session.session_id}:p"
        self._cid_session[cid] = session.session_id
        body = {"provider_id": offer.provider_id, "actor_id": offer.summary.actor_id,
                "version": offer.summary.version}
        self.s.send(target, "PackageRequest", body, cid)
        return session

    def acquire(self, query: ServiceQuery, brokers: Iterable[str] | None = None, index: int | None = None,
                timeout: int | None = None) -> HandshakeSession:
        """query -> select -> provision, driving the network until the handshake settles."""
        session = self.query_brokers(query, brokers, timeout)
        self.s.run_until(lambda: session.state is not HsState.QUERIED)
        if session.state is not HsState.OFFERED:
            return session
        self.select_offer(session, index)
        self.provision(session, timeout)
        self.s.run_until(lambda: session.terminal)
        return session

    def _on_offer_set(self, env: Envelope, session: HandshakeSession) -> None:
        if session.state is not HsState.QUERIED or env.sender not in session.pending:
            self.s.trace("ignored", kind=env.kind, session=session.session_id, sender=env.sender)
            return
        broker = self.s.trust.get(env.sender, Role.BROKER)
        offers = []
        for doc in env.body.get("offers", []):
            try:
                o = Offer.from_doc(doc)
            except (DecodeError, KeyError, TypeError, ValueError):
                continue
            if broker is not None and o.verify(broker):
                if session.update_of is None or (
                    o.summary.actor_id == session.update_of and o.summary.version > session.record_key[1]
                ):
                    offers.append(o)
        session.add_offers(offers)
        session.pending.discard(env.sender)
        if not session.pending:
            if session.offers:
                self._to(session, HsState.OFFERED)
            else:
                self._fail(session, FailReason.NO_OFFER)

    def _on_package(self, env: Envelope, session: HandshakeSession) -> None:
        if session.state is not HsState.PROVISIONING or env.sender != session.fetch_from:
            self.s.trace("ignored", kind=env.kind, session=session.session_id, sender=env.sender)
            return
        if "package" not in env.body:
            self._fail(session, FailReason.FETCH)
            return
        self._to(session, HsState.VERIFYING)
        offer = session.chosen
        try:
            pkg = codec.canonical_decode(codec.dec_bytes(env.body["package"]))
            if not isinstance(pkg, ActorPackage):
                raise DecodeError("not a package")
        except (DecodeError, ValueError, TypeError) as exc:
            log.debug("undecodable package: %s", exc)
            self._fail(session, FailReason.INTEGRITY)
            return
        m = pkg.manifest
        if (m.provider_id, m.actor_id, m.version) != offer.key:
            self._fail(session, FailReason.INTEGRITY)
            return
        try:
            verified = verify_package(pkg, self.s.trust)
        except VerificationError:
            self._fail(session, FailReason.INTEGRITY)
            return
        try:
            token = self.s.management.authorize_lcm(Cause.SETUP, m.actor_id, m.tags, m.data_classes)
        except Denied:
            self._fail(session, FailReason.POLICY)
            return
        try:
            self.s.repository.onboard(verified)
        except DuplicateVersion:
            self._fail(session, FailReason.DUPLICATE)
            return
        self.s.repository.transition(m.actor_id, m.version, Cause.SETUP, token)
        session.record_key = (m.actor_id, m.version) if session.update_of is None else session.record_key
        session.result = verified
        self._to(session, HsState.ONBOARDED)

    def on_tick(self, now: int) -> None:
        for sid in sorted(self.sessions):
            session = self.sessions[sid]
            if session.state in (HsState.QUERIED, HsState.PROVISIONING) and now >= session.deadline:
                if session.state is HsState.QUERIED and session.offers:
                    self._to(session, HsState.OFFERED)
                else:
                    self._fail(session, FailReason.TIMEOUT)
        for bid in sorted(self.bundles):
            if now >= self.bundles[bid].expires_at:
                del self.bundles[bid]
                self.s.trace("evict", bundle=bid)

    def handle(self, env: Envelope) -> None:
        if env.kind == "DataBundle":
            try:
                bundle = codec.from_doc(env.body["bundle"])
                if not isinstance(bundle, DataBundle) or bundle.provider_id != env.sender:
                    raise DecodeError("bundle/sender mismatch")
                self.ingest_data(bundle)
            except (StratumError, KeyError, TypeError, ValueError) as exc:
                self.s.trace("ingest-rejected", sender=env.sender, error=type(exc).__name__)
            return
        sid = self._cid_session.get(env.correlation_id)
        if sid is None:
            self.s.trace("ignored", kind=env.kind, cid=env.correlation_id, sender=env.sender)
            return
        session = self.sessions[sid]
        if env.kind == "OfferSet":
            self._on_offer_set(env, session)
        elif env.kind == "PackageResponse":
            self._on_package(env, session)
        else:
            self.s.trace("ignored", kind=env.kind, session=sid, sender=env.sender)

    # -- updates ------------------------------------------------------------

    def check_updates(self, actor_id: str, brokers: Iterable[str] | None = None,
                      timeout: int | None = None) -> UpdateResult:
        current = self.s.repository.resolve_record(actor_id)
        trusted = self.trusted_brokers(brokers)
        if not trusted:
            raise NoTrustedBroker("no trusted broker to query")
        session = self._new_session(None, trusted)
        session.update_of = actor_id
        session.record_key = (actor_id, current.version)
        self._to(session, HsState.QUERIED)
        session.pending = set(trusted)
        session.deadline = self.s.now() + (self.timeout if timeout is None else timeout)
        cap = codec.to_doc(self.s.device.report)
        for b in trusted:
            cid = f"{session.session_id}:u:{b}"
            self._cid_session[cid] = session.session_id
            self.s.send(b, "UpdateCheck", {"actor_id": actor_id, "above_version": current.version,
                                           "capability": cap}, cid)
        self.s.run_until(lambda: session.state is not HsState.QUERIED)
        if session.state is not HsState.OFFERED:
            return UpdateResult("UpToDate", current.version)
        best = max(session.offers, key=lambda o: (o.summary.version, -o.summary.size_bytes))
        session.chosen = best
        self._to(session, HsState.SELECTED)
        m = current.manifest
        began = False
        try:
            if current.lcm_state is LcmState.ACTIVE:
                token = self.s.management.authorize_lcm(Cause.UPDATE_BEGIN, actor_id, m.tags, m.data_classes)
                self.s.repository.transition(actor_id, current.version, Cause.UPDATE_BEGIN, token)
                began = True
        except Denied as exc:
            self._fail(session, FailReason.POLICY)
            return UpdateResult("Denied", current.version, str(exc))
        self.provision(session, timeout)
        self.s.run_until(lambda: session.terminal)
        if session.state is HsState.ONBOARDED:
            new_v = best.summary.version
            try:
                token = self.s.management.authorize_lcm(Cause.ACTIVATE, actor_id, m.tags, m.data_classes)
                self.s.repository.transition(actor_id, new_v, Cause.ACTIVATE, token)
            except Denied:
                pass  # stays READY and is still resolvable
            if began:
                self._finish_update(actor_id, current.version, Cause.UPDATE_COMMIT, m)
            return UpdateResult("Updated", new_v)
        if began:
            self._finish_update(actor_id, current.version, Cause.UPDATE_ABORT, m)
        return UpdateResult("Failed", current.version, session.failure.value if session.failure else None)

    def acquire_dependencies(self, actor_id: str, version: int, brokers: Iterable[str] | None = None,
                             timeout: int | None = None, activate: bool = True) -> list[str]:
        """Fetch every actor a composition needs that does not resolve locally (depth-first)."""
        fetched: list[str] = []
        pending = [(actor_id, version)]
        seen: set[str] = set()
        while pending:
            aid, ver = pending.pop()
            comp = self.s.repository.composition(aid, ver)
            for node in comp.nodes:
                if node.actor_id in seen:
                    continue
                seen.add(node.actor_id)
                try:
                    rec = self.s.repository.resolve_record(node.actor_id, node.constraint)
                except StratumError:
                    rec = self._fetch_dependency(node.actor_id, node.constraint, brokers, timeout)
                    fetched.append(rec.manifest.service_id)
                    if activate:
                        m = rec.manifest
                        token = self.s.management.authorize_lcm(Cause.ACTIVATE, m.actor_id, m.tags, m.data_classes)
                        self.s.repository.transition(m.actor_id, m.version, Cause.ACTIVATE, token)
                if rec.manifest.kind.value == "FGIS":
                    pending.append((rec.actor_id, rec.version))
        return fetched

    def _fetch_dependency(self, actor_id: str, constraint, brokers, timeout):
        trusted = self.trusted_brokers(brokers)
        if not trusted:
            raise NoTrustedBroker("no trusted broker to query")
        session = self._new_session(None, trusted)
        session.update_of = actor_id
        session.record_key = (actor_id, 0)
        self._to(session, HsState.QUERIED)
        session.pending = set(trusted)
        session.deadline = self.s.now() + (self.timeout if timeout is None else timeout)
        cap = codec.to_doc(self.s.device.report)
        for b in trusted:
            cid = f"{session.session_id}:d:{b}"
            self._cid_session[cid] = session.session_id
            self.s.send(b, "UpdateCheck", {"actor_id": actor_id, "above_version": 0, "capability": cap}, cid)
        self.s.run_until(lambda: session.state is not HsState.QUERIED)
        fitting = [o for o in session.offers if constraint.satisfied_by(o.summary.version)]
        if session.state is not HsState.OFFERED or not fitting:
            raise UnresolvedActor(f"dependency {actor_id} {constraint} not offered by any broker")
        session.chosen = max(fitting, key=lambda o: (o.summary.version, -o.summary.size_bytes))
        self._to(session, HsState.SELECTED)
        self.provision(session, timeout)
        self.s.run_until(lambda: session.terminal)
        if session.state is not HsState.ONBOARDED:
            raise UnresolvedActor(f"dependency {actor_id}: {session.failure.value if session.failure else 'failed'}")
        return self.s.repository.get(actor_id, session.chosen.summary.version)

    def _finish_update(self, actor_id: str, version: int, cause: Cause, m: ActorManifest) -> None:
        # finishing an update already authorized at update_begin is never vetoed
        token = self.s.management.issue_token(actor_id, cause)
        self.s.repository.transition(actor_id, version, cause, token)

    # -- data ingestion -------------------------------------------------------

    def ingest_data(self, bundle: DataBundle) -> list[str]:
        ident = self.s.trust.get(bundle.provider_id, Role.DATA_PROVIDER)
        if ident is None or not verify(replace(bundle, signature=b"").signing_bytes(), bundle.signature,
                                       ident.public_key):
            raise BadSignature(f"bundle {bundle.bundle_id!r} signature does not verify")
        d = self.s.management.decide(Request(Action.INGEST_DATA, actor_id=None, data_classes=bundle.data_classes,
                                             domain="local"))
        if not d.permitted:
            raise Denied(d.rule_id)
        mapped = sorted(
            {
                r.actor_id
                for r in self.s.repository.records()
                if r.lcm_state in (LcmState.READY, LcmState.ACTIVE) and r.manifest.data_classes & bundle.data_classes
            }
        )
        if not mapped:
            raise NoMatchingActor(f"no actor accepts data classes {sorted(bundle.data_classes)}")
        now = self.s.now()
        self.bundles[bundle.bundle_id] = StoredBundle(bundle, now + bundle.retention_ticks, tuple(mapped))
        self.ingest_log.append((now, bundle.bundle_id, ",".join(mapped)))
        self.s.trace("ingest", bundle=bundle.bundle_id, mapped=mapped)
        return mapped

    def readable_bundles(self, manifest: ActorManifest, purpose: Purpose = Purpose.INFERENCE_SUPPORT) -> list[DataBundle]:
        now = self.s.now()
        return [
            sb.bundle
            for bid, sb in sorted(self.bundles.items())
            if now < sb.expires_at and sb.bundle.purpose is purpose and sb.bundle.data_classes & manifest.data_classes
        ]

    def bundle_inputs(self, manifest: ActorManifest) -> dict[str, Value]:
        """Values from readable inference-support bundles, keyed by name (later bundles win)."""
        out: dict[str, Value] = {}
        for b in self.readable_bundles(manifest):
            out.update(b.payload)
        return out

