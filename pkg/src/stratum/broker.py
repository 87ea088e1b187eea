"""Intelligence broker: provider registry, attested catalog, capability-aware matchmaking, package relay.

Also holds the provider node that publishes packages and serves direct fetches.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable

from stratum.discovery import ServiceQuery, signature_satisfies, tag_overlap, tags_satisfy
from stratum.errors import (
    BadCredentials,
    BadSignature,
    DuplicateProvider,
    RelayError,
    Unregistered,
    UnknownEntry,
    UnknownProvider,
)
from stratum.model import codec
from stratum.model.signing import Principal, verify, verify_manifest_signature
from stratum.model.types import ActorManifest, ActorPackage, Identity, Kind, Port, Requirements, Role, TrustStore
from stratum.net import Envelope, SimNetwork
from stratum.southbound import CapabilityReport, admissible

log = logging.getLogger(__name__)


class Endpoint(str, Enum):
    DIRECT = "direct"
    RELAY = "relay"


@dataclass(frozen=True)
class ManifestSummary:
    actor_id: str
    version: int
    kind: Kind
    tags: frozenset[str]
    input_ports: tuple[Port, ...]
    output_ports: tuple[Port, ...]
    requirements: Requirements
    data_classes: frozenset[str]
    size_bytes: int

    @classmethod
    def of(cls, m: ActorManifest, size_bytes: int) -> "ManifestSummary":
        return cls(m.actor_id, m.version, m.kind, m.tags, m.input_ports, m.output_ports, m.requirements,
                   m.data_classes, size_bytes)

    def doc(self) -> dict:
        return {
            "actor_id": self.actor_id,
            "version": self.version,
            "kind": self.kind.value,
            "tags": sorted(self.tags),
            "input_ports": [[p.name, p.type.value] for p in self.input_ports],
            "output_ports": [[p.name, p.type.value] for p in self.output_ports],
            "requirements": {
                "mem_units": self.requirements.mem_units,
                "compute_units": self.requirements.compute_units,
                "features": sorted(self.requirements.features),
            },
            "data_classes": sorted(self.data_classes),
            "size_bytes": self.size_bytes,
        }

    @classmethod
    def from_doc(cls, d: dict) -> "ManifestSummary":
        m = codec.manifest_from(
            dict(d, behavior_hash="", provider_id="", signature="", requires_support_data=False)
        )
        return cls.of(m, int(d["size_bytes"]))


@dataclass(frozen=True)
class Offer:
    provider_id: str
    summary: ManifestSummary
    endpoint: Endpoint
    broker_id: str
    attestation: bytes

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.provider_id, self.summary.actor_id, self.summary.version)

    def attested_bytes(self) -> bytes:
        return attestation_bytes(self.broker_id, self.provider_id, self.summary, self.endpoint)

    def verify(self, broker: Identity) -> bool:
        return broker.principal_id == self.broker_id and verify(self.attested_bytes(), self.attestation,
                                                                broker.public_key)

    def doc(self) -> dict:
        return {
            "provider_id": self.provider_id,
            "summary": self.summary.doc(),
            "endpoint": self.endpoint.value,
            "broker_id": self.broker_id,
            "attestation": self.attestation.hex(),
        }

    @classmethod
    def from_doc(cls, d: dict) -> "Offer":
        return cls(str(d["provider_id"]), ManifestSummary.from_doc(d["summary"]), Endpoint(d["endpoint"]),
                   str(d["broker_id"]), codec.dec_bytes(d["attestation"]))


def attestation_bytes(broker_id: str, provider_id: str, summary: ManifestSummary, endpoint: Endpoint) -> bytes:
    return codec.dumps_doc(
        {"broker_id": broker_id, "provider_id": provider_id, "summary": summary.doc(), "endpoint": endpoint.value}
    )


@dataclass(frozen=True)
class CatalogEntry:
    offer: Offer
    registered_at: int

    @property
    def key(self) -> tuple[str, str, int]:
        return self.offer.key


def offer_rank_key(required: Iterable[str], offer: Offer) -> tuple:
    """(tag overlap desc, size asc, provider_id lex), then actor/version for a total order."""
    s = offer.summary
    return (-tag_overlap(required, s.tags), s.size_bytes, offer.provider_id, s.actor_id, -s.version)


def registration_bytes(provider_id: str) -> bytes:
    return f"stratum-register|{provider_id}".encode()


class Broker:
    """Runs in-process; reachable over the network as node ``broker_id``."""

    def __init__(self, principal: Principal, clock: Callable[[], int] = lambda: 0) -> None:
        self.principal = principal
        self.node_id = principal.principal_id
        self.providers = TrustStore()
        self.peers = TrustStore()  # devices allowed to query / request relays
        self._catalog: dict[tuple[str, str, int], CatalogEntry] = {}
        self._cache: dict[tuple[str, str, int], bytes] = {}
        self._fetchers: dict[str, Callable[[str, int], bytes | None]] = {}
        self._lock = threading.Lock()
        self.clock = clock
        self.net: SimNetwork | None = None

    @property
    def identity(self) -> Identity:
        return self.principal.identity

    # -- provider side ------------------------------------------------------

    def register_provider(self, identity: Identity, credentials: bytes,
                          fetcher: Callable[[str, int], bytes | None] | None = None) -> None:
        with self._lock:
            if identity.principal_id in self.providers:
                raise DuplicateProvider(identity.principal_id)
            if identity.role is not Role.PROVIDER or not verify(
                registration_bytes(identity.principal_id), credentials, identity.public_key
            ):
                raise BadCredentials(identity.principal_id)
            self.providers.add(identity)
            if fetcher is not None:
                self._fetchers[identity.principal_id] = fetcher

    def publish(self, provider_id: str, manifest: ActorManifest, package_bytes: bytes | None = None,
                endpoint: Endpoint | str = Endpoint.RELAY, size_bytes: int | None = None) -> CatalogEntry:
        endpoint = Endpoint(endpoint)
        with self._lock:
            if provider_id not in self.providers or manifest.provider_id != provider_id:
                raise Unregistered(f"provider {provider_id!r} is not registered with {self.node_id}")
            try:
                verify_manifest_signature(manifest, self.providers)
            except UnknownProvider as exc:
                raise Unregistered(str(exc)) from exc
            if package_bytes is not None:
                pkg = codec.canonical_decode(package_bytes)
                if not isinstance(pkg, ActorPackage) or pkg.manifest != manifest:
                    raise BadSignature("published package bytes do not carry the published manifest")
                size = len(pkg.payload)
            else:
                size = size_bytes if size_bytes is not None else 0
            summary = ManifestSummary.of(manifest, size)
            att = self.principal.sign(attestation_bytes(self.node_id, provider_id, summary, endpoint))
            entry = CatalogEntry(Offer(provider_id, summary, endpoint, self.node_id, att), self.clock())
            self._catalog[entry.key] = entry
            if package_bytes is not None:
                self._cache[entry.key] = package_bytes
            return entry

    def entries(self) -> list[CatalogEntry]:
        return [self._catalog[k] for k in sorted(self._catalog)]

    # -- device side ------------------------------------------------------

    def match(self, query: ServiceQuery, capability: CapabilityReport, min_version: dict | None = None) -> list[Offer]:
        hits = []
        for entry in self._catalog.values():
            s = entry.offer.summary
            if not tags_satisfy(query.required_tags, s.tags):
                continue
            if not signature_satisfies(query, s.input_ports, s.output_ports):
                continue
            if not admissible(s.requirements, capability):
                continue
            hits.append(entry.offer)
        hits.sort(key=lambda o: offer_rank_key(query.required_tags, o))
        return hits[: query.max_results]

    def updates_for(self, actor_id: str, above_version: int, capability: CapabilityReport) -> list[Offer]:
        hits = [
            e.offer
            for e in self._catalog.values()
            if e.offer.summary.actor_id == actor_id
            and e.offer.summary.version > above_version
            and admissible(e.offer.summary.requirements, capability)
        ]
        hits.sort(key=lambda o: (-o.summary.version, o.summary.size_bytes, o.provider_id))
        return hits

    def relay_package(self, key: tuple[str, str, int], requester: str | None = None) -> bytes:
        """Return the provider's package bytes untouched (never re-signed)."""
        key = (key[0], key[1], int(key[2]))
        if key not in self._catalog:
            raise UnknownEntry(f"no catalog entry {key}")
        if requester is not None and requester not in self.peers and requester not in self.providers:
            raise RelayError(f"unknown requester {requester!r}")
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        fetch = self._fetchers.get(key[0])
        data = fetch(key[1], key[2]) if fetch is not None else None
        if data is None:
            raise RelayError(f"{key} not cached and provider {key[0]!r} unreachable")
        return data

    # -- network ----------------------------------------------------------

    def _reply(self, env: Envelope, kind: str, body: dict) -> None:
        if self.net is None:
            return
        self.net.send(Envelope(kind, self.node_id, env.sender, env.correlation_id, body).signed(self.principal))

    def receive(self, env: Envelope) -> None:
        if not env.verify_sender(self.peers):
            if self.net is not None:
                self.net.record("reject", node=self.node_id, kind=env.kind, sender=env.sender)
            return
        try:
            if env.kind == "IntelligenceQuery":
                q = codec.from_doc(env.body["query"])
                cap = codec.from_doc(env.body["capability"])
                offers = self.match(q, cap)
                self._reply(env, "OfferSet", {"offers": [o.doc() for o in offers]})
            elif env.kind == "UpdateCheck":
                cap = codec.from_doc(env.body["capability"])
                offers = self.updates_for(env.body["actor_id"], int(env.body["above_version"]), cap)
                self._reply(env, "OfferSet", {"offers": [o.doc() for o in offers]})
            elif env.kind == "PackageRequest":
                key = (env.body["provider_id"], env.body["actor_id"], int(env.body["version"]))
                try:
                    data = self.relay_package(key, env.sender)
                    self._reply(env, "PackageResponse", {"package": data.hex()})
                except RelayError as exc:
                    self._reply(env, "PackageResponse", {"error": type(exc).__name__, "detail": str(exc)})
        except (KeyError, TypeError, ValueError) as exc:
            log.debug("broker %s dropped malformed %s: %s", self.node_id, env.kind, exc)
            if self.net is not None:
                self.net.record("malformed", node=self.node_id, kind=env.kind)

    def on_tick(self, now: int) -> None:
        pass


class Provider:
    """An intelligence provider: signs packages, publishes to brokers, serves direct fetches."""

    def __init__(self, principal: Principal) -> None:
        self.principal = principal
        self.node_id = principal.principal_id
        self.packages: dict[tuple[str, int], bytes] = {}
        self.online = True
        self.peers = TrustStore()
        self.net: SimNetwork | None = None

    @property
    def identity(self) -> Identity:
        return self.principal.identity

    def credentials(self) -> bytes:
        return self.principal.sign(registration_bytes(self.node_id))

    def add_package(self, pkg: ActorPackage) -> bytes:
        data = codec.canonical_encode(pkg)
        self.packages[(pkg.manifest.actor_id, pkg.manifest.version)] = data
        return data

    def fetch(self, actor_id: str, version: int) -> bytes | None:
        if not self.online:
            return None
        return self.packages.get((actor_id, int(version)))

    def register_with(self, broker: Broker) -> None:
        broker.register_provider(self.identity, self.credentials(), self.fetch)

    def publish_to(self, broker: Broker, actor_id: str, version: int, endpoint: Endpoint | str = Endpoint.RELAY,
                   cache: bool = True) -> CatalogEntry:
        data = self.packages[(actor_id, version)]
        pkg = codec.canonical_decode(data)
        return broker.publish(self.node_id, pkg.manifest, data if cache else None, endpoint,
                              size_bytes=len(pkg.payload))

    def receive(self, env: Envelope) -> None:
        if not self.online or not env.verify_sender(self.peers):
            return
        if env.kind == "PackageRequest" and self.net is not None:
            data = self.fetch(env.body.get("actor_id", ""), int(env.body.get("version", 0)))
            body = {"package": data.hex()} if data is not None else {"error": "UnknownEntry"}
            self.net.send(
                Envelope("PackageResponse", self.node_id, env.sender, env.correlation_id, body).signed(self.principal)
            )

    def on_tick(self, now: int) -> None:
        pass
