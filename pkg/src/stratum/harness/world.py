"""Builders for multi-party simulated worlds (used by the scenario runner and the tests)."""

from __future__ import annotations

from typing import Any, Iterable, Mapping

from stratum.broker import Broker, Provider
from stratum.model import codec
from stratum.model.signing import Principal, build_package
from stratum.model.types import (
    ActorManifest,
    ActorPackage,
    Binding,
    Composition,
    CompositionNode,
    Edge,
    Kind,
    Port,
    Requirements,
    Role,
    VersionConstraint,
)
from stratum.model.values import Label, Scalar, Value, ValueType, Vector
from stratum.net import SimNetwork
from stratum.stratum import Stratum
from stratum.westbound import DataProvider


def port_list(spec: Iterable) -> tuple[Port, ...]:
    return tuple(Port(str(n), ValueType(t)) for n, t in spec)


def composition_from_spec(spec: Mapping) -> Composition:
    return Composition(
        nodes=tuple(
            CompositionNode(str(n["id"]), str(n["actor"]), VersionConstraint.parse(str(n.get("constraint", ">=1"))))
            for n in spec["nodes"]
        ),
        edges=tuple(Edge(*map(str, e)) for e in spec.get("edges", ())),
        exposed_inputs=tuple(Binding(*map(str, b)) for b in spec.get("inputs", ())),
        exposed_outputs=tuple(Binding(*map(str, b)) for b in spec.get("outputs", ())),
    )


def make_package(principal: Principal, spec: Mapping) -> ActorPackage:
    """Build and sign a package from a compact spec (``behavior`` text or ``composition``)."""
    kind = Kind(spec.get("kind", "AIS"))
    if kind is Kind.AIS:
        payload = str(spec["behavior"]).encode()
    else:
        payload = codec.canonical_encode(composition_from_spec(spec["composition"]))
    req = spec.get("requirements", {})
    manifest = ActorManifest(
        actor_id=str(spec["actor_id"]),
        version=int(spec.get("version", 1)),
        kind=kind,
        tags=frozenset(spec.get("tags", ())),
        input_ports=port_list(spec.get("inputs", ())),
        output_ports=port_list(spec.get("outputs", ())),
        requirements=Requirements(int(req.get("mem_units", 0)), int(req.get("compute_units", 0)),
                                  frozenset(req.get("features", ("dsl-1",)))),
        data_classes=frozenset(spec.get("data_classes", ())),
        behavior_hash="",
        provider_id=principal.principal_id,
        requires_support_data=bool(spec.get("requires_support_data", False)),
    )
    return build_package(manifest, payload, principal.private_key)


def value_of(x: Any) -> Value:
    """Scenario literal -> Value: number -> Scalar, list -> Vector, string -> Label."""
    if isinstance(x, dict):
        return codec.value_from(x)
    if isinstance(x, bool):
        raise ValueError("booleans are not values")
    if isinstance(x, (int, float)):
        return Scalar(float(x))
    if isinstance(x, list):
        return Vector(float(v) for v in x)
    if isinstance(x, str):
        return Label(x)
    raise ValueError(f"cannot read {x!r} as a value")


class World:
    """A SimNetwork plus brokers, providers, data providers, operators and strata with shared trust."""

    def __init__(self, seed: int = 0, key_seed: int | str = 0) -> None:
        self.seed = seed
        self.key_seed = key_seed
        self.net = SimNetwork(seed)
        self.strata: dict[str, Stratum] = {}
        self.brokers: dict[str, Broker] = {}
        self.providers: dict[str, Provider] = {}
        self.data_providers: dict[str, DataProvider] = {}
        self.operators: dict[str, Principal] = {}

    def principal(self, pid: str, role: Role) -> Principal:
        return Principal.derive(pid, role, self.key_seed)

    def add_broker(self, bid: str) -> Broker:
        b = Broker(self.principal(bid, Role.BROKER), clock=lambda: self.net.now)
        b.net = self.net
        self.net.add_node(b)
        self.brokers[bid] = b
        return b

    def add_provider(self, pid: str) -> Provider:
        p = Provider(self.principal(pid, Role.PROVIDER))
        p.net = self.net
        self.net.add_node(p)
        self.providers[pid] = p
        return p

    def add_data_provider(self, did: str) -> DataProvider:
        d = DataProvider(self.principal(did, Role.DATA_PROVIDER))
        d.net = self.net
        self.net.add_node(d)
        self.data_providers[did] = d
        return d

    def add_operator(self, oid: str) -> Principal:
        self.operators[oid] = self.principal(oid, Role.OPERATOR)
        return self.operators[oid]

    def add_stratum(self, sid: str, **kwargs) -> Stratum:
        s = Stratum(self.principal(sid, Role.PEER_STRATUM), seed=self.seed, **kwargs)
        s.attach(self.net)
        self.strata[sid] = s
        return s

    def wire_trust(self) -> None:
        """Everyone trusts everyone in their expected role (call after adding all parties)."""
        idents = (
            [b.identity for b in self.brokers.values()]
            + [p.identity for p in self.providers.values()]
            + [d.principal.identity for d in self.data_providers.values()]
            + [o.identity for o in self.operators.values()]
            + [s.identity for s in self.strata.values()]
        )
        for s in self.strata.values():
            for ident in idents:
                if ident.principal_id != s.node_id:
                    s.trust.add(ident)
        for b in self.brokers.values():
            for s in self.strata.values():
                b.peers.add(s.identity)
        for p in self.providers.values():
            for s in self.strata.values():
                p.peers.add(s.identity)
            for b in self.brokers.values():
                p.peers.add(b.identity)

    def connect(self, latency: int = 1) -> None:
        self.net.connect_all(latency)
