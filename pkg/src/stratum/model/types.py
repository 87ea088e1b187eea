"""Domain types shared across the stratum: manifests, packages, compositions, identities."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum

from stratum.model.values import ValueType


class Kind(str, Enum):
    AIS = "AIS"
    FGIS = "FGIS"


class Role(str, Enum):
    PROVIDER = "provider"
    BROKER = "broker"
    DATA_PROVIDER = "data_provider"
    PEER_STRATUM = "peer_stratum"
    OPERATOR = "operator"


@dataclass(frozen=True)
class Port:
    name: str
    type: ValueType


@dataclass(frozen=True)
class Requirements:
    mem_units: int = 0
    compute_units: int = 0
    features: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.mem_units < 0 or self.compute_units < 0:
            raise ValueError("resource demands must be >= 0")
        object.__setattr__(self, "features", frozenset(self.features))


def _check_ports(ports: tuple[Port, ...], direction: str) -> None:
    names = [p.name for p in ports]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate {direction} port name in {names}")


@dataclass(frozen=True)
class ActorManifest:
    actor_id: str
    version: int
    kind: Kind
    tags: frozenset[str]
    input_ports: tuple[Port, ...]
    output_ports: tuple[Port, ...]
    requirements: Requirements
    data_classes: frozenset[str]
    behavior_hash: str
    provider_id: str
    signature: bytes = b""
    requires_support_data: bool = False

    def __post_init__(self) -> None:
        if not self.actor_id:
            raise ValueError("actor_id must be non-empty")
        if isinstance(self.version, bool) or not isinstance(self.version, int) or self.version < 1:
            raise ValueError(f"version must be an integer >= 1, got {self.version!r}")
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "tags", frozenset(self.tags))
        object.__setattr__(self, "data_classes", frozenset(self.data_classes))
        object.__setattr__(self, "input_ports", tuple(self.input_ports))
        object.__setattr__(self, "output_ports", tuple(self.output_ports))
        _check_ports(self.input_ports, "input")
        _check_ports(self.output_ports, "output")

    @property
    def service_id(self) -> str:
        return f"{self.actor_id}@{self.version}"

    def unsigned(self) -> "ActorManifest":
        return replace(self, signature=b"")

    def port_type(self, name: str, direction: str = "in") -> ValueType | None:
        ports = self.input_ports if direction == "in" else self.output_ports
        for p in ports:
            if p.name == name:
                return p.type
        return None


@dataclass(frozen=True)
class ActorPackage:
    manifest: ActorManifest
    payload: bytes


@dataclass(frozen=True)
class VerifiedPackage:
    """A package whose hash binding and provider signature have been checked."""

    package: ActorPackage
    verified: bool = True

    @property
    def manifest(self) -> ActorManifest:
        return self.package.manifest


@dataclass(frozen=True)
class Identity:
    principal_id: str
    public_key: bytes
    role: Role

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", Role(self.role))


class TrustStore:
    """Flat principal_id -> Identity map."""

    def __init__(self, identities=()) -> None:
        self._by_id: dict[str, Identity] = {}
        for ident in identities:
            self.add(ident)

    def add(self, ident: Identity) -> None:
        if ident.principal_id in self._by_id and self._by_id[ident.principal_id] != ident:
            raise ValueError(f"principal {ident.principal_id!r} already in trust store")
        self._by_id[ident.principal_id] = ident

    def remove(self, principal_id: str) -> None:
        self._by_id.pop(principal_id, None)

    def get(self, principal_id: str, role: Role | None = None) -> Identity | None:
        ident = self._by_id.get(principal_id)
        if ident is not None and role is not None and ident.role != role:
            return None
        return ident

    def __contains__(self, principal_id: object) -> bool:
        return principal_id in self._by_id

    def __iter__(self):
        return iter(sorted(self._by_id.values(), key=lambda i: i.principal_id))

    def __len__(self) -> int:
        return len(self._by_id)


_CONSTRAINT_RE = re.compile(r"^\s*(==|>=|=|≥)?\s*(\d+)\s*$")


@dataclass(frozen=True)
class VersionConstraint:
    op: str  # "==" or ">="
    version: int

    def __post_init__(self) -> None:
        if self.op not in ("==", ">="):
            raise ValueError(f"unsupported constraint operator {self.op!r}")
        if self.version < 1:
            raise ValueError("constraint version must be >= 1")

    @classmethod
    def parse(cls, text: "str | VersionConstraint") -> "VersionConstraint":
        if isinstance(text, VersionConstraint):
            return text
        m = _CONSTRAINT_RE.match(str(text))
        if not m:
            raise ValueError(f"bad version constraint {text!r}")
        op = {"==": "==", "=": "==", None: "==", ">=": ">=", "≥": ">="}[m.group(1)]
        return cls(op, int(m.group(2)))

    def satisfied_by(self, version: int) -> bool:
        return version == self.version if self.op == "==" else version >= self.version

    def __str__(self) -> str:
        return f"{self.op}{self.version}"


AT_LEAST_ONE = VersionConstraint(">=", 1)


@dataclass(frozen=True)
class CompositionNode:
    node_id: str
    actor_id: str
    constraint: VersionConstraint = AT_LEAST_ONE


@dataclass(frozen=True)
class Edge:
    src_node: str
    src_port: str
    dst_node: str
    dst_port: str


@dataclass(frozen=True)
class Binding:
    """Exposes a node port under an FGIS-level port name."""

    name: str
    node_id: str
    port: str


@dataclass(frozen=True)
class Composition:
    nodes: tuple[CompositionNode, ...]
    edges: tuple[Edge, ...] = ()
    exposed_inputs: tuple[Binding, ...] = ()
    exposed_outputs: tuple[Binding, ...] = ()

    def __post_init__(self) -> None:
        for name in ("nodes", "edges", "exposed_inputs", "exposed_outputs"):
            object.__setattr__(self, name, tuple(getattr(self, name)))


@dataclass(frozen=True)
class Wire:
    """Source of a node input: an exposed input (node_id None) or a predecessor output."""

    node_id: str | None
    port: str


@dataclass(frozen=True)
class TypedPlan:
    order: tuple[str, ...]
    nodes: dict[str, CompositionNode] = field(hash=False)
    manifests: dict[str, ActorManifest] = field(hash=False)
    wiring: dict[str, dict[str, Wire]] = field(hash=False)
    exposed_inputs: tuple[Port, ...] = ()
    exposed_outputs: dict[str, Wire] = field(default_factory=dict, hash=False)
