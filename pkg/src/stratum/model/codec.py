"""Canonical text encoding used on disk and on the wire.

Documents are key-sorted, whitespace-free JSON. Integers are written in base 10,
decimals travel as strings (shortest round-trip form), byte strings as lowercase
hex, sets as sorted lists. Every registered type carries a ``schema`` field of
the form ``"<TypeName>/1"``.
"""

from __future__ import annotations

import json
import math
from typing import Any, Callable

from stratum.errors import DecodeError, UnencodableValue
from stratum.model.types import (
    ActorManifest,
    ActorPackage,
    Binding,
    Composition,
    CompositionNode,
    Edge,
    Identity,
    Kind,
    Port,
    Requirements,
    VersionConstraint,
)
from stratum.model.values import Label, Scalar, ValueType, Vector

SCHEMA_VERSION = "1"

_ENCODERS: dict[type, tuple[str, Callable[[Any], dict]]] = {}
_DECODERS: dict[str, Callable[[dict], Any]] = {}


def register(cls: type, name: str, to_doc: Callable[[Any], dict], from_doc: Callable[[dict], Any]) -> None:
    _ENCODERS[cls] = (name, to_doc)
    _DECODERS[name] = from_doc


def enc_decimal(x: float) -> str:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise UnencodableValue(f"not a decimal: {x!r}")
    x = float(x)
    if not math.isfinite(x):
        raise UnencodableValue(f"non-finite decimal {x!r}")
    return repr(x)


def dec_decimal(s: Any) -> float:
    if isinstance(s, bool):
        raise DecodeError(f"not a decimal: {s!r}")
    try:
        x = float(s)
    except (TypeError, ValueError) as exc:
        raise DecodeError(f"not a decimal: {s!r}") from exc
    if not math.isfinite(x):
        raise DecodeError(f"non-finite decimal {s!r}")
    return x


def dec_bytes(s: Any) -> bytes:
    try:
        return bytes.fromhex(s)
    except (TypeError, ValueError) as exc:
        raise DecodeError(f"bad hex field {s!r}") from exc


def to_doc(obj: Any) -> Any:
    """Convert a model object (or plain container) into a JSON-ready document."""
    enc = _ENCODERS.get(type(obj))
    if enc is not None:
        name, fn = enc
        doc = fn(obj)
        doc["schema"] = f"{name}/{SCHEMA_VERSION}"
        return doc
    if obj is None or isinstance(obj, (bool, str)):
        return obj
    if isinstance(obj, int):
        return obj
    if isinstance(obj, float):
        return enc_decimal(obj)
    if isinstance(obj, bytes):
        return obj.hex()
    if isinstance(obj, dict):
        out = {}
        for k, v in obj.items():
            if not isinstance(k, str):
                raise UnencodableValue(f"non-string key {k!r}")
            out[k] = to_doc(v)
        return out
    if isinstance(obj, (set, frozenset)):
        items = [to_doc(v) for v in obj]
        try:
            return sorted(items)
        except TypeError as exc:
            raise UnencodableValue("set members must be mutually orderable") from exc
    if isinstance(obj, (list, tuple)):
        return [to_doc(v) for v in obj]
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):  # str-valued enums
        return obj.value
    raise UnencodableValue(f"cannot encode {type(obj).__name__}")


def dumps_doc(doc: Any) -> bytes:
    try:
        text = json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise UnencodableValue(str(exc)) from exc
    return text.encode("ascii")


def canonical_encode(document: Any) -> bytes:
    return dumps_doc(to_doc(document))


def from_doc(doc: Any) -> Any:
    if not isinstance(doc, dict) or not isinstance(doc.get("schema"), str):
        raise DecodeError("document lacks a schema field")
    name, _, version = doc["schema"].partition("/")
    if version != SCHEMA_VERSION:
        raise DecodeError(f"unsupported schema version {doc['schema']!r}")
    fn = _DECODERS.get(name)
    if fn is None:
        raise DecodeError(f"unknown schema {name!r}")
    try:
        return fn(doc)
    except DecodeError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise DecodeError(f"malformed {name} document: {exc}") from exc


def loads(data: bytes | str) -> Any:
    """Parse canonical text into a plain document (no schema dispatch)."""
    try:
        return json.loads(data)
    except (UnicodeDecodeError, ValueError) as exc:
        raise DecodeError(f"not canonical text: {exc}") from exc


def canonical_decode(data: bytes | str) -> Any:
    return from_doc(loads(data))


def schema_of(doc: Any) -> str | None:
    if isinstance(doc, dict) and isinstance(doc.get("schema"), str):
        return doc["schema"].partition("/")[0]
    if isinstance(doc, list):
        return "RuleList"
    return None


# -- registered model types -------------------------------------------------


def _port_doc(p: Port) -> list:
    return [p.name, p.type.value]


def _port_from(x: list) -> Port:
    name, typ = x
    return Port(str(name), ValueType(typ))


def _req_doc(r: Requirements) -> dict:
    return {"mem_units": r.mem_units, "compute_units": r.compute_units, "features": sorted(r.features)}


def _req_from(d: dict) -> Requirements:
    return Requirements(int(d["mem_units"]), int(d["compute_units"]), frozenset(d["features"]))


def manifest_doc(m: ActorManifest, with_signature: bool = True) -> dict:
    doc = {
        "actor_id": m.actor_id,
        "version": m.version,
        "kind": m.kind.value,
        "tags": sorted(m.tags),
        "input_ports": [_port_doc(p) for p in m.input_ports],
        "output_ports": [_port_doc(p) for p in m.output_ports],
        "requirements": _req_doc(m.requirements),
        "data_classes": sorted(m.data_classes),
        "behavior_hash": m.behavior_hash,
        "provider_id": m.provider_id,
        "requires_support_data": m.requires_support_data,
    }
    if with_signature:
        doc["signature"] = m.signature.hex()
    return doc


def manifest_from(d: dict) -> ActorManifest:
    return ActorManifest(
        actor_id=str(d["actor_id"]),
        version=d["version"],
        kind=Kind(d["kind"]),
        tags=frozenset(d["tags"]),
        input_ports=tuple(_port_from(p) for p in d["input_ports"]),
        output_ports=tuple(_port_from(p) for p in d["output_ports"]),
        requirements=_req_from(d["requirements"]),
        data_classes=frozenset(d.get("data_classes", ())),
        behavior_hash=str(d["behavior_hash"]),
        provider_id=str(d["provider_id"]),
        signature=dec_bytes(d.get("signature", "")),
        requires_support_data=bool(d.get("requires_support_data", False)),
    )


def signing_bytes(m: ActorManifest) -> bytes:
    """Bytes covered by a manifest signature: the canonical manifest minus its signature."""
    doc = manifest_doc(m, with_signature=False)
    doc["schema"] = f"ActorManifest/{SCHEMA_VERSION}"
    return dumps_doc(doc)


def _package_doc(p: ActorPackage) -> dict:
    return {"manifest": to_doc(p.manifest), "payload": p.payload.hex()}


def _package_from(d: dict) -> ActorPackage:
    return ActorPackage(manifest=from_doc(d["manifest"]), payload=dec_bytes(d["payload"]))


def _identity_doc(i: Identity) -> dict:
    return {"principal_id": i.principal_id, "public_key": i.public_key.hex(), "role": i.role.value}


def _identity_from(d: dict) -> Identity:
    return Identity(str(d["principal_id"]), dec_bytes(d["public_key"]), d["role"])


def _composition_doc(c: Composition) -> dict:
    return {
        "nodes": [[n.node_id, n.actor_id, str(n.constraint)] for n in c.nodes],
        "edges": [[e.src_node, e.src_port, e.dst_node, e.dst_port] for e in c.edges],
        "exposed_inputs": [[b.name, b.node_id, b.port] for b in c.exposed_inputs],
        "exposed_outputs": [[b.name, b.node_id, b.port] for b in c.exposed_outputs],
    }


def _composition_from(d: dict) -> Composition:
    return Composition(
        nodes=tuple(CompositionNode(str(a), str(b), VersionConstraint.parse(c)) for a, b, c in d["nodes"]),
        edges=tuple(Edge(*map(str, e)) for e in d["edges"]),
        exposed_inputs=tuple(Binding(*map(str, b)) for b in d["exposed_inputs"]),
        exposed_outputs=tuple(Binding(*map(str, b)) for b in d["exposed_outputs"]),
    )


def value_doc(v) -> dict:
    if isinstance(v, Scalar):
        return {"type": "Scalar", "value": enc_decimal(v.value)}
    if isinstance(v, Vector):
        return {"type": "Vector", "items": [enc_decimal(x) for x in v.items]}
    if isinstance(v, Label):
        return {"type": "Label", "text": v.text}
    raise UnencodableValue(f"not a value: {v!r}")


def value_from(d: dict):
    t = d["type"]
    if t == "Scalar":
        return Scalar(dec_decimal(d["value"]))
    if t == "Vector":
        return Vector(dec_decimal(x) for x in d["items"])
    if t == "Label":
        return Label(str(d["text"]))
    raise DecodeError(f"unknown value type {t!r}")


register(ActorManifest, "ActorManifest", manifest_doc, manifest_from)
register(ActorPackage, "ActorPackage", _package_doc, _package_from)
register(Identity, "Identity", _identity_doc, _identity_from)
register(Composition, "Composition", _composition_doc, _composition_from)
register(Scalar, "Value", value_doc, value_from)
register(Vector, "Value", value_doc, value_from)
register(Label, "Value", value_doc, value_from)


def values_doc(values: dict) -> dict:
    return {k: value_doc(v) for k, v in values.items()}


def values_from(d: dict) -> dict:
    return {str(k): value_from(v) for k, v in d.items()}
