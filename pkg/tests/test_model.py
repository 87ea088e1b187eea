import hashlib
import json
import math
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from stratum.errors import (
    BadSignature, CycleDetected, DanglingPort, DecodeError, HashMismatch, PortTypeMismatch,
    UnencodableValue, UnknownProvider, UnresolvedActor,
)
from stratum.harness.world import composition_from_spec
from stratum.model import codec
from stratum.model.composition import topological_order, validate_composition
from stratum.model.signing import Principal, build_package, content_hash, verify_package
from stratum.model.types import ActorPackage, Identity, Role, TrustStore, VersionConstraint
from stratum.model.values import Label, Scalar, Vector, format_value, same_bits

from helpers import PROVIDER, ais_spec, package
from oracles import all_topological_orders, is_topological

finite = st.floats(allow_nan=False, allow_infinity=False)
values = st.one_of(
    finite.map(Scalar),
    st.lists(finite, max_size=8).map(Vector),
    st.text(max_size=12).map(Label),
)


@given(values)
def test_value_roundtrip_is_bit_exact(v):
    back = codec.canonical_decode(codec.canonical_encode(v))
    assert same_bits(v, back)


@given(values)
def test_encoding_is_canonical(v):
    data = codec.canonical_encode(v)
    doc = json.loads(data)
    assert data == json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    assert doc["schema"].endswith("/1")


def test_decimals_are_repr_strings():
    doc = codec.to_doc(Scalar(0.1))
    assert doc["value"] == "0.1"
    with pytest.raises(UnencodableValue):
        codec.to_doc(Scalar(math.inf))


def test_negative_zero_survives():
    back = codec.canonical_decode(codec.canonical_encode(Scalar(-0.0)))
    assert math.copysign(1.0, back.value) == -1.0
    assert not same_bits(Scalar(0.0), Scalar(-0.0))


def test_format_value():
    assert format_value(Scalar(1.0)) == "Scalar 1"
    assert format_value(Scalar(0.5)) == "Scalar 0.5"
    assert format_value(Vector([1, 2.5])) == "Vector [1, 2.5]"
    assert format_value(Label("ok")) == 'Label "ok"'


def test_decode_rejects_missing_or_unknown_schema():
    with pytest.raises(DecodeError):
        codec.canonical_decode(b'{"value":"1"}')
    with pytest.raises(DecodeError):
        codec.canonical_decode(b'{"schema":"Nope/1"}')
    with pytest.raises(DecodeError):
        codec.canonical_decode(b'{"schema":"Scalar/2","value":"1"}')
    with pytest.raises(DecodeError):
        codec.canonical_decode(b"not json")


def test_manifest_and_package_roundtrip():
    pkg = package(ais_spec("a", "return x", [("x", "Scalar")], [("y", "Scalar")], tags=("b", "a")))
    data = codec.canonical_encode(pkg)
    back = codec.canonical_decode(data)
    assert back == pkg
    assert codec.canonical_encode(back) == data


def test_content_hash_is_sha256():
    assert content_hash(b"abc") == hashlib.sha256(b"abc").hexdigest()


# -- signing ----------------------------------------------------------------


def trust():
    return TrustStore([PROVIDER.identity])


def test_signed_package_verifies():
    pkg = package(ais_spec("a", "return x", [("x", "Scalar")], [("y", "Scalar")]))
    assert verify_package(pkg, trust()).verified


def test_payload_tamper_is_hash_mismatch():
    pkg = package(ais_spec("a", "return x", [("x", "Scalar")], [("y", "Scalar")]))
    with pytest.raises(HashMismatch):
        verify_package(ActorPackage(pkg.manifest, pkg.payload + b" "), trust())


def test_manifest_tamper_is_bad_signature():
    pkg = package(ais_spec("a", "return x", [("x", "Scalar")], [("y", "Scalar")]))
    forged = replace(pkg.manifest, version=2)
    with pytest.raises(BadSignature):
        verify_package(ActorPackage(forged, pkg.payload), trust())


def test_unknown_provider():
    other = Principal.derive("stranger", Role.PROVIDER, "x")
    pkg = build_package(package(ais_spec("a", "return x", [("x", "Scalar")], [("y", "Scalar")])).manifest,
                        b"return x", other.private_key)
    pkg = ActorPackage(replace(pkg.manifest, provider_id="stranger"), pkg.payload)
    with pytest.raises(UnknownProvider):
        verify_package(pkg, trust())
    with pytest.raises(UnknownProvider):
        verify_package(pkg, TrustStore())


def test_key_derivation_is_deterministic():
    assert Principal.derive("p", Role.PROVIDER, 1) == Principal.derive("p", Role.PROVIDER, 1)
    assert Principal.derive("p", Role.PROVIDER, 1) != Principal.derive("p", Role.PROVIDER, 2)


def test_trust_store_refuses_conflicting_identity():
    ts = trust()
    with pytest.raises(ValueError):
        ts.add(Identity(PROVIDER.principal_id, b"\x00" * 32, Role.PROVIDER))
    assert ts.get(PROVIDER.principal_id, Role.BROKER) is None


# -- versions ---------------------------------------------------------------


@pytest.mark.parametrize("text,op,v", [("3", "==", 3), ("==3", "==", 3), (">=2", ">=", 2), ("≥ 2", ">=", 2)])
def test_constraint_parse(text, op, v):
    assert VersionConstraint.parse(text) == VersionConstraint(op, v)


@pytest.mark.parametrize("bad", ["", ">3", "0", "==-1", "abc"])
def test_constraint_parse_rejects(bad):
    with pytest.raises(ValueError):
        VersionConstraint.parse(bad)


# -- compositions -------------------------------------------------------------

S, V = "Scalar", "Vector"


def _manifests(**ports):
    out = {}
    for aid, (ins, outs) in ports.items():
        out[aid] = package(ais_spec(aid, "return 1", ins, outs)).manifest
    return out


def _resolver(ms):
    def resolve(aid, c):
        if aid not in ms:
            raise UnresolvedActor(aid)
        return ms[aid]

    return resolve


def test_validate_chain():
    ms = _manifests(f=([("x", V)], [("y", V)]), g=([("y", V)], [("z", S)]))
    comp = composition_from_spec({"nodes": [{"id": "b", "actor": "g"}, {"id": "a", "actor": "f"}],
                                  "edges": [["a", "y", "b", "y"]], "inputs": [["in", "a", "x"]],
                                  "outputs": [["out", "b", "z"]]})
    plan = validate_composition(comp, _resolver(ms))
    assert plan.order == ("a", "b")
    assert [p.type.value for p in plan.exposed_inputs] == [V]


def test_validate_errors():
    ms = _manifests(f=([("x", V)], [("y", V)]), g=([("y", S)], [("z", S)]))
    base = {"nodes": [{"id": "a", "actor": "f"}, {"id": "b", "actor": "g"}], "inputs": [["in", "a", "x"]]}
    with pytest.raises(PortTypeMismatch):
        validate_composition(composition_from_spec(dict(base, edges=[["a", "y", "b", "y"]])), _resolver(ms))
    with pytest.raises(DanglingPort):
        validate_composition(composition_from_spec(base), _resolver(ms))
    with pytest.raises(DanglingPort):
        validate_composition(composition_from_spec(dict(base, edges=[["a", "nope", "b", "y"]])), _resolver(ms))
    with pytest.raises(UnresolvedActor):
        validate_composition(composition_from_spec({"nodes": [{"id": "a", "actor": "missing"}]}), _resolver(ms))


def test_cycle_detected():
    with pytest.raises(CycleDetected):
        topological_order(["a", "b", "c"], [("a", "b"), ("b", "c"), ("c", "a")])


@st.composite
def dags(draw):
    n = draw(st.integers(1, 6))
    nodes = [f"n{i}" for i in range(n)]
    perm = draw(st.permutations(nodes))
    edges = [(perm[i], perm[j]) for i in range(n) for j in range(i + 1, n) if draw(st.booleans())]
    return nodes, edges


@settings(max_examples=150)
@given(dags())
def test_topological_order_matches_oracle(dag):
    nodes, edges = dag
    order = topological_order(nodes, edges)
    assert is_topological(order, edges)
    # lowest-id tie breaking means the result is the lexicographically smallest valid order
    assert tuple(order) == min(all_topological_orders(nodes, edges))
