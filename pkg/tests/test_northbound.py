import json

import pytest

from stratum.discovery import ServiceQuery
from stratum.errors import Denied, InsufficientResources, InvalidSession, PolicyRevoked, Suspended, UnknownService
from stratum.management import Rule, encode_policy
from stratum.model import codec
from stratum.model.signing import Principal
from stratum.model.types import Role
from stratum.model.values import Scalar, Vector
from stratum.northbound import operator_credentials
from stratum.repository import Cause
from stratum.stratum import make_stratum

from helpers import ais_spec, fgis_spec, install, lcm, package, permit_offload, two_strata

DOUBLE = ais_spec("double", "return scale(v, 2)", [("v", "Vector")], [("w", "Vector")], tags=("math.vec",))
TOTAL = ais_spec("total", "return sum(w)", [("w", "Vector")], [("s", "Scalar")], tags=("math.vec", "math.sum"))
PIPE = fgis_spec("pipe", [("a", "double"), ("b", "total")], [("a", "w", "b", "w")], [("v", "Vector")],
                 [("s", "Scalar")], [("v", "a", "v")], [("s", "b", "s")], tags=("math.pipeline",))


def node(**kw):
    s = make_stratum("dev", **kw)
    for spec in (DOUBLE, TOTAL, PIPE):
        install(s, package(spec))
    return s


def test_sessions():
    s = node()
    nb = s.northbound
    sess = nb.register_app("app")
    assert nb.invoke(sess, "total", {"w": Vector([1, 2])}) == {"s": Scalar(3.0)}
    with pytest.raises(InvalidSession):
        nb.invoke("nope", "total", {})
    s.management.policy.configure([Rule("bar", 2000, "expose_service", "DENY", app="rogue")])
    with pytest.raises(Denied):
        nb.register_app("rogue")


def test_discover_ranks_active_services():
    s = node()
    install(s, package(ais_spec("idle", "return sum(w)", [("w", "Vector")], [("s", "Scalar")],
                                tags=("math.vec", "math.sum", "math.x"))), activate=False)
    sess = s.northbound.register_app("app")
    found = s.northbound.discover(sess, ServiceQuery({"math.*"}))
    assert [d.service_id for d in found] == ["total@1", "double@1", "pipe@1"]
    assert dict(found[0].links)["invoke"] == "nb://dev/total@1/invoke"
    assert [d.service_id for d in s.northbound.discover(sess, ServiceQuery({"math.*"}, max_results=1))] == ["total@1"]
    typed = s.northbound.discover(sess, ServiceQuery({"math.*"}, output_types=("Vector",)))
    assert [d.service_id for d in typed] == ["double@1"]


def test_describe():
    s = node()
    sess = s.northbound.register_app("app")
    doc = s.northbound.describe(sess, "double@1")
    assert doc["manifest"]["schema"] == "ActorManifest/1"
    with pytest.raises(UnknownService):
        s.northbound.describe(sess, "missing")


def test_invoke_checks():
    s = node()
    nb = s.northbound
    sess = nb.register_app("app")
    with pytest.raises(UnknownService):
        nb.invoke(sess, "double@7", {})
    s.suspend("double")
    with pytest.raises(Suspended):
        nb.invoke(sess, "double", {"v": Vector([1])})
    s.resume("double")
    s.management.policy.configure([Rule("no", 2000, "local_execute", "DENY", app="app", actor="double")])
    with pytest.raises(Denied):
        nb.invoke(sess, "double", {"v": Vector([1])})
    assert nb.invoke(nb.register_app("other"), "double", {"v": Vector([1])}) == {"w": Vector([2])}


def test_constrain_limits_reservations():
    s = node()
    sess = s.northbound.register_app("app")
    s.management.policy.configure([Rule("cap", 2000, "local_execute", "CONSTRAIN", limits={"mem_units": 0})])
    with pytest.raises(Denied):
        s.northbound.invoke(sess, "total", {"w": Vector([1])})
    s2 = node(mem_units=0)
    with pytest.raises(InsufficientResources):
        s2.northbound.invoke(s2.northbound.register_app("app"), "total", {"w": Vector([1])})


def test_fgis_runs_locally_by_default():
    s = node()
    out = s.northbound.invoke(s.northbound.register_app("app"), "pipe", {"v": Vector([1, 2, 3])})
    assert out == {"s": Scalar(12.0)}
    placement = [e for e in s.local_trace if e["event"] == "placement"][-1]
    assert placement["assignment"] == {"a": "dev", "b": "dev"}


def _offload_world():
    w, a, b = two_strata()
    for spec in (DOUBLE, TOTAL, PIPE):
        install(a, package(spec))
    a.eastbound.associate_sync("beta")
    a.record_metric("cpu_load", 0.9)
    a.record_metric("mem_pressure", 0.8)
    return w, a, b


def test_fgis_offloads_to_idle_peer_when_permitted():
    w, a, b = _offload_world()
    sess = a.northbound.register_app("app")
    # remote execution is default-deny
    a.northbound.invoke(sess, "pipe", {"v": Vector([1])})
    assert [e for e in w.net.trace if e["event"] == "placement"][-1]["assignment"] == {"a": "alpha", "b": "alpha"}
    permit_offload(a)
    out = a.northbound.invoke(sess, "pipe", {"v": Vector([1, 2, 3])})
    assert out == {"s": Scalar(12.0)}
    assert [e for e in w.net.trace if e["event"] == "placement"][-1]["assignment"] == {"a": "beta", "b": "beta"}
    assert b.repository.get("double", 1).redeployed_from == "alpha"


def test_suspended_node_revokes_execution():
    s = node()
    s.suspend("total")
    with pytest.raises(PolicyRevoked):
        s.northbound.invoke(s.northbound.register_app("app"), "pipe", {"v": Vector([1])})


def test_support_data_required():
    s = make_stratum("dev")
    dp = Principal.derive("met", Role.DATA_PROVIDER)
    s.trust.add(dp.identity)
    install(s, package(ais_spec("fc", "return mean(temp)", [("temp", "Vector")], [("t", "Scalar")],
                                data_classes=("weather",), requires_support_data=True)))
    sess = s.northbound.register_app("app")
    with pytest.raises(Denied):
        s.northbound.invoke(sess, "fc", {})
    from stratum.westbound import DataProvider

    bundle = DataProvider(dp).make_bundle("b", {"weather"}, {"temp": Vector([4, 6])}, retention_ticks=2)
    s.westbound.ingest_data(bundle)
    assert s.northbound.invoke(sess, "fc", {}) == {"t": Scalar(5.0)}
    # caller inputs take precedence over bundle values
    assert s.northbound.invoke(sess, "fc", {"temp": Vector([1])}) == {"t": Scalar(1.0)}


def test_operator_configuration():
    s = node()
    op = Principal.derive("owner", Role.OPERATOR)
    s.trust.add(op.identity)
    app = s.northbound.register_app("app")
    policy = encode_policy([Rule("no", 2000, "local_execute", "DENY", actor="total")])
    with pytest.raises(Denied):
        s.northbound.configure(app, policy)
    with pytest.raises(Denied):
        s.northbound.operator_session("owner", b"garbage")
    sess = s.northbound.operator_session("owner", operator_credentials(op, "dev"))
    assert s.northbound.configure(sess, policy) == 1
    with pytest.raises(Denied):
        s.northbound.invoke(app, "total", {"w": Vector([1])})


def test_update_events():
    s = node()
    sess = s.northbound.register_app("app")
    stream = s.northbound.subscribe_updates(sess, "total")
    install(s, package(dict(TOTAL, version=2)), activate=False)
    lcm(s, "total", 1, Cause.UPDATE_BEGIN)
    lcm(s, "total", 2, Cause.ACTIVATE)
    s.repository.transition("total", 1, Cause.UPDATE_COMMIT, s.management.issue_token("total", Cause.UPDATE_COMMIT))
    s.suspend("total")
    lcm(s, "total", 1, Cause.DEPRECATE)
    kinds = [(e.kind, e.version) for e in stream]
    assert ("UPDATED", 2) in kinds and ("SUSPENDED", None) in kinds and ("DEPRECATED", 1) in kinds
    assert [e.seq for e in stream] == sorted(e.seq for e in stream)
    assert json.loads(stream.lines()[0])["actor_id"] == "total"
    with pytest.raises(UnknownService):
        s.northbound.subscribe_updates(sess, "ghost")


def test_line_transport():
    s = node()
    nb = s.northbound
    reg = json.loads(nb.handle_request(b'{"op":"register_app","body":{"app_id":"cli"},"correlation_id":"1"}'))
    assert reg["ok"] and reg["correlation_id"] == "1"
    req = {"op": "invoke", "session": reg["body"]["session"], "correlation_id": "2",
           "body": {"service_id": "total", "inputs": codec.values_doc({"w": Vector([2, 3])})}}
    resp = json.loads(nb.handle_request(codec.dumps_doc(req)))
    assert codec.values_from(resp["body"]["outputs"]) == {"s": Scalar(5.0)}
    bad = json.loads(nb.handle_request(b'{"op":"invoke","session":"x","body":{"service_id":"total","inputs":{}}}'))
    assert bad["ok"] is False and bad["error"]["type"] == "InvalidSession"
    junk = json.loads(nb.handle_request(b"nonsense"))
    assert junk["error"]["type"] == "DecodeError"
