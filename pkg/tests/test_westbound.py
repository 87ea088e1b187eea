from dataclasses import replace

import pytest

from stratum.discovery import ServiceQuery
from stratum.errors import BadSignature, Denied, IllegalState, NoMatchingActor, NoTrustedBroker
from stratum.harness.world import make_package
from stratum.management import Rule
from stratum.model import codec
from stratum.model.values import Scalar, Vector
from stratum.repository import Cause, LcmState
from stratum.westbound import FailReason, HsState, Purpose, hs_legal

from helpers import ANOMALY, ais_spec, discovery_world, lcm

Q = ServiceQuery({"sensor.*"})


def test_handshake_reaches_onboarded():
    w, b, p, d = discovery_world()
    s = d.westbound.acquire(Q)
    assert s.state is HsState.ONBOARDED
    assert s.history == [HsState.IDLE, HsState.QUERIED, HsState.OFFERED, HsState.SELECTED, HsState.PROVISIONING,
                         HsState.VERIFYING, HsState.ONBOARDED]
    assert d.repository.get("anomaly", 1).lcm_state is LcmState.READY


def test_dropped_links_time_out():
    w, b, p, d = discovery_world(drop=1.0)
    s = d.westbound.acquire(Q)
    assert (s.state, s.failure) == (HsState.FAILED, FailReason.TIMEOUT)
    assert d.repository.records() == []


def test_no_offer():
    w, b, p, d = discovery_world()
    s = d.westbound.acquire(ServiceQuery({"nothing"}))
    assert (s.state, s.failure) == (HsState.FAILED, FailReason.NO_OFFER)


def test_tampered_relay_is_integrity_failure():
    w, b, p, d = discovery_world(cache=False)
    pkg = codec.canonical_decode(p.packages[("anomaly", 1)])
    p.packages[("anomaly", 1)] = codec.canonical_encode(replace(pkg, payload=b"return threshold(mean(r), 1)"))
    before = d.repository.snapshot()
    s = d.westbound.acquire(Q)
    assert (s.state, s.failure) == (HsState.FAILED, FailReason.INTEGRITY)
    assert d.repository.snapshot() == before


def test_policy_rejection_blocks_onboarding():
    w, b, p, d = discovery_world()
    d.management.policy.configure([Rule("no", 2000, "onboard", "DENY", tag="sensor.*")])
    s = d.westbound.acquire(Q)
    assert s.failure is FailReason.POLICY and d.repository.records() == []


def test_duplicate_version():
    w, b, p, d = discovery_world()
    d.westbound.acquire(Q)
    assert d.westbound.acquire(Q).failure is FailReason.DUPLICATE


def test_untrusted_brokers_are_not_queried():
    w, b, p, d = discovery_world()
    d.trust.remove("broker")
    with pytest.raises(NoTrustedBroker):
        d.westbound.query_brokers(Q)


def test_state_machine_is_forward_only():
    assert hs_legal(HsState.IDLE, HsState.QUERIED)
    assert hs_legal(HsState.PROVISIONING, HsState.FAILED)
    assert not hs_legal(HsState.QUERIED, HsState.SELECTED)
    assert not hs_legal(HsState.ONBOARDED, HsState.FAILED)
    w, b, p, d = discovery_world()
    s = d.westbound.query_brokers(Q)
    with pytest.raises(IllegalState):
        d.westbound.provision(s)


def test_ranking_prefers_overlap_then_size():
    specs = [
        ais_spec("small", ANOMALY, [("r", "Vector")], [("flag", "Scalar")], tags=("sensor.anomaly",)),
        ais_spec("wide", ANOMALY + "  ", [("r", "Vector")], [("flag", "Scalar")],
                 tags=("sensor.anomaly", "sensor.temp")),
    ]
    w, b, p, d = discovery_world(specs=specs)
    s = d.westbound.acquire(Q)
    assert s.chosen.summary.actor_id == "wide"
    assert d.repository.find("small", 1) is None


def _activate(d, aid, v):
    lcm(d, aid, v, Cause.ACTIVATE)


def test_update_replaces_active_version():
    w, b, p, d = discovery_world()
    d.westbound.acquire(Q)
    _activate(d, "anomaly", 1)
    assert d.westbound.check_updates("anomaly").status == "UpToDate"
    v2 = make_package(p.principal, ais_spec("anomaly", "return threshold(mean(r), 20)", [("r", "Vector")],
                                            [("flag", "Scalar")], version=2, tags=("sensor.anomaly",)))
    p.add_package(v2)
    p.publish_to(b, "anomaly", 2)
    res = d.westbound.check_updates("anomaly")
    assert (res.status, res.version) == ("Updated", 2)
    assert d.repository.get("anomaly", 2).lcm_state is LcmState.ACTIVE
    assert d.repository.get("anomaly", 1).lcm_state is LcmState.ACTIVE
    assert d.repository.resolve("anomaly").version == 2


def test_failed_update_keeps_old_version_active():
    w, b, p, d = discovery_world(cache=False)
    d.westbound.acquire(Q)
    _activate(d, "anomaly", 1)
    v2 = make_package(p.principal, ais_spec("anomaly", ANOMALY, [("r", "Vector")], [("flag", "Scalar")], version=2,
                                            tags=("sensor.anomaly",)))
    p.add_package(v2)
    p.publish_to(b, "anomaly", 2, cache=False)
    p.online = False
    res = d.westbound.check_updates("anomaly")
    assert res.status == "Failed"
    assert d.repository.get("anomaly", 1).lcm_state is LcmState.ACTIVE
    assert d.repository.find("anomaly", 2) is None


# -- data bundles ---------------------------------------------------------------


def data_world():
    specs = [ais_spec("forecast", "return mean(temp)", [("temp", "Vector")], [("t", "Scalar")], tags=("weather",),
                      data_classes=("weather",))]
    w, b, p, d = discovery_world(specs=specs)
    dp = w.add_data_provider("met")
    d.trust.add(dp.principal.identity)
    d.westbound.acquire(ServiceQuery({"weather"}))
    return w, d, dp


def test_bundles_are_confined_and_evicted():
    w, d, dp = data_world()
    bundle = dp.make_bundle("b1", {"weather"}, {"temp": Vector([10, 14])}, retention_ticks=3)
    assert d.westbound.ingest_data(bundle) == ["forecast"]
    m = d.repository.resolve("forecast")
    assert d.westbound.bundle_inputs(m) == {"temp": Vector([10, 14])}
    w.net.advance(2)
    assert d.westbound.readable_bundles(m)
    w.net.advance(1)
    assert d.westbound.readable_bundles(m) == [] and "b1" not in d.westbound.bundles


def test_training_bundles_never_feed_inference():
    w, d, dp = data_world()
    d.westbound.ingest_data(dp.make_bundle("t1", {"weather"}, {"temp": Vector([1])}, purpose="training",
                                           retention_ticks=10))
    m = d.repository.resolve("forecast")
    assert d.westbound.bundle_inputs(m) == {}
    assert [b.bundle_id for b in d.westbound.readable_bundles(m, Purpose.TRAINING)] == ["t1"]


def test_bundle_rejections():
    w, d, dp = data_world()
    good = dp.make_bundle("b1", {"weather"}, {"temp": Vector([1])})
    with pytest.raises(BadSignature):
        d.westbound.ingest_data(replace(good, payload={"temp": Vector([99])}))
    with pytest.raises(NoMatchingActor):
        d.westbound.ingest_data(dp.make_bundle("b2", {"audio"}, {"x": Scalar(1)}))
    d.management.policy.configure([Rule("noin", 2000, "ingest_data", "DENY", data_class="weather")])
    with pytest.raises(Denied):
        d.westbound.ingest_data(good)


def test_bundles_arrive_over_the_network():
    w, d, dp = data_world()
    w.net.link("met", "device", 1)
    dp.send_bundle("device", dp.make_bundle("net1", {"weather"}, {"temp": Vector([3])}, retention_ticks=5))
    w.net.advance(1)
    assert "net1" in d.westbound.bundles
