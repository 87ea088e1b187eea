import threading

import pytest
from hypothesis import given, strategies as st

from stratum.errors import DuplicateProbe, InsufficientResources
from stratum.model import codec
from stratum.model.types import Requirements
from stratum.southbound import CapabilityReport, DeviceManager, Probe, admissible, static_probe


def test_static_report_and_admission():
    dm = DeviceManager("d", "cpu", 8, 2, software=("onnx",))
    r = dm.report
    assert (r.mem_units, r.compute_units, r.report_version) == (8, 2, 1)
    assert admissible(Requirements(8, 2, {"dsl-1"}), r)
    assert not admissible(Requirements(9, 1), r)
    assert not admissible(Requirements(1, 1, {"gpu"}), r)


def test_probes_bump_version_only_on_change():
    dm = DeviceManager("d", "cpu", 8, 2)
    seen = []
    dm.on_report_change(seen.append)
    dm.register_probe(static_probe("hw", "hardware", {"hardware_class": "gpu", "features": ["gpu"]}))
    run = dm.run_probes(1)
    assert run.changed and run.report.report_version == 2 and run.report.hardware_class.value == "gpu"
    assert not dm.run_probes(2).changed
    assert len(seen) == 1
    with pytest.raises(DuplicateProbe):
        dm.register_probe(static_probe("hw", "software", {}))


def test_resource_probes_feed_metrics():
    got = []
    dm = DeviceManager("d", metrics_sink=got.append)
    dm.register_probe(Probe("load", "resource", lambda now: {"cpu_load": now / 10}))
    dm.run_probes(3)
    assert [(s.name, s.value, s.tick) for s in got] == [("cpu_load", 0.3, 3)]


def test_reservations():
    dm = DeviceManager("d", "cpu", 4, 2)
    a = dm.reserve(Requirements(3, 1), "app")
    with pytest.raises(InsufficientResources):
        dm.reserve(Requirements(2, 1), "app")
    dm.release(a)
    assert dm.reserved() == (0, 0)
    dm.reserve(Requirements(1, 1), "app", limits={"mem_units": 2})
    with pytest.raises(InsufficientResources):
        dm.reserve(Requirements(2, 0), "app", limits={"mem_units": 2})
    dm.reserve(Requirements(2, 0), "other", limits={"mem_units": 2})


def test_concurrent_reservations_never_oversubscribe():
    dm = DeviceManager("d", "cpu", 50, 50)
    wins = []

    def grab():
        try:
            wins.append(dm.reserve(Requirements(1, 1)))
        except InsufficientResources:
            pass

    threads = [threading.Thread(target=grab) for _ in range(200)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(wins) == 50 and dm.reserved() == (50, 50)


@given(st.integers(0, 100), st.integers(0, 100), st.frozensets(st.sampled_from(["dsl-1", "gpu", "npu"])))
def test_report_roundtrip(mem, cpu, feats):
    r = CapabilityReport("d", "npu", mem, cpu, feats, {"x"}, 3)
    assert codec.canonical_decode(codec.canonical_encode(r)) == r


def test_negative_capacity_rejected():
    with pytest.raises(ValueError):
        CapabilityReport("d", "cpu", -1, 0)
