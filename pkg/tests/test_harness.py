import json
import subprocess
import sys
from pathlib import Path

import pytest

import stratum
from stratum.errors import AssertionFailed, ScenarioError
from stratum.harness import load_scenario, run, run_checked, validate_scenario
from stratum.harness.cli import main
from stratum.model import codec
from stratum.model.signing import Principal
from stratum.model.types import Role

from helpers import ANOMALY, ais_spec, package

SCENARIOS = Path(stratum.__file__).parent / "scenarios"
BUNDLED = sorted(SCENARIOS.glob("*.json"))


def tiny(drop="0.0"):
    return {
        "seed": 1,
        "brokers": [{"id": "b"}],
        "providers": [{"id": "p", "brokers": ["b"], "packages": [
            ais_spec("anomaly", ANOMALY, [("r", "Vector")], [("flag", "Scalar")], tags=("sensor.anomaly",))]}],
        "nodes": [{"id": "dev"}],
        "links": [["dev", "b", 1, drop]],
        "script": [
            {"op": "publish", "provider": "p", "broker": "b", "actor_id": "anomaly"},
            {"op": "acquire", "node": "dev", "tags": ["sensor.*"], "as": "hs"},
            {"op": "invoke", "node": "dev", "service": "anomaly", "inputs": {"r": [40, 20]}, "as": "out"},
        ],
        "assertions": [{"name": "hs", "kind": "handshake", "ref": "hs", "state": "ONBOARDED"},
                       {"name": "flag", "kind": "output", "ref": "out", "port": "flag", "value": "Scalar 1"}],
    }


def test_bundled_scenarios_exist():
    assert {p.name for p in BUNDLED} == {"e2e_discovery.json", "offload.json", "data_policy_watchdog.json"}


@pytest.mark.parametrize("path", BUNDLED, ids=lambda p: p.stem)
def test_bundled_scenarios_pass(path):
    result = run_checked(load_scenario(path.read_bytes()))
    assert result.passed and result.assertions


def test_drop_rate_decides_handshake_outcome():
    assert run(validate_scenario(tiny())).passed
    failed = run(validate_scenario(tiny("1.0")))
    assert failed.refs["hs"]["ok"] == {"state": "FAILED", "reason": "Timeout"}
    with pytest.raises(AssertionFailed) as exc:
        run_checked(validate_scenario(tiny("1.0")))
    assert any(f.startswith("hs") for f in exc.value.failures)


def test_runs_are_reproducible():
    a = run(validate_scenario(tiny("0.5")), seed=9).trace_bytes()
    b = run(validate_scenario(tiny("0.5")), seed=9).trace_bytes()
    assert a == b


@pytest.mark.parametrize("mutate,msg", [
    (lambda d: d["nodes"].append({"id": "dev"}), "duplicate id"),
    (lambda d: d["script"].append({"op": "teleport"}), "unknown op"),
    (lambda d: d["script"].extend([{"op": "advance", "ticks": 1, "at": 5},
                                    {"op": "advance", "ticks": 1, "at": 2}]), "non-decreasing"),
    (lambda d: d["script"].append({"op": "invoke", "node": "ghost", "service": "x"}), "undeclared"),
    (lambda d: d["script"].append({"op": "invoke", "node": "dev"}), "missing"),
    (lambda d: d["assertions"].append(dict(d["assertions"][0])), "duplicate assertion"),
    (lambda d: d["assertions"].append({"name": "z", "kind": "vibes"}), "unknown kind"),
    (lambda d: d.update(seed="x"), "seed"),
])
def test_validation_errors(mutate, msg):
    doc = tiny()
    mutate(doc)
    with pytest.raises(ScenarioError, match=msg):
        validate_scenario(doc)


def test_load_rejects_non_json():
    with pytest.raises(ScenarioError):
        load_scenario(b"{nope")


# -- CLI --------------------------------------------------------------------


def test_cli_eval(tmp_path, capsys):
    prog = tmp_path / "a.dsl"
    prog.write_text(ANOMALY)
    assert main(["eval", str(prog), "--in", "r=[40, 20]"]) == 0
    assert capsys.readouterr().out.strip() == "Scalar 1"
    assert main(["eval", str(prog), "--in", "r=[1]"]) == 0
    assert capsys.readouterr().out.strip() == "Scalar 0"
    assert main(["eval", str(prog)]) == 1
    assert main(["eval", str(prog), "--in", "junk"]) == 2


def test_cli_usage_errors():
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["validate", "/nonexistent/file"]) == 2


def test_cli_validate(tmp_path, capsys):
    files = {
        "policy.json": b'[{"rule_id":"a","priority":2000,"action":"local_execute","effect":"DENY"}]',
        "prog.dsl": b"return 1",
        "pkg.json": codec.canonical_encode(package(ais_spec("a", "return x", [("x", "Scalar")], [("y", "Scalar")]))),
        "scenario.json": codec.dumps_doc(tiny()),
    }
    for name, data in files.items():
        (tmp_path / name).write_bytes(data)
        assert main(["validate", str(tmp_path / name)]) == 0, name
    (tmp_path / "bad.dsl").write_bytes(b"return (")
    assert main(["validate", str(tmp_path / "bad.dsl")]) == 1
    (tmp_path / "bad.json").write_bytes(b'[{"rule_id":"a"}]')
    assert main(["validate", str(tmp_path / "bad.json")]) == 1
    comp = {"schema": "Composition/1", "nodes": [{"node_id": "a", "actor_id": "x", "constraint": ">=1"},
                                                  {"node_id": "b", "actor_id": "y", "constraint": ">=1"}],
            "edges": [["a", "o", "b", "i"], ["b", "o", "a", "i"]], "exposed_inputs": [], "exposed_outputs": []}
    (tmp_path / "cycle.json").write_bytes(codec.dumps_doc(comp))
    code = main(["validate", str(tmp_path / "cycle.json")])
    assert code == 1, capsys.readouterr().out


def test_cli_sign_and_verify(tmp_path, capsys):
    prov = Principal.derive("cli-prov", Role.PROVIDER)
    pkg = package(ais_spec("a", "return x", [("x", "Scalar")], [("y", "Scalar")]), prov)
    (tmp_path / "manifest.json").write_bytes(codec.canonical_encode(pkg.manifest))
    (tmp_path / "payload.dsl").write_bytes(b"return add(x, 1)")
    (tmp_path / "key.hex").write_text(prov.private_key.hex())
    (tmp_path / "trust.json").write_bytes(codec.canonical_encode([prov.identity]))
    out = tmp_path / "signed.json"
    assert main(["package", "sign", str(tmp_path / "manifest.json"), str(tmp_path / "payload.dsl"),
                 "--key", str(tmp_path / "key.hex"), "--out", str(out)]) == 0
    assert main(["package", "verify", str(out), "--trust", str(tmp_path / "trust.json")]) == 0
    assert "VERIFIED a@1" in capsys.readouterr().out
    tampered = json.loads(out.read_bytes())
    tampered["payload"] = b"return x".hex()
    out.write_bytes(codec.dumps_doc(tampered))
    assert main(["package", "verify", str(out), "--trust", str(tmp_path / "trust.json")]) == 1
    assert "HashMismatch" in capsys.readouterr().out
    (tmp_path / "key.hex").write_text("abcd")
    assert main(["package", "sign", str(tmp_path / "manifest.json"), str(tmp_path / "payload.dsl"),
                 "--key", str(tmp_path / "key.hex")]) == 1


def test_cli_sim_run_is_deterministic(tmp_path):
    path = SCENARIOS / "e2e_discovery.json"
    outs = []
    for i in range(2):
        trace = tmp_path / f"t{i}.jsonl"
        proc = subprocess.run([sys.executable, "-m", "stratum.harness", "sim", "run", str(path), "--seed", "5",
                               "--trace", str(trace)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert "PASS anomaly_detected" in proc.stderr
        outs.append(trace.read_bytes())
    assert outs[0] == outs[1] and outs[0]
    for line in outs[0].splitlines():
        json.loads(line)
