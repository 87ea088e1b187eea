"""Scenario files: validation, deterministic execution and terminal-fact assertions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Mapping

from stratum.discovery import ServiceQuery
from stratum.errors import AssertionFailed, DecodeError, ScenarioError, StratumError
from stratum.harness.world import World, make_package, value_of
from stratum.management import Comparison, Origin, WatchdogSpec, parse_policy
from stratum.model import codec
from stratum.model.types import Kind
from stratum.model.values import format_value
from stratum.northbound import operator_credentials
from stratum.repository import Cause
from stratum.southbound import static_probe

log = logging.getLogger(__name__)

SCHEMA = "Scenario/1"

# op -> fields it must carry
SCRIPT_OPS: dict[str, tuple[str, ...]] = {
    "publish": ("provider", "broker", "actor_id"),
    "acquire": ("node", "tags"),
    "activate": ("node", "actor_id"),
    "lcm": ("node", "actor_id", "version", "cause"),
    "check_updates": ("node", "actor_id"),
    "invoke": ("node", "service"),
    "metric": ("node", "name", "value"),
    "partition": ("a", "b"),
    "heal": ("a", "b"),
    "advance": ("ticks",),
    "associate": ("node", "peer"),
    "redeploy": ("node", "peer", "actor_id"),
    "remote_invoke": ("node", "peer", "actor_id"),
    "bundle": ("data_provider", "node", "bundle_id", "data_classes", "payload"),
    "configure": ("node", "operator", "policy"),
    "provider_offline": ("provider",),
    "resume": ("node", "actor_id"),
}
ASSERTION_KINDS = ("handshake", "output", "error", "lcm", "association", "bundle", "suspended", "trace",
                   "policy_version", "ok")


@dataclass
class Scenario:
    seed: int
    doc: dict

    @property
    def nodes(self) -> list[dict]:
        return self.doc.get("nodes", [])


@dataclass
class AssertionResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class RunResult:
    trace: list[bytes]
    assertions: list[AssertionResult] = field(default_factory=list)
    refs: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions)

    @property
    def failures(self) -> list[str]:
        return [f"{a.name}: {a.detail}" for a in self.assertions if not a.passed]

    def trace_bytes(self) -> bytes:
        return b"".join(line + b"\n" for line in self.trace)


def _need(cond: bool, msg: str) -> None:
    if not cond:
        raise ScenarioError(msg)


def load_scenario(data: bytes | str) -> Scenario:
    try:
        doc = codec.loads(data)
    except DecodeError as exc:
        raise ScenarioError(f"scenario is not canonical text: {exc}") from exc
    return validate_scenario(doc)


def validate_scenario(doc: Any) -> Scenario:
    _need(isinstance(doc, dict), "scenario must be an object")
    _need(doc.get("schema", SCHEMA) == SCHEMA, f"unsupported schema {doc.get('schema')!r}")
    seed = doc.get("seed", 0)
    _need(isinstance(seed, int) and not isinstance(seed, bool), "seed must be an integer")
    ids: dict[str, str] = {}
    for section, role in (("nodes", "stratum"), ("brokers", "broker"), ("providers", "provider"),
                          ("data_providers", "data_provider"), ("operators", "operator")):
        entries = doc.get(section, [])
        _need(isinstance(entries, list), f"{section} must be a list")
        for e in entries:
            _need(isinstance(e, dict) and isinstance(e.get("id"), str) and e["id"], f"{section}: entry without id")
            _need(e["id"] not in ids, f"duplicate id {e['id']!r}")
            ids[e["id"]] = role

    def ref(x, *roles):
        _need(ids.get(x) in roles, f"undeclared {'/'.join(roles)} {x!r}")

    for p in doc.get("providers", []):
        for b in p.get("brokers", []):
            ref(b, "broker")
        for spec in p.get("packages", []):
            _need(isinstance(spec, dict) and "actor_id" in spec, f"provider {p['id']}: package without actor_id")
    for link in doc.get("links", []):
        _need(isinstance(link, list) and len(link) in (2, 3, 4), f"bad link {link!r}")
        ref(link[0], *set(ids.values()))
        ref(link[1], *set(ids.values()))
    last = 0
    for i, ev in enumerate(doc.get("script", [])):
        _need(isinstance(ev, dict), f"script[{i}] must be an object")
        op = ev.get("op")
        _need(op in SCRIPT_OPS, f"script[{i}]: unknown op {op!r}")
        at = ev.get("at", last)
        _need(isinstance(at, int) and at >= last, f"script[{i}]: event times must be non-decreasing")
        last = at
        for f in SCRIPT_OPS[op]:
            _need(f in ev, f"script[{i}] ({op}): missing {f!r}")
        for f, roles in (("node", ("stratum",)), ("peer", ("stratum",)), ("provider", ("provider",)),
                         ("broker", ("broker",)), ("data_provider", ("data_provider",)),
                         ("operator", ("operator",))):
            if f in ev:
                ref(ev[f], *roles)
    names = set()
    for i, a in enumerate(doc.get("assertions", [])):
        _need(isinstance(a, dict) and isinstance(a.get("name"), str), f"assertions[{i}] needs a name")
        _need(a["name"] not in names, f"duplicate assertion name {a['name']!r}")
        names.add(a["name"])
        _need(a.get("kind") in ASSERTION_KINDS, f"assertion {a['name']!r}: unknown kind {a.get('kind')!r}")
        if "node" in a:
            ref(a["node"], "stratum")
    return Scenario(seed, doc)


class Runner:
    def __init__(self, scenario: Scenario, seed: int | None = None) -> None:
        self.sc = scenario
        self.seed = scenario.seed if seed is None else seed
        self.world = World(self.seed)
        self.refs: dict[str, Any] = {}
        self.net = self.world.net

    # -- setup -------------------------------------------------------------

    def build(self) -> None:
        doc, w = self.sc.doc, self.world
        for b in doc.get("brokers", []):
            w.add_broker(b["id"])
        for p in doc.get("providers", []):
            w.add_provider(p["id"])
        for d in doc.get("data_providers", []):
            w.add_data_provider(d["id"])
        for o in doc.get("operators", []):
            w.add_operator(o["id"])
        for n in doc.get("nodes", []):
            kwargs = {k: n[k] for k in ("hardware_class", "mem_units", "compute_units", "features", "software",
                                        "topologies", "timeout", "gossip_period") if k in n}
            s = w.add_stratum(n["id"], **kwargs)
            if "policy" in n:
                text = n["policy"] if isinstance(n["policy"], str) else codec.dumps_doc(n["policy"]).decode()
                s.management.policy.configure(parse_policy(text))
            for pr in n.get("probes", []):
                s.device.register_probe(static_probe(pr["id"], pr.get("kind", "resource"), pr.get("output", {})))
            for wd in n.get("watchdogs", []):
                s.management.add_watchdog(WatchdogSpec(
                    wd["id"], tuple(Comparison.parse(c) for c in wd["condition"]), wd["action"],
                    int(wd.get("period", 1)), wd.get("actor_id")))
        w.wire_trust()
        for link in doc.get("links", []):
            a, b = link[0], link[1]
            latency = int(link[2]) if len(link) > 2 else 1
            drop = codec.dec_decimal(link[3]) if len(link) > 3 else 0.0
            self.net.link(a, b, latency, drop)
        self.net.connect_all(int(doc.get("default_latency", 1)))
        for p in doc.get("providers", []):
            prov = w.providers[p["id"]]
            for bid in p.get("brokers", []):
                prov.register_with(w.brokers[bid])
            for spec in p.get("packages", []):
                pkg = make_package(prov.principal, spec)
                prov.add_package(pkg)
            if "policy" in p:
                # provider-supplied execution rules ride along with its packages
                rules = parse_policy(codec.dumps_doc(p["policy"]))
                _need(all(r.origin is Origin.PROVIDER for r in rules), f"provider {p['id']}: rules must be provider-origin")
                for nid in sorted(w.strata):
                    w.strata[nid].management.policy.merge_external(prov.node_id, rules)

    # -- script ------------------------------------------------------------

    def run(self) -> RunResult:
        self.build()
        for i, ev in enumerate(self.sc.doc.get("script", [])):
            self.net.advance_to(int(ev.get("at", self.net.now)))
            ref = ev.get("as", f"#{i}")
            self.net.record("script", op=ev["op"], ref=ref)
            try:
                self.refs[ref] = {"ok": self._do(ev)}
            except StratumError as exc:
                self.refs[ref] = {"error": type(exc).__name__, "message": str(exc)}
                self.net.record("script-error", ref=ref, error=type(exc).__name__)
        end = self.sc.doc.get("end_tick")
        if end is not None:
            self.net.advance_to(int(end))
        results = [self._check(a) for a in self.sc.doc.get("assertions", [])]
        return RunResult(self.net.trace_lines(), results, self.refs)

    def _node(self, ev):
        return self.world.strata[ev["node"]]

    def _do(self, ev: Mapping) -> Any:
        op, w = ev["op"], self.world
        if op == "publish":
            prov, broker = w.providers[ev["provider"]], w.brokers[ev["broker"]]
            e = prov.publish_to(broker, ev["actor_id"], int(ev.get("version", 1)), ev.get("endpoint", "relay"),
                                bool(ev.get("cache", True)))
            return list(e.key)
        if op == "acquire":
            s = self._node(ev)
            q = ServiceQuery(frozenset(ev["tags"]), max_results=int(ev.get("max_results", 10)))
            session = s.westbound.acquire(q, ev.get("brokers"), ev.get("index"), ev.get("timeout"))
            out = {"state": session.state.value}
            if session.failure is not None:
                out["reason"] = session.failure.value
            if session.result is not None:
                m = session.result.manifest
                out["service_id"] = m.service_id
                if m.kind is Kind.FGIS:
                    out["dependencies"] = s.westbound.acquire_dependencies(m.actor_id, m.version, ev.get("brokers"))
                if ev.get("activate", True):
                    self._lcm(s, m.actor_id, m.version, Cause.ACTIVATE)
            return out
        if op == "activate":
            s = self._node(ev)
            rec = s.repository.resolve_record(ev["actor_id"], str(ev.get("constraint", ">=1")))
            self._lcm(s, rec.actor_id, rec.version, Cause.ACTIVATE)
            return rec.version
        if op == "lcm":
            s = self._node(ev)
            self._lcm(s, ev["actor_id"], int(ev["version"]), Cause(ev["cause"]))
            return s.repository.get(ev["actor_id"], int(ev["version"])).lcm_state.value
        if op == "check_updates":
            r = self._node(ev).westbound.check_updates(ev["actor_id"], ev.get("brokers"), ev.get("timeout"))
            return {"status": r.status, "version": r.version}
        if op == "invoke":
            s = self._node(ev)
            app = s.northbound.register_app(ev.get("app", "app"))
            inputs = {k: value_of(v) for k, v in ev.get("inputs", {}).items()}
            out = s.northbound.invoke(app, ev["service"], inputs)
            return {k: format_value(out[k]) for k in sorted(out)}
        if op == "metric":
            self._node(ev).record_metric(ev["name"], codec.dec_decimal(ev["value"]))
            return None
        if op in ("partition", "heal"):
            self.net.set_link_up(ev["a"], ev["b"], op == "heal")
            return None
        if op == "advance":
            self.net.advance(int(ev["ticks"]))
            return self.net.now
        if op == "associate":
            a = self._node(ev).eastbound.associate_sync(ev["peer"], ev.get("topologies"), ev.get("kind", "peer"))
            return {"state": a.state.value, "topology": a.topology}
        if op == "redeploy":
            h = self._node(ev).eastbound.redeploy(ev["actor_id"], int(ev.get("version", 1)), ev["peer"])
            return [h.peer_id, h.actor_id, h.version]
        if op == "remote_invoke":
            s = self._node(ev)
            key = (ev["peer"], ev["actor_id"], int(ev.get("version", 1)))
            handle = s.eastbound.handles.get(key) or s.eastbound.redeploy(key[1], key[2], key[0])
            out = s.eastbound.remote_invoke(handle, {k: value_of(v) for k, v in ev.get("inputs", {}).items()})
            return {k: format_value(out[k]) for k in sorted(out)}
        if op == "bundle":
            dp = w.data_providers[ev["data_provider"]]
            b = dp.make_bundle(ev["bundle_id"], ev["data_classes"],
                               {k: value_of(v) for k, v in ev["payload"].items()},
                               ev.get("purpose", "inference_support"), int(ev.get("retention_ticks", 1)))
            dp.send_bundle(ev["node"], b)
            return None
        if op == "configure":
            s = self._node(ev)
            op_principal = w.operators[ev["operator"]]
            session = s.northbound.operator_session(op_principal.principal_id,
                                                    operator_credentials(op_principal, s.node_id))
            text = ev["policy"] if isinstance(ev["policy"], str) else codec.dumps_doc(ev["policy"]).decode()
            return s.northbound.configure(session, text)
        if op == "provider_offline":
            w.providers[ev["provider"]].online = bool(ev.get("online", False))
            return None
        if op == "resume":
            self._node(ev).resume(ev["actor_id"])
            return None
        raise ScenarioError(f"unknown op {op!r}")

    @staticmethod
    def _lcm(s, actor_id: str, version: int, cause: Cause) -> None:
        rec = s.repository.get(actor_id, version)
        m = rec.manifest
        token = s.management.authorize_lcm(cause, actor_id, m.tags, m.data_classes)
        s.repository.transition(actor_id, version, cause, token)

    # -- assertions ----------------------------------------------------------

    def _check(self, a: Mapping) -> AssertionResult:
        try:
            ok, detail = self._evaluate(a)
        except (StratumError, KeyError, TypeError, ValueError) as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        return AssertionResult(a["name"], ok, detail)

    def _evaluate(self, a: Mapping) -> tuple[bool, str]:
        kind = a["kind"]
        got: Any
        if kind in ("handshake", "output", "error", "ok"):
            r = self.refs.get(a["ref"])
            if r is None:
                return False, f"no script result named {a['ref']!r}"
            if kind == "error":
                got = r.get("error")
                return got == a["error"], f"error {got!r}"
            if "error" in r:
                return False, f"{a['ref']} raised {r['error']}: {r['message']}"
            if kind == "ok":
                return True, ""
            if kind == "handshake":
                got = (r["ok"]["state"], r["ok"].get("reason"))
                want = (a["state"], a.get("reason"))
                return got == want, f"handshake {got!r}"
            got = r["ok"].get(a["port"])
            return got == a["value"], f"output {got!r}"
        if kind == "trace":
            want = {k: v for k, v in a["match"].items()}
            hits = [e for e in self.net.trace if all(e.get(k) == v for k, v in want.items())]
            n = int(a.get("count", -1))
            ok = bool(hits) if n < 0 else len(hits) == n
            return ok, f"{len(hits)} matching trace entries"
        s = self.world.strata[a["node"]]
        if kind == "lcm":
            rec = s.repository.find(a["actor_id"], int(a["version"]))
            got = None if rec is None else rec.lcm_state.value
            return got == a["state"], f"state {got!r}"
        if kind == "association":
            assoc = s.eastbound.associations.get(a["peer"])
            got = None if assoc is None else assoc.state.value
            return got == a["state"], f"state {got!r}"
        if kind == "bundle":
            got = a["bundle_id"] in s.westbound.bundles
            return got == bool(a["present"]), f"present={got}"
        if kind == "suspended":
            got = a["actor_id"] in s.suspended
            return got == bool(a.get("value", True)), f"suspended={got}"
        if kind == "policy_version":
            got = s.management.policy.version
            return got == int(a["version"]), f"version {got}"
        return False, f"unknown assertion kind {kind!r}"


def run(scenario: Scenario, seed: int | None = None) -> RunResult:
    return Runner(scenario, seed).run()


def run_checked(scenario: Scenario, seed: int | None = None) -> RunResult:
    result = run(scenario, seed)
    if not result.passed:
        raise AssertionFailed(result.failures)
    return result
