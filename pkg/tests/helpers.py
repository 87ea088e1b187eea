"""Fixture builders shared by the test modules."""

from stratum.harness.world import World, make_package
from stratum.management import Action, Effect, Origin, Rule
from stratum.model.signing import Principal
from stratum.model.types import Role
from stratum.repository import Cause, Repository
from stratum.management import ManagementEngine

ANOMALY = "return threshold(mean(r), 30)"


def ais_spec(actor_id, behavior, inputs, outputs, version=1, tags=("t.x",), **extra):
    spec = {"actor_id": actor_id, "version": version, "tags": list(tags), "inputs": [list(p) for p in inputs],
            "outputs": [list(p) for p in outputs], "behavior": behavior,
            "requirements": extra.pop("requirements", {"mem_units": 1, "compute_units": 1})}
    spec.update(extra)
    return spec


def fgis_spec(actor_id, nodes, edges, inputs, outputs, exposed_in, exposed_out, version=1, tags=("t.chain",)):
    return {"actor_id": actor_id, "version": version, "kind": "FGIS", "tags": list(tags),
            "inputs": [list(p) for p in inputs], "outputs": [list(p) for p in outputs],
            "requirements": {"mem_units": 0, "compute_units": 0},
            "composition": {"nodes": [{"id": n, "actor": a} for n, a in nodes], "edges": [list(e) for e in edges],
                            "inputs": [list(b) for b in exposed_in], "outputs": [list(b) for b in exposed_out]}}


PROVIDER = Principal.derive("prov", Role.PROVIDER, "tests")


def package(spec, principal=PROVIDER):
    return make_package(principal, spec)


def lcm(stratum, actor_id, version, *causes):
    for cause in causes:
        m = stratum.repository.get(actor_id, version).manifest
        token = stratum.management.authorize_lcm(cause, actor_id, m.tags, m.data_classes)
        stratum.repository.transition(actor_id, version, cause, token)


def install(stratum, pkg, activate=True):
    """Onboard a package directly (bypassing the broker) and bring it to READY/ACTIVE."""
    from stratum.model.signing import verify_package

    if PROVIDER.principal_id not in stratum.trust:
        stratum.trust.add(PROVIDER.identity)
    stratum.repository.onboard(verify_package(pkg, stratum.trust))
    m = pkg.manifest
    lcm(stratum, m.actor_id, m.version, Cause.SETUP, *((Cause.ACTIVATE,) if activate else ()))
    return m


def operator_rule(rule_id, priority, action, effect, **kw):
    return Rule(rule_id, priority, Action(action), Effect(effect), origin=Origin.OPERATOR, **kw)


def permit_offload(stratum):
    stratum.management.policy.configure(
        list(stratum.management.policy.active.rules)
        + [operator_rule("allow-remote", 2900, "remote_execute", "PERMIT"),
           operator_rule("allow-outbound", 2901, "outbound_data", "PERMIT")]
    )


def two_strata(seed=0, latency=1, topologies_a=("peer_to_peer",), topologies_b=("peer_to_peer",)):
    w = World(seed)
    a = w.add_stratum("alpha", topologies=topologies_a)
    b = w.add_stratum("beta", topologies=topologies_b)
    w.wire_trust()
    w.net.link("alpha", "beta", latency)
    for s in (a, b):
        s.trust.add(PROVIDER.identity)
    return w, a, b


def repo_with_authority():
    mgmt = ManagementEngine()
    return Repository(authority=mgmt), mgmt


def discovery_world(seed=0, drop=0.0, latency=1, cache=True, specs=None):
    """One broker, one provider publishing ``specs`` (default: the anomaly detector), one device."""
    w = World(seed)
    b = w.add_broker("broker")
    p = w.add_provider("prov_a")
    d = w.add_stratum("device")
    w.wire_trust()
    w.net.connect_all(latency)
    if drop:
        w.net.link("device", "broker", latency, drop)
        w.net.link("device", "prov_a", latency, drop)
    p.register_with(b)
    specs = specs or [ais_spec("anomaly", ANOMALY, [("r", "Vector")], [("flag", "Scalar")], tags=("sensor.anomaly",))]
    for spec in specs:
        p.add_package(make_package(p.principal, spec))
        p.publish_to(b, spec["actor_id"], spec.get("version", 1), cache=cache)
    return w, b, p, d
