import pytest
from hypothesis import given, settings

from stratum.errors import Denied, DuplicatePriority, PolicyError, StaleSample
from stratum.management import (
    Action, Comparison, Effect, ManagementEngine, MetricSample, Origin, PolicyStore, Request, Rule, WatchdogSpec,
    decide, encode_policy, parse_policy,
)
from stratum.model import codec
from stratum.repository import Cause

from oracles import naive_decide
from strategies import requests, rule_sets


@settings(max_examples=300)
@given(rule_sets(), requests)
def test_decide_matches_naive_oracle(rules, req):
    assert decide(req, rules).effect.value == naive_decide(req, rules)


@settings(max_examples=200)
@given(rule_sets(), rule_sets(), requests)
def test_adding_denies_never_loosens(rules, extra, req):
    taken = {r.priority for r in rules}
    denies = [Rule(f"x{r.rule_id}", r.priority + 1000, r.action, Effect.DENY, r.app, r.actor, r.tag, r.data_class,
                   r.domain, r.condition) for r in extra if r.priority + 1000 not in taken]
    before = decide(req, rules).effect
    after = decide(req, rules + denies).effect
    if before is Effect.DENY:
        assert after is Effect.DENY
    assert decide(req, rules + [Rule("all", 9999, req.action, Effect.DENY)]).effect is Effect.DENY


@settings(max_examples=200)
@given(rule_sets(), requests)
def test_removing_rules_only_flips_to_defaults_or_others(rules, req):
    # removing every DENY rule can never produce a DENY other than the default
    permits = [r for r in rules if r.effect is not Effect.DENY]
    d = decide(req, permits)
    if d.effect is Effect.DENY:
        assert d.rule_id is None and req.action in (Action.OUTBOUND_DATA, Action.REMOTE_EXECUTE)


def test_defaults():
    assert decide(Request(Action.LOCAL_EXECUTE), []).effect is Effect.PERMIT
    assert decide(Request(Action.REMOTE_EXECUTE), []).effect is Effect.DENY
    assert decide(Request(Action.OUTBOUND_DATA), []).effect is Effect.DENY


def test_deny_overrides_higher_permit():
    rules = [Rule("p", 3000, "local_execute", "PERMIT"), Rule("d", 2000, "local_execute", "DENY")]
    d = decide(Request(Action.LOCAL_EXECUTE), rules)
    assert (d.effect, d.rule_id) == (Effect.DENY, "d")


def test_constrain_carries_limits():
    rules = [Rule("c", 2100, "local_execute", "CONSTRAIN", limits={"mem_units": 4}),
             Rule("p", 2000, "local_execute", "PERMIT")]
    d = decide(Request(Action.LOCAL_EXECUTE), rules)
    assert d.effect is Effect.CONSTRAIN and d.limits == {"mem_units": 4} and d.permitted


def test_condition_needs_metric():
    r = Rule("hot", 2000, "local_execute", "DENY", condition=(Comparison.parse("cpu_load > 0.9"),))
    assert decide(Request(Action.LOCAL_EXECUTE), [r]).effect is Effect.PERMIT
    assert decide(Request(Action.LOCAL_EXECUTE, metrics={"cpu_load": 0.95}), [r]).effect is Effect.DENY


def test_pattern_validation():
    with pytest.raises(PolicyError):
        Rule("bad", 2000, "local_execute", "DENY", tag="a*b")


def test_policy_text_roundtrip():
    rules = [Rule("c", 2100, "local_execute", "CONSTRAIN", tag="vision.*", limits={"mem_units": 4.0},
                  condition=(Comparison("cpu_load", "<", 0.5),))]
    assert parse_policy(encode_policy(rules)) == rules
    plain = parse_policy(b'[{"rule_id":"x","priority":2000,"action":"outbound_data","effect":"DENY",'
                         b'"resource":{"data_class":"private.*"},"condition":["cpu_load >= 0.2"]}]')
    assert plain[0].data_class == "private.*" and plain[0].condition[0].op == ">="


@pytest.mark.parametrize("text", [b"{}", b"[1]", b'[{"rule_id":"x"}]', b"nope",
                                  b'[{"rule_id":"x","priority":2000,"action":"fly","effect":"DENY"}]'])
def test_policy_parse_errors(text):
    with pytest.raises(PolicyError):
        parse_policy(text)


def test_store_versions_and_bands():
    store = PolicyStore()
    assert store.version == 0
    assert store.configure([Rule("a", 2000, "local_execute", "DENY")]) == 1
    with pytest.raises(DuplicatePriority):
        store.configure([Rule("a", 2000, "local_execute", "DENY"), Rule("b", 2000, "onboard", "DENY")])
    assert store.version == 1
    with pytest.raises(PolicyError):
        store.configure([Rule("low", 10, "local_execute", "DENY")])
    with pytest.raises(PolicyError):
        store.merge_external("prov", [Rule("p", 2500, "local_execute", "DENY", origin=Origin.PROVIDER)])
    with pytest.raises(PolicyError):
        store.configure([Rule("p", 1500, "local_execute", "DENY", origin=Origin.PROVIDER)])
    assert store.merge_external("prov", [Rule("p", 1500, "local_execute", "DENY", origin=Origin.PROVIDER)]) == 2
    # operator reconfiguration keeps provider rules
    store.configure([])
    assert [r.rule_id for r in store.active.rules] == ["p"]


def test_engine_uses_metrics_snapshot():
    eng = ManagementEngine(PolicyStore([Rule("hot", 2000, "local_execute", "DENY",
                                             condition=(Comparison.parse("cpu_load > 0.9"),))]))
    assert eng.decide(Request(Action.LOCAL_EXECUTE)).permitted
    eng.record_metric(MetricSample("cpu_load", 0.95, 1))
    assert not eng.decide(Request(Action.LOCAL_EXECUTE)).permitted
    with pytest.raises(StaleSample):
        eng.record_metric(MetricSample("cpu_load", 0.1, 0))


def test_lcm_authorization():
    eng = ManagementEngine(PolicyStore([Rule("no", 2000, "decommission", "DENY", actor="keep")]))
    with pytest.raises(Denied):
        eng.authorize_lcm(Cause.DECOMMISSION, "keep")
    tok = eng.authorize_lcm(Cause.DECOMMISSION, "other")
    assert not eng.consume(tok, "other", Cause.SETUP)
    assert eng.consume(tok, "other", Cause.DECOMMISSION)
    assert not eng.consume(tok, "other", Cause.DECOMMISSION)


def test_watchdog_period_and_condition():
    eng = ManagementEngine()
    eng.add_watchdog(WatchdogSpec("w", (Comparison.parse("cpu_load > 0.9"),), "SUSPEND", period=3, actor_id="a"))
    eng.record_metric(MetricSample("cpu_load", 0.95, 0))
    assert eng.tick_watchdogs(1) == [] and eng.tick_watchdogs(2) == []
    fired = eng.tick_watchdogs(3)
    assert [(v.watch_id, v.kind.value, v.actor_id, v.tick) for v in fired] == [("w", "SUSPEND", "a", 3)]
    assert eng.tick_watchdogs(4) == []
    with pytest.raises(ValueError):
        WatchdogSpec("bad", (), "SUSPEND")


def test_rule_document_has_schema():
    doc = codec.to_doc(Rule("a", 2000, "local_execute", "DENY"))
    assert doc["schema"] == "Rule/1"
