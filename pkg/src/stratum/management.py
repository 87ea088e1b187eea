"""Management engine: policy store, deny-overrides rule engine, metrics and watchdogs."""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

from stratum.errors import DecodeError, Denied, DuplicatePriority, ParseError, PolicyError, StaleSample
from stratum.model import codec


class Effect(str, Enum):
    PERMIT = "PERMIT"
    DENY = "DENY"
    CONSTRAIN = "CONSTRAIN"


class Action(str, Enum):
    LOCAL_EXECUTE = "local_execute"
    REMOTE_EXECUTE = "remote_execute"
    OUTBOUND_DATA = "outbound_data"
    ONBOARD = "onboard"
    UPDATE = "update"
    DECOMMISSION = "decommission"
    EXPOSE_SERVICE = "expose_service"
    INGEST_DATA = "ingest_data"


DEFAULT_DENY = frozenset({Action.OUTBOUND_DATA, Action.REMOTE_EXECUTE})

OPERATOR_BAND = 2000
PROVIDER_BAND = (1000, 1999)


class Origin(str, Enum):
    OPERATOR = "operator"
    PROVIDER = "provider"
    DATA_PROVIDER = "data_provider"


def match_pattern(pattern: str, value: str | None) -> bool:
    if pattern == "*":
        return True
    if value is None:
        return False
    if pattern.endswith("*"):
        return value.startswith(pattern[:-1])
    return pattern == value


def match_any(pattern: str, values: Iterable[str]) -> bool:
    if pattern == "*":
        return True
    return any(match_pattern(pattern, v) for v in values)


def _check_pattern(p: str) -> str:
    if not isinstance(p, str) or "*" in p[:-1]:
        raise PolicyError(f"pattern {p!r} must be a literal, a '*'-suffixed prefix, or '*'")
    return p


_OPS = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    "≤": lambda a, b: a <= b,
    "=": lambda a, b: a == b,
    ">=": lambda a, b: a >= b,
    "≥": lambda a, b: a >= b,
    ">": lambda a, b: a > b,
}


@dataclass(frozen=True)
class Comparison:
    metric: str
    op: str
    value: float

    def __post_init__(self) -> None:
        if self.op not in _OPS:
            raise PolicyError(f"unknown comparison operator {self.op!r}")
        object.__setattr__(self, "op", {"≤": "<=", "≥": ">="}.get(self.op, self.op))

    def holds(self, metrics: Mapping[str, float]) -> bool:
        if self.metric not in metrics:
            return False
        return _OPS[self.op](metrics[self.metric], self.value)

    @classmethod
    def parse(cls, text: str) -> "Comparison":
        """Parse ``"cpu_load > 0.9"``."""
        parts = text.split()
        if len(parts) != 3:
            raise PolicyError(f"bad condition {text!r}")
        return cls(parts[0], parts[1], float(parts[2]))


def condition_holds(condition: Iterable[Comparison], metrics: Mapping[str, float]) -> bool:
    return all(c.holds(metrics) for c in condition)


@dataclass(frozen=True)
class Rule:
    rule_id: str
    priority: int
    action: Action
    effect: Effect
    app: str = "*"
    actor: str = "*"
    tag: str = "*"
    data_class: str = "*"
    domain: str = "*"
    condition: tuple[Comparison, ...] = ()
    limits: Mapping[str, float] = field(default_factory=dict, hash=False, compare=True)
    origin: Origin = Origin.OPERATOR

    def __post_init__(self) -> None:
        object.__setattr__(self, "action", Action(self.action))
        object.__setattr__(self, "effect", Effect(self.effect))
        object.__setattr__(self, "origin", Origin(self.origin))
        object.__setattr__(self, "condition", tuple(self.condition))
        for p in (self.app, self.actor, self.tag, self.data_class, self.domain):
            _check_pattern(p)
        if isinstance(self.priority, bool) or not isinstance(self.priority, int):
            raise PolicyError(f"priority of {self.rule_id!r} must be an integer")


@dataclass(frozen=True)
class Request:
    action: Action
    app_id: str | None = None
    actor_id: str | None = None
    tags: frozenset[str] = frozenset()
    data_classes: frozenset[str] = frozenset()
    domain: str | None = None
    metrics: Mapping[str, float] = field(default_factory=dict, hash=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "action", Action(self.action))
        object.__setattr__(self, "tags", frozenset(self.tags))
        object.__setattr__(self, "data_classes", frozenset(self.data_classes))


def rule_matches(rule: Rule, req: Request) -> bool:
    return (
        rule.action is req.action
        and match_pattern(rule.app, req.app_id)
        and match_pattern(rule.actor, req.actor_id)
        and match_any(rule.tag, req.tags)
        and match_any(rule.data_class, req.data_classes)
        and match_pattern(rule.domain, req.domain)
        and condition_holds(rule.condition, req.metrics)
    )


@dataclass(frozen=True)
class Decision:
    effect: Effect
    rule_id: str | None = None
    limits: Mapping[str, float] = field(default_factory=dict, hash=False)
    policy_version: int = 0

    @property
    def permitted(self) -> bool:
        return self.effect is not Effect.DENY


def decide(request: Request, rules: Iterable[Rule], policy_version: int = 0) -> Decision:
    """Deny-overrides; otherwise the highest-priority PERMIT/CONSTRAIN; otherwise the default."""
    best: Rule | None = None
    for rule in rules:
        if not rule_matches(rule, request):
            continue
        if rule.effect is Effect.DENY:
            return Decision(Effect.DENY, rule.rule_id, {}, policy_version)
        if best is None or rule.priority > best.priority:
            best = rule
    if best is not None:
        limits = dict(best.limits) if best.effect is Effect.CONSTRAIN else {}
        return Decision(best.effect, best.rule_id, limits, policy_version)
    if request.action in DEFAULT_DENY:
        return Decision(Effect.DENY, None, {}, policy_version)
    return Decision(Effect.PERMIT, None, {}, policy_version)


# -- policy files ----------------------------------------------------------


class PolicyParseError(ParseError, PolicyError):
    pass


def _rule_doc(r: Rule) -> dict:
    return {
        "rule_id": r.rule_id,
        "priority": r.priority,
        "action": r.action.value,
        "effect": r.effect.value,
        "subject": {"app": r.app, "actor": r.actor, "tag": r.tag},
        "resource": {"data_class": r.data_class, "domain": r.domain},
        "condition": [[c.metric, c.op, codec.enc_decimal(c.value)] for c in r.condition],
        "limits": {k: codec.enc_decimal(v) for k, v in r.limits.items()},
        "origin": r.origin.value,
    }


def _rule_from(d: dict) -> Rule:
    subject = d.get("subject", {})
    resource = d.get("resource", {})
    return Rule(
        rule_id=str(d["rule_id"]),
        priority=d["priority"],
        action=Action(d["action"]),
        effect=Effect(d["effect"]),
        app=subject.get("app", "*"),
        actor=subject.get("actor", "*"),
        tag=subject.get("tag", "*"),
        data_class=resource.get("data_class", "*"),
        domain=resource.get("domain", "*"),
        condition=tuple(
            Comparison.parse(c) if isinstance(c, str) else Comparison(c[0], c[1], codec.dec_decimal(c[2]))
            for c in d.get("condition", ())
        ),
        limits={str(k): codec.dec_decimal(v) for k, v in d.get("limits", {}).items()},
        origin=Origin(d.get("origin", "operator")),
    )


codec.register(Rule, "Rule", _rule_doc, _rule_from)


def rules_from_doc(doc) -> list[Rule]:
    try:
        if isinstance(doc, dict) and doc.get("schema", "").startswith("Rule/"):
            doc = [doc]
        if not isinstance(doc, list):
            raise PolicyParseError("policy document must be a list of rules")
        rules = []
        for item in doc:
            if isinstance(item, dict) and "schema" not in item:
                item = dict(item, schema="Rule/1")
            r = codec.from_doc(item)
            if not isinstance(r, Rule):
                raise PolicyParseError("policy list holds a non-rule document")
            rules.append(r)
        return rules
    except PolicyParseError:
        raise
    except (DecodeError, PolicyError, ValueError, KeyError, TypeError) as exc:
        raise PolicyParseError(f"malformed policy: {exc}") from exc


def parse_policy(data: bytes | str) -> list[Rule]:
    try:
        doc = codec.loads(data)
    except DecodeError as exc:
        raise PolicyParseError(str(exc)) from exc
    return rules_from_doc(doc)


def encode_policy(rules: Iterable[Rule]) -> bytes:
    return codec.canonical_encode(list(rules))


def check_rule_set(rules: Iterable[Rule]) -> tuple[Rule, ...]:
    rules = tuple(rules)
    seen: dict[int, str] = {}
    for r in rules:
        if r.priority in seen:
            raise DuplicatePriority(f"rules {seen[r.priority]!r} and {r.rule_id!r} share priority {r.priority}")
        seen[r.priority] = r.rule_id
    return rules


def check_band(rule: Rule) -> None:
    if rule.origin is Origin.OPERATOR:
        if rule.priority < OPERATOR_BAND:
            raise PolicyError(f"operator rule {rule.rule_id!r} must use priority >= {OPERATOR_BAND}")
    elif not PROVIDER_BAND[0] <= rule.priority <= PROVIDER_BAND[1]:
        raise PolicyError(f"{rule.origin.value} rule {rule.rule_id!r} must use priority in {PROVIDER_BAND}")


@dataclass(frozen=True)
class PolicySet:
    version: int
    rules: tuple[Rule, ...]


class PolicyStore:
    """Holds the active rule set; swaps are a single reference assignment."""

    def __init__(self, rules: Iterable[Rule] = (), enforce_bands: bool = True) -> None:
        self.enforce_bands = enforce_bands
        self._operator: tuple[Rule, ...] = ()
        self._external: dict[str, tuple[Rule, ...]] = {}
        self._swap_lock = threading.Lock()
        self._active = PolicySet(0, ())
        rules = tuple(rules)
        if rules:
            self.configure(rules)

    @property
    def active(self) -> PolicySet:
        return self._active

    @property
    def version(self) -> int:
        return self._active.version

    def _install(self, operator: tuple[Rule, ...], external: dict[str, tuple[Rule, ...]]) -> int:
        merged = operator + tuple(r for k in sorted(external) for r in external[k])
        merged = check_rule_set(merged)
        if self.enforce_bands:
            for r in merged:
                check_band(r)
        self._operator, self._external = operator, external
        self._active = PolicySet(self._active.version + 1, merged)
        return self._active.version

    def configure(self, rules: Iterable[Rule]) -> int:
        with self._swap_lock:
            rules = tuple(rules)
            for r in rules:
                if r.origin is not Origin.OPERATOR:
                    raise PolicyError(f"rule {r.rule_id!r} in an operator policy has origin {r.origin.value}")
            return self._install(rules, dict(self._external))

    def merge_external(self, principal_id: str, rules: Iterable[Rule]) -> int:
        """Install provider or data-provider rules (replacing that principal's previous set)."""
        with self._swap_lock:
            rules = tuple(rules)
            for r in rules:
                if r.origin is Origin.OPERATOR:
                    raise PolicyError(f"rule {r.rule_id!r} from {principal_id!r} claims operator origin")
            external = dict(self._external)
            external[principal_id] = rules
            return self._install(self._operator, external)

    def decide(self, request: Request) -> Decision:
        ps = self._active
        return decide(request, ps.rules, ps.version)


# -- metrics and watchdogs ------------------------------------------------


@dataclass(frozen=True)
class MetricSample:
    name: str
    value: float
    tick: int


class MetricStore:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._latest: dict[str, tuple[int, float]] = {}

    def record_metric(self, sample: MetricSample) -> None:
        with self._lock:
            prev = self._latest.get(sample.name)
            if prev is not None and sample.tick < prev[0]:
                raise StaleSample(f"{sample.name} @ {sample.tick} is older than @ {prev[0]}")
            self._latest[sample.name] = (sample.tick, float(sample.value))

    def snapshot_metrics(self) -> dict[str, float]:
        latest = dict(self._latest)
        return {k: v for k, (_, v) in sorted(latest.items())}


class ViolationKind(str, Enum):
    SUSPEND = "SUSPEND"
    REPLAN = "REPLAN"
    NOTIFY = "NOTIFY"


@dataclass(frozen=True)
class ViolationAction:
    kind: ViolationKind
    watch_id: str
    actor_id: str | None = None
    tick: int = 0


@dataclass(frozen=True)
class WatchdogSpec:
    watch_id: str
    condition: tuple[Comparison, ...]
    violation_action: ViolationKind
    period: int = 1
    actor_id: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "violation_action", ViolationKind(self.violation_action))
        object.__setattr__(self, "condition", tuple(self.condition))
        if self.period < 1:
            raise ValueError("watchdog period must be >= 1")
        if self.violation_action is ViolationKind.SUSPEND and not self.actor_id:
            raise ValueError("SUSPEND watchdogs name the actor to suspend")


# -- LCM authorization ------------------------------------------------------

_CAUSE_ACTION = {
    "onboard": Action.ONBOARD,
    "setup": Action.ONBOARD,
    "activate": Action.ONBOARD,
    "update_begin": Action.UPDATE,
    "update_commit": Action.UPDATE,
    "update_abort": Action.UPDATE,
    "deprecate": Action.DECOMMISSION,
    "decommission": Action.DECOMMISSION,
}


def lcm_action(cause) -> Action:
    return _CAUSE_ACTION[getattr(cause, "value", cause)]


@dataclass(frozen=True)
class LcmToken:
    token_id: int
    actor_id: str
    cause: str


class ManagementEngine:
    """Policy store + metrics + watchdogs; also the issuer of LCM authorization tokens."""

    def __init__(self, policy: PolicyStore | None = None) -> None:
        self.policy = policy or PolicyStore()
        self.metrics = MetricStore()
        self._watchdogs: dict[str, WatchdogSpec] = {}
        self._last_eval: dict[str, int] = {}
        self._tokens: set[LcmToken] = set()
        self._token_ids = itertools.count(1)
        self._lock = threading.Lock()

    def decide(self, request: Request) -> Decision:
        if not request.metrics:
            request = Request(
                request.action, request.app_id, request.actor_id, request.tags, request.data_classes,
                request.domain, self.metrics.snapshot_metrics(),
            )
        return self.policy.decide(request)

    def authorize_lcm(self, cause, actor_id: str, tags: Iterable[str] = (), data_classes: Iterable[str] = ()) -> LcmToken:
        cause = getattr(cause, "value", cause)
        d = self.decide(Request(lcm_action(cause), actor_id=actor_id, tags=frozenset(tags),
                                data_classes=frozenset(data_classes), domain="local"))
        if d.effect is Effect.DENY:
            raise Denied(d.rule_id)
        with self._lock:
            token = LcmToken(next(self._token_ids), actor_id, cause)
            self._tokens.add(token)
        return token

    def issue_token(self, actor_id: str, cause) -> LcmToken:
        """Token for a step already covered by an earlier authorization (e.g. finishing an update)."""
        with self._lock:
            token = LcmToken(next(self._token_ids), actor_id, getattr(cause, "value", cause))
            self._tokens.add(token)
        return token

    def consume(self, token: object, actor_id: str, cause) -> bool:
        cause = getattr(cause, "value", cause)
        with self._lock:
            if not isinstance(token, LcmToken) or token not in self._tokens:
                return False
            if token.actor_id != actor_id or token.cause != cause:
                return False
            self._tokens.discard(token)
            return True

    def record_metric(self, sample: MetricSample) -> None:
        self.metrics.record_metric(sample)

    def snapshot_metrics(self) -> dict[str, float]:
        return self.metrics.snapshot_metrics()

    def add_watchdog(self, spec: WatchdogSpec, now: int = 0) -> None:
        self._watchdogs[spec.watch_id] = spec
        self._last_eval[spec.watch_id] = now

    def remove_watchdog(self, watch_id: str) -> None:
        self._watchdogs.pop(watch_id, None)
        self._last_eval.pop(watch_id, None)

    def tick_watchdogs(self, now: int) -> list[ViolationAction]:
        fired = []
        snapshot = self.metrics.snapshot_metrics()
        for wid in sorted(self._watchdogs):
            spec = self._watchdogs[wid]
            if now - self._last_eval[wid] < spec.period:
                continue
            self._last_eval[wid] = now
            if condition_holds(spec.condition, snapshot):
                fired.append(ViolationAction(spec.violation_action, wid, spec.actor_id, now))
        return fired
