"""Per-node execution placement over the available domains."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from stratum.eastbound import DomainDescriptor
from stratum.errors import NoAdmissibleDomain
from stratum.management import Decision, Effect
from stratum.model.types import ActorManifest, Requirements, TypedPlan
from stratum.southbound import admissible

# (node_id, manifest, domain) -> policy decision for running that node there
PolicyCheck = Callable[[str, ActorManifest, DomainDescriptor], "Decision | Effect | bool"]


@dataclass(frozen=True)
class Weights:
    latency: float = 1.0
    load: float = 1.0
    mem: float = 1.0

    def __post_init__(self) -> None:
        if min(self.latency, self.load, self.mem) < 0:
            raise ValueError("placement weights must be >= 0")


@dataclass(frozen=True)
class PlacementPlan:
    assignment: dict[str, str] = field(hash=False)
    total_cost: float
    admissible_domains: dict[str, tuple[str, ...]] = field(hash=False)


def domain_cost(d: DomainDescriptor, w: Weights = Weights()) -> float:
    return w.latency * d.latency + w.load * d.load + w.mem * d.mem_pressure


def within_limits(req: Requirements, d: DomainDescriptor, limits: Mapping[str, float]) -> bool:
    """CONSTRAIN limits: caps on actor demands and on domain latency/load/mem_pressure."""
    if "mem_units" in limits and req.mem_units > limits["mem_units"]:
        return False
    if "compute_units" in limits and req.compute_units > limits["compute_units"]:
        return False
    if "latency" in limits and d.latency > limits["latency"]:
        return False
    if "load" in limits and d.load > limits["load"]:
        return False
    if "mem_pressure" in limits and d.mem_pressure > limits["mem_pressure"]:
        return False
    return True


def _permits(result, req: Requirements, d: DomainDescriptor) -> bool:
    if isinstance(result, bool):
        return result
    if isinstance(result, Effect):
        return result is not Effect.DENY
    if result.effect is Effect.DENY:
        return False
    return result.effect is Effect.PERMIT or within_limits(req, d, result.limits)


def admissible_domains(
    node_id: str,
    manifest: ActorManifest,
    domains: Sequence[DomainDescriptor],
    policy_check: PolicyCheck | None = None,
    limits: Mapping[str, float] | None = None,
) -> list[DomainDescriptor]:
    out = []
    for d in domains:
        if not admissible(manifest.requirements, d.capability):
            continue
        if limits and not within_limits(manifest.requirements, d, limits):
            continue
        if policy_check is not None and not _permits(policy_check(node_id, manifest, d), manifest.requirements, d):
            continue
        out.append(d)
    return out


def plan_placement(
    plan: TypedPlan,
    domains: Sequence[DomainDescriptor],
    policy_check: PolicyCheck | None = None,
    weights: Weights = Weights(),
    limits: Mapping[str, float] | None = None,
) -> PlacementPlan:
    if not domains:
        raise ValueError("at least one domain is required")
    assignment: dict[str, str] = {}
    considered: dict[str, tuple[str, ...]] = {}
    total = 0.0
    for node_id in plan.order:
        cands = admissible_domains(node_id, plan.manifests[node_id], domains, policy_check, limits)
        considered[node_id] = tuple(sorted(d.domain_id for d in cands))
        if not cands:
            raise NoAdmissibleDomain(node_id)
        best = min(cands, key=lambda d: (domain_cost(d, weights), d.domain_id))
        assignment[node_id] = best.domain_id
        total += domain_cost(best, weights)
    return PlacementPlan(assignment, total, considered)
