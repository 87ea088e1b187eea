"""Tag-based semantic matching shared by local discovery, broker matchmaking and offer ranking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from stratum.management import match_pattern
from stratum.model import codec
from stratum.model.types import Port
from stratum.model.values import ValueType


@dataclass(frozen=True)
class ServiceQuery:
    required_tags: frozenset[str]
    input_types: tuple[ValueType, ...] | None = None
    output_types: tuple[ValueType, ...] | None = None
    max_results: int = 10

    def __post_init__(self) -> None:
        object.__setattr__(self, "required_tags", frozenset(self.required_tags))
        if not self.required_tags:
            raise ValueError("a service query needs at least one required tag")
        if self.max_results < 1:
            raise ValueError("max_results must be >= 1")
        if self.input_types is not None:
            object.__setattr__(self, "input_types", tuple(ValueType(t) for t in self.input_types))
        if self.output_types is not None:
            object.__setattr__(self, "output_types", tuple(ValueType(t) for t in self.output_types))


def tags_satisfy(required: Iterable[str], tags: Iterable[str]) -> bool:
    """Every required pattern (literal or '*'-suffixed prefix) matches at least one tag."""
    tags = list(tags)
    return all(any(match_pattern(p, t) for t in tags) for p in required)


def tag_overlap(required: Iterable[str], tags: Iterable[str]) -> int:
    """Number of tags matched by at least one required pattern."""
    required = list(required)
    return sum(1 for t in set(tags) if any(match_pattern(p, t) for p in required))


def signature_satisfies(q: ServiceQuery, inputs: Iterable[Port], outputs: Iterable[Port]) -> bool:
    if q.input_types is not None and tuple(p.type for p in inputs) != q.input_types:
        return False
    if q.output_types is not None and tuple(p.type for p in outputs) != q.output_types:
        return False
    return True


def _query_doc(q: ServiceQuery) -> dict:
    return {
        "required_tags": sorted(q.required_tags),
        "input_types": None if q.input_types is None else [t.value for t in q.input_types],
        "output_types": None if q.output_types is None else [t.value for t in q.output_types],
        "max_results": q.max_results,
    }


def _query_from(d: dict) -> ServiceQuery:
    return ServiceQuery(
        frozenset(d["required_tags"]),
        None if d.get("input_types") is None else tuple(d["input_types"]),
        None if d.get("output_types") is None else tuple(d["output_types"]),
        int(d.get("max_results", 10)),
    )


codec.register(ServiceQuery, "ServiceQuery", _query_doc, _query_from)
