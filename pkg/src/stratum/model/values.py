"""Concrete value carriers passed between actor ports."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Union


class ValueType(str, Enum):
    SCALAR = "Scalar"
    VECTOR = "Vector"
    LABEL = "Label"


@dataclass(frozen=True)
class Scalar:
    value: float

    @property
    def type(self) -> ValueType:
        return ValueType.SCALAR


@dataclass(frozen=True)
class Vector:
    items: tuple[float, ...]

    def __init__(self, items) -> None:
        object.__setattr__(self, "items", tuple(float(x) for x in items))

    @property
    def type(self) -> ValueType:
        return ValueType.VECTOR


@dataclass(frozen=True)
class Label:
    text: str

    @property
    def type(self) -> ValueType:
        return ValueType.LABEL


Value = Union[Scalar, Vector, Label]


def format_decimal(x: float) -> str:
    """Shortest round-tripping text for a binary64 number, integers without a fraction."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"non-finite decimal {x!r}")
    if x.is_integer() and abs(x) < 1e16 and not (x == 0 and math.copysign(1.0, x) < 0):
        return str(int(x))
    return repr(x)


def format_value(v: Value) -> str:
    if isinstance(v, Scalar):
        return f"Scalar {format_decimal(v.value)}"
    if isinstance(v, Vector):
        return "Vector [" + ", ".join(format_decimal(x) for x in v.items) + "]"
    return f'Label "{v.text}"'


def same_bits(a: Value, b: Value) -> bool:
    """Bit-exact equality; distinguishes -0.0 from 0.0."""
    if type(a) is not type(b):
        return False
    if isinstance(a, Scalar):
        return math.copysign(1.0, a.value) == math.copysign(1.0, b.value) and a.value == b.value
    if isinstance(a, Vector):
        return len(a.items) == len(b.items) and all(
            x == y and math.copysign(1.0, x) == math.copysign(1.0, y) for x, y in zip(a.items, b.items)
        )
    return a == b
