"""Device manager and capability management: probes, capability reports, resource reservations."""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Mapping

from stratum.errors import DuplicateProbe, InsufficientResources
from stratum.management import MetricSample
from stratum.model import codec
from stratum.model.types import Requirements


class HardwareClass(str, Enum):
    CONSTRAINED = "constrained"
    CPU = "cpu"
    GPU = "gpu"
    NPU = "npu"


@dataclass(frozen=True)
class CapabilityReport:
    device_id: str
    hardware_class: HardwareClass
    mem_units: int
    compute_units: int
    features: frozenset[str] = frozenset({"dsl-1"})
    software: frozenset[str] = frozenset()
    report_version: int = 1

    def __post_init__(self) -> None:
        if self.mem_units < 0 or self.compute_units < 0:
            raise ValueError("capability totals must be >= 0")
        object.__setattr__(self, "hardware_class", HardwareClass(self.hardware_class))
        object.__setattr__(self, "features", frozenset(self.features))
        object.__setattr__(self, "software", frozenset(self.software))

    def content(self) -> tuple:
        return (self.device_id, self.hardware_class, self.mem_units, self.compute_units, self.features, self.software)


def _report_doc(r: CapabilityReport) -> dict:
    return {
        "device_id": r.device_id,
        "hardware_class": r.hardware_class.value,
        "mem_units": r.mem_units,
        "compute_units": r.compute_units,
        "features": sorted(r.features),
        "software": sorted(r.software),
        "report_version": r.report_version,
    }


def _report_from(d: dict) -> CapabilityReport:
    return CapabilityReport(
        device_id=str(d["device_id"]),
        hardware_class=HardwareClass(d["hardware_class"]),
        mem_units=int(d["mem_units"]),
        compute_units=int(d["compute_units"]),
        features=frozenset(d["features"]),
        software=frozenset(d["software"]),
        report_version=int(d["report_version"]),
    )


codec.register(CapabilityReport, "CapabilityReport", _report_doc, _report_from)


def admissible(requirements: Requirements, report: CapabilityReport) -> bool:
    return (
        requirements.mem_units <= report.mem_units
        and requirements.compute_units <= report.compute_units
        and requirements.features <= report.features
    )


class ProbeKind(str, Enum):
    HARDWARE = "hardware"
    SOFTWARE = "software"
    RESOURCE = "resource"


@dataclass(frozen=True)
class Probe:
    """A sampling seam; a real port plugs OS-level probes in here.

    Hardware probes may return ``hardware_class``, ``mem_units``,
    ``compute_units`` and ``features``; software probes return ``software``
    and ``features``; resource probes return ``{metric_name: value}``.
    """

    probe_id: str
    kind: ProbeKind
    sample: Callable[[int], Mapping]

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ProbeKind(self.kind))


def static_probe(probe_id: str, kind: ProbeKind | str, output: Mapping) -> Probe:
    data = dict(output)
    return Probe(probe_id, kind, lambda now: data)


@dataclass(frozen=True)
class Reservation:
    reservation_id: int
    owner: str
    requirements: Requirements


@dataclass
class ProbeRun:
    report: CapabilityReport
    changed: bool
    samples: list[MetricSample] = field(default_factory=list)


class DeviceManager:
    def __init__(
        self,
        device_id: str,
        hardware_class: HardwareClass | str = HardwareClass.CPU,
        mem_units: int = 0,
        compute_units: int = 0,
        features: Iterable[str] = ("dsl-1",),
        software: Iterable[str] = (),
        metrics_sink: Callable[[MetricSample], None] | None = None,
    ) -> None:
        self._static = CapabilityReport(device_id, HardwareClass(hardware_class), mem_units, compute_units,
                                        frozenset(features), frozenset(software), 1)
        self._report = self._static
        self._probes: dict[str, Probe] = {}
        self.metrics_sink = metrics_sink
        self._lock = threading.Lock()
        self._reservations: dict[int, Reservation] = {}
        self._ids = itertools.count(1)
        self._listeners: list[Callable[[CapabilityReport], None]] = []

    @property
    def report(self) -> CapabilityReport:
        return self._report

    def on_report_change(self, listener: Callable[[CapabilityReport], None]) -> None:
        self._listeners.append(listener)

    def register_probe(self, p: Probe) -> None:
        if p.probe_id in self._probes:
            raise DuplicateProbe(p.probe_id)
        self._probes[p.probe_id] = p

    def run_probes(self, now: int) -> ProbeRun:
        s = self._static
        hw_class, mem, compute = s.hardware_class, s.mem_units, s.compute_units
        features, software = set(s.features), set(s.software)
        samples: list[MetricSample] = []
        for pid in sorted(self._probes):
            p = self._probes[pid]
            out = p.sample(now)
            if p.kind is ProbeKind.RESOURCE:
                for name in sorted(out):
                    samples.append(MetricSample(name, float(out[name]), now))
                continue
            if "hardware_class" in out:
                hw_class = HardwareClass(out["hardware_class"])
            mem = int(out.get("mem_units", mem))
            compute = int(out.get("compute_units", compute))
            features |= set(out.get("features", ()))
            software |= set(out.get("software", ()))
        candidate = CapabilityReport(s.device_id, hw_class, mem, compute, frozenset(features),
                                     frozenset(software), self._report.report_version)
        changed = candidate.content() != self._report.content()
        if changed:
            self._report = replace(candidate, report_version=self._report.report_version + 1)
            for listener in list(self._listeners):
                listener(self._report)
        if self.metrics_sink is not None:
            for sample in samples:
                self.metrics_sink(sample)
        return ProbeRun(self._report, changed, samples)

    # -- reservations ------------------------------------------------------

    def reserved(self) -> tuple[int, int]:
        res = list(self._reservations.values())
        return sum(r.requirements.mem_units for r in res), sum(r.requirements.compute_units for r in res)

    def reserve(self, requirements: Requirements, owner: str = "", limits: Mapping[str, float] | None = None) -> Reservation:
        with self._lock:
            mem, compute = self.reserved()
            if mem + requirements.mem_units > self._report.mem_units:
                raise InsufficientResources(f"mem_units: {mem} + {requirements.mem_units} > {self._report.mem_units}")
            if compute + requirements.compute_units > self._report.compute_units:
                raise InsufficientResources(
                    f"compute_units: {compute} + {requirements.compute_units} > {self._report.compute_units}"
                )
            if limits:
                own = [r.requirements for r in self._reservations.values() if r.owner == owner]
                for key in ("mem_units", "compute_units"):
                    if key in limits:
                        used = sum(getattr(r, key) for r in own) + getattr(requirements, key)
                        if used > limits[key]:
                            raise InsufficientResources(f"{key} {used} exceeds policy limit {limits[key]} for {owner!r}")
            r = Reservation(next(self._ids), owner, requirements)
            self._reservations[r.reservation_id] = r
            return r

    def release(self, reservation: Reservation) -> None:
        with self._lock:
            self._reservations.pop(reservation.reservation_id, None)
