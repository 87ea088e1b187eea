"""Actor repository: versioned storage of verified packages under a life-cycle state machine."""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol

from stratum.errors import (
    CycleDetected,
    DecodeError,
    DependencyError,
    DuplicateVersion,
    IllegalTransition,
    NotAuthorized,
    UnknownActor,
    UnresolvedActor,
    Unverified,
)
from stratum.model import codec
from stratum.model.types import (
    AT_LEAST_ONE,
    ActorManifest,
    ActorPackage,
    Composition,
    Kind,
    VerifiedPackage,
    VersionConstraint,
)

log = logging.getLogger(__name__)


class LcmState(str, Enum):
    REGISTERED = "REGISTERED"
    READY = "READY"
    ACTIVE = "ACTIVE"
    UPDATING = "UPDATING"
    DEPRECATED = "DEPRECATED"
    DECOMMISSIONED = "DECOMMISSIONED"


class Cause(str, Enum):
    ONBOARD = "onboard"
    SETUP = "setup"
    ACTIVATE = "activate"
    UPDATE_BEGIN = "update_begin"
    UPDATE_COMMIT = "update_commit"
    UPDATE_ABORT = "update_abort"
    DEPRECATE = "deprecate"
    DECOMMISSION = "decommission"


S, C = LcmState, Cause

# (from_state, cause) -> to_state; onboarding enters from no state at all
LEGAL_TRANSITIONS: dict[tuple[LcmState | None, Cause], LcmState] = {
    (None, C.ONBOARD): S.REGISTERED,
    (S.REGISTERED, C.SETUP): S.READY,
    (S.READY, C.ACTIVATE): S.ACTIVE,
    (S.ACTIVE, C.UPDATE_BEGIN): S.UPDATING,
    (S.UPDATING, C.UPDATE_COMMIT): S.ACTIVE,
    (S.UPDATING, C.UPDATE_ABORT): S.ACTIVE,
    (S.ACTIVE, C.DEPRECATE): S.DEPRECATED,
    (S.READY, C.DEPRECATE): S.DEPRECATED,
    (S.DEPRECATED, C.DECOMMISSION): S.DECOMMISSIONED,
    (S.READY, C.DECOMMISSION): S.DECOMMISSIONED,
}

RESOLVABLE = frozenset({S.READY, S.ACTIVE})


@dataclass(frozen=True)
class LcmTransition:
    from_state: LcmState | None
    to_state: LcmState
    cause: Cause

    def __post_init__(self) -> None:
        if LEGAL_TRANSITIONS.get((self.from_state, Cause(self.cause))) != self.to_state:
            raise IllegalTransition(f"{self.from_state} --{self.cause}--> {self.to_state} is not legal")


@dataclass(frozen=True)
class TransitionLogEntry:
    tick: int
    actor_id: str
    version: int
    transition: LcmTransition


@dataclass(frozen=True)
class ActorRecord:
    actor_id: str
    version: int
    lcm_state: LcmState
    installed_at: int
    package: VerifiedPackage | None
    dependents: frozenset[str] = frozenset()
    redeployed_from: str | None = None

    @property
    def manifest(self) -> ActorManifest:
        if self.package is None:
            raise UnknownActor(f"{self.actor_id}@{self.version} is a decommissioned tombstone")
        return self.package.manifest

    @property
    def service_id(self) -> str:
        return f"{self.actor_id}@{self.version}"


class TokenAuthority(Protocol):
    def consume(self, token: object, actor_id: str, cause: Cause) -> bool: ...


def composition_of(manifest: ActorManifest, payload: bytes) -> Composition:
    if manifest.kind is not Kind.FGIS:
        raise ValueError(f"{manifest.service_id} is not an FGIS")
    c = codec.canonical_decode(payload)
    if not isinstance(c, Composition):
        raise DecodeError(f"payload of {manifest.service_id} is not a composition")
    return c


class Repository:
    """In-process actor store with optional directory persistence.

    Mutations are serialized under a lock; the record map is replaced
    copy-on-write so concurrent readers never observe a torn record set.
    """

    def __init__(
        self,
        directory: str | os.PathLike | None = None,
        authority: TokenAuthority | None = None,
        clock: Callable[[], int] = lambda: 0,
    ) -> None:
        self._lock = threading.RLock()
        self._records: dict[tuple[str, int], ActorRecord] = {}
        self._log: list[TransitionLogEntry] = []
        self._listeners: list[Callable[[TransitionLogEntry], None]] = []
        self.authority = authority
        self.clock = clock
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            self._load()

    # -- queries ---------------------------------------------------------

    def records(self, actor_id: str | None = None) -> list[ActorRecord]:
        recs = self._records
        return sorted(
            (r for r in recs.values() if actor_id is None or r.actor_id == actor_id),
            key=lambda r: (r.actor_id, r.version),
        )

    def get(self, actor_id: str, version: int) -> ActorRecord:
        rec = self._records.get((actor_id, version))
        if rec is None:
            raise UnknownActor(f"{actor_id}@{version}")
        return rec

    def find(self, actor_id: str, version: int) -> ActorRecord | None:
        return self._records.get((actor_id, version))

    @property
    def transition_log(self) -> list[TransitionLogEntry]:
        return list(self._log)

    def subscribe(self, listener: Callable[[TransitionLogEntry], None]) -> None:
        self._listeners.append(listener)

    def snapshot(self) -> bytes:
        """Canonical bytes of the whole record set; used to assert atomicity."""
        return codec.canonical_encode([record_doc(r) for r in self.records()])

    def resolve_record(self, actor_id: str, constraint: VersionConstraint | str = AT_LEAST_ONE) -> ActorRecord:
        constraint = VersionConstraint.parse(constraint)
        best = None
        for (aid, ver), rec in self._records.items():
            if aid == actor_id and rec.lcm_state in RESOLVABLE and constraint.satisfied_by(ver):
                if best is None or ver > best.version:
                    best = rec
        if best is None:
            raise UnresolvedActor(f"no READY/ACTIVE {actor_id} satisfying {constraint}")
        return best

    def resolve(self, actor_id: str, constraint: VersionConstraint | str = AT_LEAST_ONE) -> ActorManifest:
        return self.resolve_record(actor_id, constraint).manifest

    def payload(self, actor_id: str, version: int) -> bytes:
        rec = self.get(actor_id, version)
        rec.manifest  # raises on tombstones
        return rec.package.package.payload

    def composition(self, actor_id: str, version: int) -> Composition:
        rec = self.get(actor_id, version)
        return composition_of(rec.manifest, rec.package.package.payload)

    def dependency_closure(self, root: str, constraint: VersionConstraint | str = AT_LEAST_ONE) -> set[str]:
        """Actors reachable from ``root`` through FGIS compositions, including ``root``."""
        closure: set[str] = set()
        stack: list[str] = []

        def visit(actor_id: str, c: VersionConstraint) -> None:
            if actor_id in stack:
                raise CycleDetected(" -> ".join(stack + [actor_id]))
            rec = self.resolve_record(actor_id, c)
            closure.add(actor_id)
            if rec.manifest.kind is Kind.FGIS:
                stack.append(actor_id)
                for node in composition_of(rec.manifest, rec.package.package.payload).nodes:
                    visit(node.actor_id, node.constraint)
                stack.pop()

        visit(root, VersionConstraint.parse(constraint))
        return closure

    def _referenced(self, rec: ActorRecord) -> set[str]:
        # lenient reachability: follows any non-decommissioned record so deprecated
        # dependencies are still seen by the decommission guard
        seen: set[str] = set()
        todo = [rec]
        while todo:
            r = todo.pop()
            if r.package is None or r.manifest.kind is not Kind.FGIS:
                continue
            for node in composition_of(r.manifest, r.package.package.payload).nodes:
                if node.actor_id in seen:
                    continue
                seen.add(node.actor_id)
                cands = [
                    x
                    for x in self._records.values()
                    if x.actor_id == node.actor_id
                    and x.lcm_state is not S.DECOMMISSIONED
                    and node.constraint.satisfied_by(x.version)
                ]
                if cands:
                    todo.append(max(cands, key=lambda x: x.version))
        return seen

    # -- mutations -------------------------------------------------------

    def onboard(self, pkg: VerifiedPackage, redeployed_from: str | None = None) -> ActorRecord:
        if not isinstance(pkg, VerifiedPackage) or not pkg.verified:
            raise Unverified("onboarding requires a VerifiedPackage")
        m = pkg.manifest
        with self._lock:
            existing = self._records.get((m.actor_id, m.version))
            if existing is not None and existing.lcm_state is not S.DECOMMISSIONED:
                raise DuplicateVersion(m.service_id)
            rec = ActorRecord(
                actor_id=m.actor_id,
                version=m.version,
                lcm_state=S.REGISTERED,
                installed_at=self.clock(),
                package=pkg,
                dependents=self._dependents_for(m.actor_id),
                redeployed_from=redeployed_from,
            )
            records = dict(self._records)
            records[(m.actor_id, m.version)] = rec
            if m.kind is Kind.FGIS:
                for dep in {n.actor_id for n in composition_of(m, pkg.package.payload).nodes}:
                    for key, r in records.items():
                        if key[0] == dep:
                            records[key] = replace(r, dependents=r.dependents | {m.actor_id})
            self._commit(records, rec, LcmTransition(None, S.REGISTERED, C.ONBOARD))
            return rec

    def _dependents_for(self, actor_id: str) -> frozenset[str]:
        deps = set()
        for r in self._records.values():
            if r.package is not None and r.manifest.kind is Kind.FGIS:
                if any(n.actor_id == actor_id for n in composition_of(r.manifest, r.package.package.payload).nodes):
                    deps.add(r.actor_id)
        return frozenset(deps)

    def add_dependent(self, actor_id: str, version: int, dependent: str) -> ActorRecord:
        with self._lock:
            rec = self.get(actor_id, version)
            new = replace(rec, dependents=rec.dependents | {dependent})
            records = dict(self._records)
            records[(actor_id, version)] = new
            self._records = records
            self._persist(new)
            return new

    def transition(self, actor_id: str, version: int, cause: Cause | str, token: object = None) -> ActorRecord:
        cause = Cause(cause)
        with self._lock:
            rec = self.get(actor_id, version)
            target = LEGAL_TRANSITIONS.get((rec.lcm_state, cause))
            if target is None or cause is C.ONBOARD:
                raise IllegalTransition(f"{rec.service_id}: {rec.lcm_state.value} cannot take {cause.value}")
            if self.authority is not None and not self.authority.consume(token, actor_id, cause):
                raise NotAuthorized(f"{cause.value} on {rec.service_id} lacks a valid authorization token")
            if cause is C.DECOMMISSION:
                self._guard_decommission(rec)
            new = replace(rec, lcm_state=target)
            if target is S.DECOMMISSIONED:
                new = replace(new, package=None)
            records = dict(self._records)
            records[(actor_id, version)] = new
            self._commit(records, new, LcmTransition(rec.lcm_state, target, cause))
            return new

    def _guard_decommission(self, rec: ActorRecord) -> None:
        for other in self._records.values():
            if other.actor_id == rec.actor_id or other.lcm_state is not S.ACTIVE:
                continue
            if other.manifest.kind is Kind.FGIS and rec.actor_id in self._referenced(other):
                raise DependencyError(f"{rec.service_id} is required by ACTIVE composition {other.service_id}")

    def _commit(self, records: dict, rec: ActorRecord, tr: LcmTransition) -> None:
        self._records = records
        entry = TransitionLogEntry(self.clock(), rec.actor_id, rec.version, tr)
        self._log.append(entry)
        self._persist(rec)
        for listener in list(self._listeners):
            listener(entry)

    # -- persistence -----------------------------------------------------

    def _path(self, actor_id: str, version: int) -> Path:
        assert self.directory is not None
        return self.directory / f"{actor_id}@{version}"

    def _persist(self, rec: ActorRecord) -> None:
        if self.directory is None:
            return
        path = self._path(rec.actor_id, rec.version)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(codec.canonical_encode(rec))
        os.replace(tmp, path)

    def _load(self) -> None:
        assert self.directory is not None
        for path in sorted(self.directory.iterdir()):
            if path.suffix == ".tmp" or "@" not in path.name:
                continue
            rec = codec.canonical_decode(path.read_bytes())
            if not isinstance(rec, ActorRecord):
                raise DecodeError(f"{path} is not an actor record")
            self._records[(rec.actor_id, rec.version)] = rec


def record_doc(r: ActorRecord) -> dict:
    return {
        "actor_id": r.actor_id,
        "version": r.version,
        "lcm_state": r.lcm_state.value,
        "installed_at": r.installed_at,
        "package": codec.to_doc(r.package.package) if r.package is not None else None,
        "dependents": sorted(r.dependents),
        "redeployed_from": r.redeployed_from,
    }


def _record_from(d: dict) -> ActorRecord:
    pkg = codec.from_doc(d["package"]) if d["package"] is not None else None
    if pkg is not None and not isinstance(pkg, ActorPackage):
        raise DecodeError("record package is not an ActorPackage")
    return ActorRecord(
        actor_id=str(d["actor_id"]),
        version=int(d["version"]),
        lcm_state=LcmState(d["lcm_state"]),
        installed_at=int(d["installed_at"]),
        # persisted records were verified before they were first written
        package=VerifiedPackage(pkg) if pkg is not None else None,
        dependents=frozenset(d["dependents"]),
        redeployed_from=d.get("redeployed_from"),
    )


codec.register(ActorRecord, "ActorRecord", record_doc, _record_from)
