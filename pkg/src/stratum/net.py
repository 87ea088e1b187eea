"""Signed message envelopes and a deterministic logical-time network.

Links are per-direction FIFO queues with a fixed latency in ticks; drops are
decided by a seeded RNG. The same envelope abstraction could ride a real
line-delimited transport; nothing in the protocol code depends on the
simulator beyond ``send`` and ``now``.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Protocol

from stratum.model import codec
from stratum.model.signing import Principal, verify
from stratum.model.types import TrustStore

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Envelope:
    kind: str
    sender: str
    recipient: str
    correlation_id: str
    body: Any = field(default_factory=dict, hash=False)
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return codec.dumps_doc(
            {
                "kind": self.kind,
                "sender": self.sender,
                "recipient": self.recipient,
                "correlation_id": self.correlation_id,
                "body": self.body,
            }
        )

    def signed(self, principal: Principal) -> "Envelope":
        return replace(self, signature=principal.sign(self.signing_bytes()))

    def verify_sender(self, trust: TrustStore) -> bool:
        ident = trust.get(self.sender)
        return ident is not None and verify(self.signing_bytes(), self.signature, ident.public_key)

    def encode(self) -> bytes:
        return codec.dumps_doc(
            {
                "kind": self.kind,
                "sender": self.sender,
                "recipient": self.recipient,
                "correlation_id": self.correlation_id,
                "body": self.body,
                "signature": self.signature.hex(),
            }
        )

    @classmethod
    def decode(cls, data: bytes) -> "Envelope":
        d = codec.loads(data)
        return cls(str(d["kind"]), str(d["sender"]), str(d["recipient"]), str(d["correlation_id"]), d["body"],
                   codec.dec_bytes(d["signature"]))


class Node(Protocol):
    node_id: str

    def receive(self, env: Envelope) -> None: ...

    def on_tick(self, now: int) -> None: ...


@dataclass
class Link:
    latency: int = 0
    drop: float = 0.0
    up: bool = True
    last_delivery: int = 0


@dataclass(order=True)
class _Pending:
    at: int
    seq: int
    env: Envelope = field(compare=False)


class SimNetwork:
    def __init__(self, seed: int = 0) -> None:
        self.now = 0
        self.rng = random.Random(seed)
        self.nodes: dict[str, Node] = {}
        self.links: dict[tuple[str, str], Link] = {}
        self._queue: list[_Pending] = []
        self._seq = itertools.count()
        self.trace: list[dict] = []
        self._draining = False

    # -- topology --------------------------------------------------------

    def add_node(self, node: Node) -> None:
        if node.node_id in self.nodes:
            raise ValueError(f"duplicate node id {node.node_id!r}")
        self.nodes[node.node_id] = node

    def link(self, a: str, b: str, latency: int = 0, drop: float = 0.0) -> None:
        if latency < 0 or not 0.0 <= drop <= 1.0:
            raise ValueError("latency must be >= 0 and drop in [0, 1]")
        self.links[(a, b)] = Link(latency, drop)
        self.links[(b, a)] = Link(latency, drop)

    def connect_all(self, latency: int = 0) -> None:
        ids = sorted(self.nodes)
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                if (a, b) not in self.links:
                    self.link(a, b, latency)

    def set_link_up(self, a: str, b: str, up: bool) -> None:
        for key in ((a, b), (b, a)):
            if key in self.links:
                self.links[key].up = up

    def latency(self, a: str, b: str) -> int | None:
        link = self.links.get((a, b))
        return None if link is None else link.latency

    def reachable(self, a: str, b: str) -> bool:
        link = self.links.get((a, b))
        return link is not None and link.up and link.drop < 1.0

    # -- messaging ---------------------------------------------------------

    def record(self, event: str, **fields) -> None:
        self.trace.append({"tick": self.now, "event": event, **fields})

    def send(self, env: Envelope) -> None:
        link = self.links.get((env.sender, env.recipient))
        base = {"kind": env.kind, "from": env.sender, "to": env.recipient, "cid": env.correlation_id}
        if link is None or not link.up:
            self.record("drop", reason="no-link" if link is None else "partitioned", **base)
            return
        if link.drop >= 1.0 or (link.drop > 0.0 and self.rng.random() < link.drop):
            self.record("drop", reason="loss", **base)
            return
        at = max(self.now + link.latency, link.last_delivery)
        link.last_delivery = at
        heapq.heappush(self._queue, _Pending(at, next(self._seq), env))
        self.record("send", at=at, **base)

    def inject(self, env: Envelope, at: int | None = None) -> None:
        """Queue an envelope bypassing links (fault injection / forged traffic)."""
        heapq.heappush(self._queue, _Pending(self.now if at is None else at, next(self._seq), env))

    def _drain(self) -> None:
        if self._draining:
            return
        self._draining = True
        try:
            while self._queue and self._queue[0].at <= self.now:
                p = heapq.heappop(self._queue)
                node = self.nodes.get(p.env.recipient)
                if node is None:
                    self.record("drop", reason="unknown-recipient", kind=p.env.kind, to=p.env.recipient)
                    continue
                self.record("deliver", kind=p.env.kind, **{"from": p.env.sender, "to": p.env.recipient,
                                                           "cid": p.env.correlation_id})
                node.receive(p.env)
        finally:
            self._draining = False

    def tick(self) -> None:
        self.now += 1
        for nid in sorted(self.nodes):
            self.nodes[nid].on_tick(self.now)
        self._drain()

    def advance(self, ticks: int) -> None:
        self._drain()
        for _ in range(ticks):
            self.tick()

    def advance_to(self, t: int) -> None:
        self._drain()
        while self.now < t:
            self.tick()

    def run_until(self, predicate: Callable[[], bool], max_ticks: int = 100) -> bool:
        """Drive the clock until ``predicate`` holds or ``max_ticks`` elapse."""
        self._drain()
        limit = self.now + max_ticks
        while not predicate() and self.now < limit:
            self.tick()
        return predicate()

    def pending(self) -> int:
        return len(self._queue)

    def trace_lines(self) -> list[bytes]:
        return [codec.dumps_doc(e) for e in self.trace]
