"""Static validation of FGIS compositions into executable typed plans."""

from __future__ import annotations

import heapq
from typing import Callable

from stratum.errors import CycleDetected, DanglingPort, PortTypeMismatch, UnresolvedActor
from stratum.model.types import ActorManifest, Composition, Port, TypedPlan, VersionConstraint, Wire

Resolver = Callable[[str, VersionConstraint], ActorManifest]


def topological_order(node_ids, edges) -> list[str]:
    """Kahn's algorithm; among ready nodes the lowest node_id goes first."""
    indeg = {n: 0 for n in node_ids}
    succ: dict[str, set[str]] = {n: set() for n in node_ids}
    for a, b in edges:
        if b not in succ[a]:
            succ[a].add(b)
            indeg[b] += 1
    ready = [n for n, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for m in succ[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(ready, m)
    if len(order) != len(indeg):
        stuck = sorted(n for n, d in indeg.items() if d > 0)
        raise CycleDetected(f"composition graph has a cycle through {stuck}")
    return order


def validate_composition(c: Composition, resolve: Resolver) -> TypedPlan:
    nodes = {}
    for n in c.nodes:
        if n.node_id in nodes:
            raise DanglingPort(f"duplicate node id {n.node_id!r}")
        nodes[n.node_id] = n
    if not nodes:
        raise DanglingPort("composition has no nodes")

    manifests: dict[str, ActorManifest] = {}
    for nid in sorted(nodes):
        node = nodes[nid]
        try:
            m = resolve(node.actor_id, node.constraint)
        except UnresolvedActor:
            raise
        except LookupError as exc:
            raise UnresolvedActor(f"{node.actor_id} {node.constraint}") from exc
        if m is None or m.actor_id != node.actor_id or not node.constraint.satisfied_by(m.version):
            raise UnresolvedActor(f"{node.actor_id} {node.constraint}")
        manifests[nid] = m

    def out_type(nid: str, port: str):
        if nid not in manifests:
            raise DanglingPort(f"edge references unknown node {nid!r}")
        t = manifests[nid].port_type(port, "out")
        if t is None:
            raise DanglingPort(f"node {nid!r} has no output port {port!r}")
        return t

    def in_type(nid: str, port: str):
        if nid not in manifests:
            raise DanglingPort(f"binding references unknown node {nid!r}")
        t = manifests[nid].port_type(port, "in")
        if t is None:
            raise DanglingPort(f"node {nid!r} has no input port {port!r}")
        return t

    wiring: dict[str, dict[str, Wire]] = {nid: {} for nid in nodes}
    for e in c.edges:
        src_t = out_type(e.src_node, e.src_port)
        dst_t = in_type(e.dst_node, e.dst_port)
        if src_t != dst_t:
            raise PortTypeMismatch(
                f"{e.src_node}.{e.src_port} ({src_t.value}) -> {e.dst_node}.{e.dst_port} ({dst_t.value})"
            )
        if e.dst_port in wiring[e.dst_node]:
            raise DanglingPort(f"input {e.dst_node}.{e.dst_port} has more than one incoming edge")
        wiring[e.dst_node][e.dst_port] = Wire(e.src_node, e.src_port)

    exposed_in: list[Port] = []
    seen_names: set[str] = set()
    for b in c.exposed_inputs:
        t = in_type(b.node_id, b.port)
        if b.name in seen_names:
            raise DanglingPort(f"exposed input name {b.name!r} bound twice")
        if b.port in wiring[b.node_id]:
            raise DanglingPort(f"exposed input {b.name!r} targets already-bound port {b.node_id}.{b.port}")
        seen_names.add(b.name)
        wiring[b.node_id][b.port] = Wire(None, b.name)
        exposed_in.append(Port(b.name, t))

    for nid, m in manifests.items():
        for p in m.input_ports:
            if p.name not in wiring[nid]:
                raise DanglingPort(f"input {nid}.{p.name} is neither wired nor exposed")

    exposed_out: dict[str, Wire] = {}
    for b in c.exposed_outputs:
        out_type(b.node_id, b.port)
        if b.name in exposed_out:
            raise DanglingPort(f"exposed output name {b.name!r} bound twice")
        exposed_out[b.name] = Wire(b.node_id, b.port)

    order = topological_order(sorted(nodes), [(e.src_node, e.dst_node) for e in c.edges])
    return TypedPlan(
        order=tuple(order),
        nodes=nodes,
        manifests=manifests,
        wiring=wiring,
        exposed_inputs=tuple(exposed_in),
        exposed_outputs=exposed_out,
    )


def exposed_output_ports(plan: TypedPlan) -> tuple[Port, ...]:
    return tuple(
        Port(name, plan.manifests[w.node_id].port_type(w.port, "out")) for name, w in plan.exposed_outputs.items()
    )
