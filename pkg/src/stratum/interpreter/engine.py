"""Actors engine: runs AIS behavior programs and executes FGIS plans across domains."""

from __future__ import annotations

from typing import Callable, Mapping

from stratum.errors import (
    EvalError,
    ExecError,
    NodeEvalError,
    PolicyRevoked,
    RemoteUnavailable,
    TypeCheckError,
    UnboundIdentifier,
)
from stratum.interpreter.dsl import BehaviorProgram, evaluate, parse_behavior, typecheck
from stratum.interpreter.placement import PlacementPlan
from stratum.model.codec import canonical_decode
from stratum.model.composition import Resolver, validate_composition
from stratum.model.types import ActorManifest, Composition, Kind, TypedPlan
from stratum.model.values import Value

# (domain_id, node_id, manifest, inputs, correlation_id) -> outputs
Dispatch = Callable[[str, str, ActorManifest, Mapping[str, Value], str], Mapping[str, Value]]


def execute_plan(
    plan: TypedPlan,
    inputs: Mapping[str, Value],
    placement: PlacementPlan,
    dispatch: Dispatch,
    veto: Callable[[str, ActorManifest], bool] | None = None,
    correlation_prefix: str = "",
) -> dict[str, Value]:
    """Evaluate nodes in plan order; a veto before any node aborts the remaining ones."""
    missing = [p.name for p in plan.exposed_inputs if p.name not in inputs]
    if missing:
        raise ExecError(f"exposed inputs not bound: {missing}")
    produced: dict[tuple[str, str], Value] = {}
    for seq, node_id in enumerate(plan.order):
        manifest = plan.manifests[node_id]
        if veto is not None and veto(node_id, manifest):
            raise PolicyRevoked(f"execution revoked before node {node_id!r}")
        domain_id = placement.assignment.get(node_id)
        if domain_id is None:
            raise ExecError(f"placement does not cover node {node_id!r}")
        node_inputs = {
            port: inputs[w.port] if w.node_id is None else produced[(w.node_id, w.port)]
            for port, w in plan.wiring[node_id].items()
        }
        cid = f"{correlation_prefix}{node_id}#{seq}"
        try:
            outputs = dispatch(domain_id, node_id, manifest, node_inputs, cid)
        except (RemoteUnavailable, PolicyRevoked, NodeEvalError):
            raise
        except (EvalError, TypeCheckError) as exc:
            raise NodeEvalError(node_id, exc) from exc
        for port in manifest.output_ports:
            if port.name not in outputs:
                raise NodeEvalError(node_id, ExecError(f"output port {port.name!r} missing"))
            produced[(node_id, port.name)] = outputs[port.name]
    return {name: produced[(w.node_id, w.port)] for name, w in plan.exposed_outputs.items()}


class ActorsEngine:
    """Local interpreter for actor payloads; parsed programs are cached by behavior hash."""

    def __init__(self, resolve: Resolver, payload_of: Callable[[ActorManifest], bytes]) -> None:
        self.resolve = resolve
        self.payload_of = payload_of
        self._programs: dict[str, BehaviorProgram] = {}

    def program(self, manifest: ActorManifest, payload: bytes | None = None) -> BehaviorProgram:
        prog = self._programs.get(manifest.behavior_hash)
        if prog is None:
            payload = self.payload_of(manifest) if payload is None else payload
            prog = parse_behavior(payload)
            typecheck(prog, manifest.input_ports, manifest.output_ports)
            self._programs[manifest.behavior_hash] = prog
        return prog

    def plan(self, manifest: ActorManifest, payload: bytes | None = None) -> TypedPlan:
        """Validate the composition carried by an FGIS manifest (never cached across resolutions)."""
        payload = self.payload_of(manifest) if payload is None else payload
        comp = canonical_decode(payload)
        if not isinstance(comp, Composition):
            raise ExecError(f"{manifest.service_id} payload is not a composition")
        return validate_composition(comp, self.resolve)

    def run_local(self, manifest: ActorManifest, inputs: Mapping[str, Value], payload: bytes | None = None) -> dict[str, Value]:
        if manifest.kind is Kind.AIS:
            prog = self.program(manifest, payload)
            missing = [p.name for p in manifest.input_ports if p.name not in inputs]
            if missing:
                raise UnboundIdentifier(f"input port(s) not bound: {missing}")
            for p in manifest.input_ports:
                if inputs[p.name].type != p.type:
                    raise TypeCheckError(f"input {p.name!r} is {inputs[p.name].type.value}, expected {p.type.value}")
            return evaluate(prog, {p.name: inputs[p.name] for p in manifest.input_ports}, manifest.output_ports[0].name)
        plan = self.plan(manifest, payload)
        local = PlacementPlan({n: "local" for n in plan.order}, 0.0, {n: ("local",) for n in plan.order})
        return execute_plan(plan, inputs, local, lambda d, n, m, i, c: self.run_local(m, i))
