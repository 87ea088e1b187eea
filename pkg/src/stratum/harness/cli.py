"""``stratum`` command line: validate files, run scenarios, sign/verify packages, evaluate behaviors."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

from stratum.errors import ParseError, StratumError
from stratum.harness.scenario import load_scenario, run, validate_scenario
from stratum.harness.world import value_of
from stratum.interpreter.dsl import evaluate, parse_behavior, typecheck
from stratum.management import rules_from_doc
from stratum.model import codec
from stratum.model.composition import topological_order
from stratum.model.signing import build_package, verify_package
from stratum.model.types import ActorManifest, ActorPackage, Composition, Identity, Port, TrustStore
from stratum.model.values import format_value

OK, FAIL, USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 on usage errors already; keep the message terse
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE)


def _read(path: str) -> bytes:
    return Path(path).read_bytes()


def cmd_validate(args) -> int:
    data = _read(args.file)
    try:
        doc = codec.loads(data)
    except StratumError:
        # not canonical text: maybe a behavior program
        try:
            prog = parse_behavior(data)
        except ParseError as exc:
            print(f"invalid: {exc}")
            return FAIL
        print(f"ok: behavior program ({len(prog.declarations)} declarations)")
        return OK
    schema = codec.schema_of(doc)
    try:
        if schema == "RuleList" or (isinstance(doc, dict) and "rules" in doc):
            rules = rules_from_doc(doc)
            print(f"ok: policy ({len(rules)} rules)")
        elif schema and schema.startswith("Scenario/") or (isinstance(doc, dict) and "script" in doc):
            sc = validate_scenario(doc)
            print(f"ok: scenario (seed {sc.seed}, {len(sc.doc.get('script', []))} events)")
        else:
            obj = codec.from_doc(doc)
            if isinstance(obj, ActorManifest):
                print(f"ok: manifest {obj.service_id}")
            elif isinstance(obj, ActorPackage):
                print(f"ok: package {obj.manifest.service_id}")
            elif isinstance(obj, Composition):
                topological_order([n.node_id for n in obj.nodes], obj.edges)
                print(f"ok: composition ({len(obj.nodes)} nodes)")
            else:
                print(f"ok: {type(obj).__name__}")
    except (StratumError, KeyError, TypeError, ValueError) as exc:
        print(f"invalid: {type(exc).__name__}: {exc}")
        return FAIL
    return OK


def cmd_sim_run(args) -> int:
    try:
        sc = load_scenario(_read(args.scenario))
        result = run(sc, args.seed)
    except StratumError as exc:
        print(f"scenario error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return FAIL
    if args.trace:
        Path(args.trace).write_bytes(result.trace_bytes())
    else:
        sys.stdout.buffer.write(result.trace_bytes())
        sys.stdout.flush()
    for a in result.assertions:
        print(f"{'PASS' if a.passed else 'FAIL'} {a.name}" + ("" if a.passed else f": {a.detail}"),
              file=sys.stderr)
    return OK if result.passed else FAIL


def _load_key(path: str) -> bytes:
    text = _read(path).decode().strip()
    try:
        key = bytes.fromhex(text)
    except ValueError:
        key = b""
    if len(key) != 32:
        raise ValueError("key file must hold a 32-byte private key in hex")
    return key


def cmd_package_sign(args) -> int:
    try:
        manifest = codec.canonical_decode(_read(args.manifest))
        if not isinstance(manifest, ActorManifest):
            raise ValueError("not a manifest")
        pkg = build_package(manifest, _read(args.payload), _load_key(args.key))
    except (StratumError, ValueError, KeyError) as exc:
        print(f"cannot sign: {exc}", file=sys.stderr)
        return FAIL
    out = codec.canonical_encode(pkg)
    if args.out:
        Path(args.out).write_bytes(out)
    else:
        sys.stdout.buffer.write(out + b"\n")
    return OK


def cmd_package_verify(args) -> int:
    try:
        pkg = codec.canonical_decode(_read(args.package))
        if not isinstance(pkg, ActorPackage):
            raise ValueError("not a package")
        trust = TrustStore()
        for doc in codec.loads(_read(args.trust)):
            ident = codec.from_doc(doc)
            if not isinstance(ident, Identity):
                raise ValueError("trust file must list identities")
            trust.add(ident)
        verify_package(pkg, trust)
    except (StratumError, ValueError, KeyError, TypeError) as exc:
        print(f"REJECTED: {type(exc).__name__}: {exc}")
        return FAIL
    print(f"VERIFIED {pkg.manifest.service_id}")
    return OK


def cmd_eval(args) -> int:
    try:
        inputs = {}
        for item in args.inputs or []:
            name, sep, text = item.partition("=")
            if not sep or not name:
                print(f"bad --in {item!r}; expected port=value", file=sys.stderr)
                return USAGE
            try:
                raw = codec.loads(text)
            except StratumError:
                raw = text
            inputs[name] = value_of(raw)
        prog = parse_behavior(_read(args.behavior))
        typecheck(prog, [Port(k, v.type) for k, v in inputs.items()])
        out = evaluate(prog, inputs)
    except (StratumError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return FAIL
    print(format_value(out["result"]))
    return OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stratum", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="check a manifest, package, composition, policy, scenario or behavior file")
    v.add_argument("file")
    v.set_defaults(func=cmd_validate)

    sim = sub.add_parser("sim", help="simulation")
    simsub = sim.add_subparsers(dest="simcmd", required=True, parser_class=_Parser)
    r = simsub.add_parser("run", help="run a scenario and print its trace")
    r.add_argument("scenario")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--trace", default=None, help="write the trace here instead of stdout")
    r.set_defaults(func=cmd_sim_run)

    pk = sub.add_parser("package", help="package signing")
    pksub = pk.add_subparsers(dest="pkcmd", required=True, parser_class=_Parser)
    s = pksub.add_parser("sign")
    s.add_argument("manifest")
    s.add_argument("payload")
    s.add_argument("--key", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_package_sign)
    ver = pksub.add_parser("verify")
    ver.add_argument("package")
    ver.add_argument("--trust", required=True, help="file listing trusted identities")
    ver.set_defaults(func=cmd_package_verify)

    e = sub.add_parser("eval", help="run a behavior program standalone")
    e.add_argument("behavior")
    e.add_argument("--in", dest="inputs", action="append", metavar="PORT=VALUE")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else USAGE
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE
