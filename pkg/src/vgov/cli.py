"""``gov``: command-line front end over a file workspace.

Exit codes: 0 success, 2 validation rejection, 3 quorum failure, 4 policy
veto or pause.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from vgov import __version__, codec
from vgov.attestation import (
    AttestationError,
    GraphSnapshot,
    Schema,
    export_snapshot,
    import_snapshot,
    make_attestation,
    make_revocation,
)
from vgov.casestudy import CaseStudyError, IncompleteBundle, load_case_scenario, run_case_study, verify_bundle
from vgov.delegation import DelegationError, DelegationRecord, ProposalRef, check_signatures, resolve
from vgov.fixed import Fixed, as_fixed
from vgov.io import (
    canonical_json,
    lines_bytes,
    pipeline_config_from_json,
    proposals_from_file,
    read_json,
    read_lines,
    trust_config_from_json,
    world_from_json,
)
from vgov.pipeline import Ballot, PipelineError, run_pipeline
from vgov.policy import PolicyRuntimeError, evaluate_epoch, shadow_diff
from vgov.policy_lang import PolicyError, diagnose, parse_policy
from vgov.proposal import MalformedProposal
from vgov.sim import NO_QUORUM, SimError, run_scenario
from vgov.trust import TrustError, compute_trust_scores
from vgov.workspace import RunManifest, Workspace, WorkspaceError, sha256_file

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_QUORUM = 3
EXIT_VETO = 4

VALIDATION_ERRORS = (
    AttestationError, CaseStudyError, DelegationError, MalformedProposal, PipelineError, PolicyError,
    PolicyRuntimeError, SimError, TrustError, WorkspaceError, codec.CodecError, ValueError, KeyError,
    FileNotFoundError, json.JSONDecodeError,
)


class Ctx:
    """Parsed global flags plus output helpers."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.ws = Workspace(args.workspace)
        self.canonical = args.format == "canonical"

    def say(self, human: str, canonical=None) -> None:
        if self.canonical and canonical is not None:
            out = canonical if isinstance(canonical, str) else canonical_json(canonical).decode()
            print(out)
        elif not self.canonical:
            print(human)

    def emit(self, path: str | Path, data: bytes) -> str:
        """Write an output file, record it when it lives inside the workspace, return its sha256."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        try:
            rel = path.resolve().relative_to(self.ws.root.resolve())
        except ValueError:
            return sha256_file(path)
        return self.ws.record(rel.as_posix(), kind="output")["sha256"]

    def run_record(self, inputs: dict, outputs: dict) -> None:
        self.ws.record_run(RunManifest(sys.argv[1:], inputs, outputs, self.args.seed or 0))


def _short(ident: bytes) -> str:
    return ident.hex()[:16]


def _load_snapshot(path: str) -> GraphSnapshot:
    return import_snapshot(path)


# identity / schema / attest / revoke ----------------------------------------


def cmd_identity(ctx: Ctx) -> int:
    a = ctx.args
    with ctx.ws.lock():
        if a.action == "new":
            seed = a.seed_phrase if a.seed_phrase is not None else (f"{a.name}:{ctx.args.seed}" if ctx.args.seed is not None else None)
            kp = ctx.ws.new_key(a.name, seed)
            store = ctx.ws.load_store()
            store.register_identity(kp.public_key)
            ctx.ws.save_store(store)
            ctx.say(f"{a.name} {kp.id.hex()}", {"name": a.name, "id": kp.id.hex()})
        else:
            names = ctx.ws.names()
            for name, ident in names.items():
                ctx.say(f"{name} {ident.hex()}")
            ctx.say("", {k: v.hex() for k, v in names.items()})
    return EXIT_OK


def cmd_schema(ctx: Ctx) -> int:
    a = ctx.args
    with ctx.ws.lock():
        store = ctx.ws.load_store()
        if a.action == "add":
            fields = {}
            for spec in a.field or []:
                name, _, kind = spec.partition(":")
                fields[name] = kind or "str"
            store.register_schema(Schema(a.schema_id, fields, not a.irrevocable))
            ctx.ws.save_store(store)
            ctx.say(f"schema {a.schema_id} registered", {"schema": a.schema_id})
        else:
            for sid in sorted(store.schemas):
                s = store.schemas[sid]
                ctx.say(f"{sid} {s.fields} revocable={s.revocable}")
            ctx.say("", {sid: store.schemas[sid].fields for sid in sorted(store.schemas)})
    return EXIT_OK


def _payload(raw: str | None, schema: Schema | None) -> dict:
    doc = json.loads(raw) if raw else {}
    if schema is None:
        return doc
    out = {}
    for k, v in doc.items():
        kind = schema.fields.get(k)
        if kind == "fixed":
            v = as_fixed(str(v))
        elif kind in ("bytes", "identity"):
            v = bytes.fromhex(v)
        out[k] = v
    return out


def cmd_attest(ctx: Ctx) -> int:
    a = ctx.args
    with ctx.ws.lock():
        store = ctx.ws.load_store()
        signer = ctx.ws.key(a.by)
        subject = ctx.ws.resolve_identity(a.subject)
        payload = _payload(a.payload, store.schemas.get(a.schema))
        att = make_attestation(signer, a.schema, subject, as_fixed(a.confidence), payload, a.at, a.expires)
        uid = store.submit_attestation(att)
        ctx.ws.save_store(store)
    ctx.say(f"attestation {uid.hex()}", {"uid": uid.hex()})
    return EXIT_OK


def cmd_revoke(ctx: Ctx) -> int:
    a = ctx.args
    with ctx.ws.lock():
        store = ctx.ws.load_store()
        rev = make_revocation(ctx.ws.key(a.by), bytes.fromhex(a.uid), a.at)
        store.revoke(rev)
        ctx.ws.save_store(store)
    ctx.say(f"revoked {a.uid}", {"revoked": a.uid})
    return EXIT_OK


def cmd_balance(ctx: Ctx) -> int:
    a = ctx.args
    with ctx.ws.lock():
        store = ctx.ws.load_store()
        store.set_balance(ctx.ws.resolve_identity(a.identity), as_fixed(a.amount), a.at)
        ctx.ws.save_store(store)
    ctx.say(f"balance set to {a.amount}", {"amount": a.amount})
    return EXIT_OK


# snapshot / trust / resolve --------------------------------------------------


def cmd_snapshot(ctx: Ctx) -> int:
    a = ctx.args
    if a.action == "export":
        with ctx.ws.lock():
            snap = ctx.ws.load_store().take_snapshot(a.at)
            export_snapshot(snap, a.out)
            for p in (Path(a.out), Path(str(a.out) + ".manifest.json")):
                try:
                    ctx.ws.record(p.resolve().relative_to(ctx.ws.root.resolve()).as_posix(), kind="snapshot")
                except ValueError:
                    pass
    else:
        snap = _load_snapshot(a.file)
    ctx.say(
        f"snapshot {snap.snapshot_id}: {len(snap.identities)} identities, {len(snap.attestations)} attestations\n"
        f"digest {snap.digest.hex()}",
        {"snapshot_id": snap.snapshot_id, "digest": snap.digest.hex()},
    )
    return EXIT_OK


def cmd_trust(ctx: Ctx) -> int:
    a = ctx.args
    snap = _load_snapshot(a.snapshot)
    config = trust_config_from_json(read_json(a.config), ctx.ws.names())
    table = compute_trust_scores(snap, config)
    data = codec.encode(table)
    outputs = {}
    if a.out:
        with ctx.ws.lock():
            outputs[str(a.out)] = ctx.emit(a.out, data)
            ctx.run_record({"snapshot": sha256_file(a.snapshot), "config": sha256_file(a.config)}, outputs)
    lines = [f"{'identity':16}  {'scaled':>8}  score"]
    lines += [f"{_short(i):16}  {s:>8}  {table.scores[i]}" for i, s in table.ranking()]
    lines.append(f"converged={table.converged} iterations={table.iterations}")
    ctx.say("\n".join(lines), data.hex())
    return EXIT_OK


def cmd_resolve(ctx: Ctx) -> int:
    a = ctx.args
    snap = _load_snapshot(a.snapshot)
    recs = read_lines(a.delegations)
    if not all(isinstance(r, DelegationRecord) for r in recs):
        raise ValueError("delegation file must hold DelegationRecord lines")
    check_signatures(recs, snap)
    weights = resolve(snap, recs, ProposalRef(a.proposal, a.topic))
    if a.out:
        with ctx.ws.lock():
            out = {str(a.out): ctx.emit(a.out, codec.encode(weights))}
            ctx.run_record({"snapshot": sha256_file(a.snapshot), "delegations": sha256_file(a.delegations)}, out)
    print(weights.root.hex())
    return EXIT_OK


# pipeline / sim / policy -----------------------------------------------------


def cmd_pipeline(ctx: Ctx) -> int:
    a = ctx.args
    snap = _load_snapshot(a.snapshot)
    ballots = read_lines(a.ballots)
    if not all(isinstance(b, Ballot) for b in ballots):
        raise ValueError("ballot file must hold Ballot lines")
    doc = read_json(a.config)
    if ctx.args.seed is not None:
        doc["seed"] = ctx.args.seed
    config = pipeline_config_from_json(doc)
    trust = compute_trust_scores(snap, trust_config_from_json(read_json(a.trust_config), ctx.ws.names()))
    proposals = proposals_from_file(a.proposals) if a.proposals else []
    run = run_pipeline(ballots, snap, trust, proposals, config, workers=a.workers)
    if a.out:
        out = Path(a.out)
        with ctx.ws.lock():
            outputs = {}
            for stage, _ in run.stages:
                outputs[f"{stage}.bin"] = ctx.emit(out / f"{stage}.bin", codec.encode(run.outputs[stage]))
            outputs["audit.lines"] = ctx.emit(out / "audit.lines", lines_bytes(run.audit))
            outputs["report.md"] = ctx.emit(out / "report.md", run.report.to_markdown().encode())
            ctx.run_record({"ballots": sha256_file(a.ballots), "snapshot": sha256_file(a.snapshot)}, outputs)
    rejected = len(run.outputs["validate"].rejections)
    human = run.report.to_markdown() + "\n" + "\n".join(f"{s:9} {d.hex()}" for s, d in run.stages)
    human += f"\nrejected ballots: {rejected}"
    ctx.say(human, {"root": run.report.root.hex(), "stages": {s: d.hex() for s, d in run.stages}, "rejected": rejected})
    return EXIT_OK


def cmd_sim(ctx: Ctx) -> int:
    a = ctx.args
    world = run_scenario(a.scenario, ctx.args.seed)
    data = lines_bytes(world.events)
    if a.out:
        with ctx.ws.lock():
            ctx.run_record({"scenario": sha256_file(a.scenario)}, {str(a.out): ctx.emit(a.out, data)})
    outcomes = [world.tasks[t].outcome for t in world.scenario_tasks]
    lines = []
    for o in outcomes:
        root = o.root.hex() if o.root else "-"
        lines.append(f"{o.task_id.hex()[:16]} {o.status} root={root[:16]} slashed={sorted(o.slashed)}")
    lines.append(f"events={len(world.events)} total_value={world.total_value()} fallback={world.fallback}")
    ctx.say("\n".join(lines), {
        "events": len(world.events),
        "outcomes": [{"task": o.task_id.hex(), "status": o.status, "root": o.root.hex() if o.root else None} for o in outcomes],
    })
    return EXIT_QUORUM if any(o.status == NO_QUORUM for o in outcomes) else EXIT_OK


def cmd_policy(ctx: Ctx) -> int:
    a = ctx.args
    if a.action == "check":
        res = diagnose(Path(a.policy).read_text())
        if isinstance(res, list):
            for e in res:
                print(f"{a.policy}:{e.line}:{e.col}: {e.code}: {e.message}", file=sys.stderr)
            return EXIT_INVALID
        ctx.say(f"{res.policy_id} v{res.version} ok digest={res.digest.hex()}", {"policy": res.policy_id, "digest": res.digest.hex()})
        return EXIT_OK
    world = world_from_json(read_json(a.world))
    if a.action == "eval":
        policies = [parse_policy(Path(p).read_text()) for p in a.policy]
        events: list = []
        plans = evaluate_epoch(world, policies, world.epoch, (), events)
        if a.out:
            with ctx.ws.lock():
                ctx.run_record({"world": sha256_file(a.world)}, {str(a.out): ctx.emit(a.out, lines_bytes(plans))})
        lines = []
        for p in plans:
            lines.append(f"plan {p.plan_id.hex()[:16]} policy={p.policy_id} timelock={list(p.timelock)} flags={list(p.flags)}")
            for act in p.actions:
                lines.append(f"  {act.kind} {({k: str(v) for k, v in act.params.items()})}")
        for e in events:
            lines.append(f"event {e.kind} {e.policy_id} {e.data}")
        ctx.say("\n".join(lines) or "no plans", lines_bytes(plans).decode().strip())
        return EXIT_OK
    active, candidate = (parse_policy(Path(p).read_text()) for p in (a.active, a.candidate))
    diff = shadow_diff(world, active, candidate, world.epoch)
    ctx.say(json.dumps(_jsonable(diff), indent=2, sort_keys=True), _jsonable(diff))
    return EXIT_OK


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, set, frozenset)):
        return [_jsonable(x) for x in v]
    if isinstance(v, bytes):
        return v.hex()
    if isinstance(v, Fixed):
        return str(v)
    if hasattr(v, "__dataclass_fields__"):
        return {k: _jsonable(getattr(v, k)) for k in v.__dataclass_fields__}
    return v


# case study / verify ---------------------------------------------------------


def cmd_case_study(ctx: Ctx) -> int:
    a = ctx.args
    if a.scenario:
        doc, base = load_case_scenario(a.scenario), Path(a.scenario).parent
    else:
        from importlib import resources

        doc, base = json.loads(resources.files("vgov").joinpath("data/demo_scenario.json").read_text()), Path(".")
    if ctx.args.seed is not None:
        doc["seed"] = ctx.args.seed
    ctx.ws.init()
    command = ["case-study", "--out", a.out, "--seed", str(doc.get("seed", 0))]
    if a.scenario:
        command += ["--scenario", Path(a.scenario).name]
    res = run_case_study(doc, base, command, ctx.ws, a.out)
    man = res.manifest
    outcome = res.outcome
    lines = [
        f"proposals={len(res.run.report.entries)} ballots accepted={len(res.run.outputs['validate'].accepted)}",
        f"report root {man['report_root']}",
        f"settlement {outcome.status if outcome else 'no task'}" + (f" slashed={sorted(outcome.slashed)}" if outcome else ""),
        f"funded {res.funded}",
        f"bundle {Path(ctx.args.workspace) / a.out}",
        "timings " + " ".join(f"{k}={v:.2f}s" for k, v in res.timings.items()),
    ]
    ctx.say("\n".join(lines), {"manifest_digest": man["manifest_digest"], "exit_code": res.exit_code})
    return res.exit_code


def cmd_verify(ctx: Ctx) -> int:
    a = ctx.args
    if a.bundle is None:
        bad = ctx.ws.verify()
        for p in bad:
            print(f"mismatch: {p}", file=sys.stderr)
        ctx.say("workspace verified" if not bad else f"{len(bad)} mismatches", {"ok": not bad, "mismatches": bad})
        return EXIT_INVALID if bad else EXIT_OK
    try:
        rep = verify_bundle(a.bundle)
    except IncompleteBundle as exc:
        print(f"incomplete bundle: {exc}", file=sys.stderr)
        return EXIT_INVALID
    ctx.say(str(rep), {"ok": rep.ok, "stage": rep.stage, "path": rep.path, "detail": rep.detail})
    return EXIT_OK if rep.ok else EXIT_INVALID


# argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gov", description="Verifiable governance toolkit.")
    p.add_argument("--workspace", default=".", help="workspace directory (default: current)")
    p.add_argument("--seed", type=int, default=None, help="seed for generated keys, scenarios and pipeline runs")
    p.add_argument("--format", choices=("canonical", "human"), default="human")
    p.add_argument("--version", action="version", version=f"gov {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("identity", help="manage workspace keys")
    ss = s.add_subparsers(dest="action", required=True)
    n = ss.add_parser("new")
    n.add_argument("name")
    n.add_argument("--seed-phrase", default=None, help="derive the key from this phrase")
    ss.add_parser("list")
    s.set_defaults(func=cmd_identity)

    s = sub.add_parser("schema", help="register or list attestation schemas")
    ss = s.add_subparsers(dest="action", required=True)
    n = ss.add_parser("add")
    n.add_argument("schema_id")
    n.add_argument("--field", action="append", help="name:type, repeatable")
    n.add_argument("--irrevocable", action="store_true")
    ss.add_parser("list")
    s.set_defaults(func=cmd_schema)

    s = sub.add_parser("attest", help="sign and store an attestation")
    s.add_argument("--by", required=True, help="signing identity name")
    s.add_argument("--subject", required=True, help="identity name or hex id")
    s.add_argument("--schema", required=True)
    s.add_argument("--confidence", default="1")
    s.add_argument("--payload", default=None, help="JSON object")
    s.add_argument("--at", type=int, default=0)
    s.add_argument("--expires", type=int, default=None)
    s.set_defaults(func=cmd_attest)

    s = sub.add_parser("revoke", help="revoke an attestation")
    s.add_argument("--by", required=True)
    s.add_argument("--uid", required=True)
    s.add_argument("--at", type=int, default=0)
    s.set_defaults(func=cmd_revoke)

    s = sub.add_parser("balance", help="record an identity's balance")
    s.add_argument("--identity", required=True)
    s.add_argument("--amount", required=True)
    s.add_argument("--at", type=int, default=0)
    s.set_defaults(func=cmd_balance)

    s = sub.add_parser("snapshot", help="export or inspect snapshots")
    ss = s.add_subparsers(dest="action", required=True)
    n = ss.add_parser("export")
    n.add_argument("--at", type=int, required=True)
    n.add_argument("--out", required=True)
    n = ss.add_parser("import")
    n.add_argument("file")
    s.set_defaults(func=cmd_snapshot)

    s = sub.add_parser("trust", help="trust scores")
    ss = s.add_subparsers(dest="action", required=True)
    n = ss.add_parser("score")
    n.add_argument("--snapshot", required=True)
    n.add_argument("--config", required=True)
    n.add_argument("--out", default=None)
    s.set_defaults(func=cmd_trust)

    s = sub.add_parser("resolve", help="resolve delegated weights for one proposal")
    s.add_argument("--snapshot", required=True)
    s.add_argument("--delegations", required=True)
    s.add_argument("--proposal", required=True)
    s.add_argument("--topic", default="global")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_resolve)

    s = sub.add_parser("pipeline", help="run the preference pipeline")
    ss = s.add_subparsers(dest="action", required=True)
    n = ss.add_parser("run")
    n.add_argument("--ballots", required=True)
    n.add_argument("--config", required=True)
    n.add_argument("--snapshot", required=True)
    n.add_argument("--trust-config", required=True)
    n.add_argument("--proposals", default=None)
    n.add_argument("--workers", type=int, default=1)
    n.add_argument("--out", default=None, help="directory for stage outputs")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("sim", help="run the service simulator")
    ss = s.add_subparsers(dest="action", required=True)
    n = ss.add_parser("run")
    n.add_argument("--scenario", required=True)
    n.add_argument("--out", default=None, help="event log (.lines)")
    s.set_defaults(func=cmd_sim)

    s = sub.add_parser("policy", help="check, evaluate or compare policies")
    ss = s.add_subparsers(dest="action", required=True)
    n = ss.add_parser("check")
    n.add_argument("policy")
    n = ss.add_parser("eval")
    n.add_argument("policy", nargs="+")
    n.add_argument("--world", required=True)
    n.add_argument("--out", default=None)
    n = ss.add_parser("shadow-diff")
    n.add_argument("active")
    n.add_argument("candidate")
    n.add_argument("--world", required=True)
    s.set_defaults(func=cmd_policy)

    s = sub.add_parser("case-study", help="run the end-to-end case study and write an audit bundle")
    s.add_argument("--scenario", default=None, help="scenario JSON (default: the shipped demo)")
    s.add_argument("--out", default="case-study", help="bundle directory inside the workspace")
    s.set_defaults(func=cmd_case_study)

    s = sub.add_parser("verify", help="verify an audit bundle, or the workspace manifest")
    s.add_argument("bundle", nargs="?", default=None)
    s.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    ctx = Ctx(args)
    try:
        return args.func(ctx)
    except VALIDATION_ERRORS as exc:
        print(f"gov: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
