"""End-to-end case study and the self-verifying audit bundle it leaves behind.

The case study runs ingest, the preference pipeline, a quorum-verified
re-execution of that pipeline on the service simulator, and a timelocked
funding policy that pays out only when the settled root matches. Every input
and every stage output is written to a bundle::

    manifest.json            canonical JSON: file digests, stage digests, summary, self-digest
    inputs/                  snapshot, trust config, pipeline config, proposals, ballots, scenario, policy
    stages/                  trust table and the four pipeline stage outputs, plus the audit trail
    report.md, proofs.lines  the priority report and one inclusion proof per entry
    sim/                     simulator event log and settlement outcome
    policy/                  observed worlds, final plans, policy audit log, epoch manifests

:func:`verify_bundle` recomputes everything from ``inputs/`` and reports the
first stage whose bytes diverge.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from vgov import __version__, codec, demo
from vgov.attestation import GraphSnapshot
from vgov.fixed import ZERO, Fixed, as_fixed, sum_by_key
from vgov.io import canonical_json, lines_bytes, pipeline_config_from_json, proposals_from_file, read_lines, trust_config_from_json
from vgov.merkle import MerkleProof, verify_proof
from vgov.pipeline import Ballot, PipelineConfig, PipelineRun, run_pipeline
from vgov.policy import EXECUTED, PLANNED, PolicyEngine, PolicyWorld, ReplayMismatch
from vgov.policy_lang import parse_policy
from vgov.proposal import Proposal
from vgov.sim import ACCEPTED, NO_QUORUM, SettlementOutcome, TaskRecord, World, register_task, run_with_disputes
from vgov.trust import TrustConfig, TrustScoreTable, compute_trust_scores

EXIT_OK = 0
EXIT_QUORUM = 3
EXIT_VETO = 4

BUNDLE_FORMAT = "vgov-bundle/1"
PIPELINE_STAGES = ("validate", "weights", "aggregate", "report")

DEFAULT_FUNDING_POLICY = """\
# fund ready proposals once the pipeline root has been settled by quorum
policy grant-funding
version 1
expiry 1000
timelock delay=1 window=2
trigger proposal-submitted
condition flag(settled)
action transfer to=grants amount=metric(ready_budget) in [0, 50000000]
limit per-action 20000000
limit per-epoch 20000000
exception clipped -> escalate
"""


class CaseStudyError(Exception):
    pass


class IncompleteBundle(CaseStudyError):
    """A file the manifest lists, or the manifest itself, is missing."""


@dataclass
class CaseInputs:
    snapshot: GraphSnapshot
    trust_config: TrustConfig
    pipeline_config: PipelineConfig
    proposals: tuple
    ballots: tuple


@dataclass
class CaseStudyResult:
    run: PipelineRun
    trust: TrustScoreTable
    world: World
    outcome: SettlementOutcome | None
    engine: PolicyEngine
    funded: Fixed
    exit_code: int
    files: dict = field(default_factory=dict)  # bundle relpath -> bytes
    timings: dict = field(default_factory=dict)  # phase -> seconds, never written to the bundle

    @property
    def manifest(self) -> dict:
        return json.loads(self.files["manifest.json"])


@dataclass(frozen=True)
class VerifyReport:
    ok: bool
    stage: str | None = None
    path: str | None = None
    detail: str = ""

    def __str__(self) -> str:
        if self.ok:
            return "bundle verified"
        where = f" ({self.path})" if self.path else ""
        return f"divergence at stage {self.stage}{where}: {self.detail}"


# scenario resolution --------------------------------------------------------


def _default_operators(count: int, tamperers: int, bond: str) -> list[dict]:
    ops = []
    for i in range(count):
        behavior = "tamper" if i >= count - tamperers else "honest"
        ops.append({"id": f"op-{i + 1}", "bond": bond, "mode": "economic", "behavior": behavior, "params": {}})
    return ops


def resolve_scenario(doc: dict, base: str | Path = ".") -> tuple[CaseInputs, dict, str]:
    """Turn a scenario document into concrete inputs, simulator settings and policy text.

    ``doc["workload"]`` generates a seeded synthetic workload; ``doc["inputs"]``
    names files instead (snapshot ``.bin``, trust config JSON, proposals,
    ballot ``.lines``, pipeline config JSON). With neither the case study runs
    on empty inputs.
    """
    base = Path(base)
    seed = int(doc.get("seed", 0))
    authority = doc.get("authority")
    if "workload" in doc:
        w = doc["workload"]
        load = demo.case_study_workload(
            proposals=int(w.get("proposals", 20)),
            evaluations=int(w.get("evaluations", 100)),
            voters=int(w.get("voters", 25)),
            seed=seed,
        )
        inputs = CaseInputs(load["snapshot"], load["trust_config"], load["config"], load["proposals"], load["ballots"])
        if authority is None and int(w.get("voters", 25)) >= 2:
            authority = demo.demo_keys(int(w.get("voters", 25)), seed)[1].id.hex()
    elif "inputs" in doc:
        spec = doc["inputs"]
        snapshot = codec.decode((base / spec["snapshot"]).read_bytes())
        if not isinstance(snapshot, GraphSnapshot):
            raise CaseStudyError("inputs.snapshot is not a canonical snapshot")
        trust_config = trust_config_from_json(json.loads((base / spec["trust_config"]).read_text()))
        config = pipeline_config_from_json(json.loads((base / spec["pipeline_config"]).read_text())) if "pipeline_config" in spec else PipelineConfig(seed=seed)
        proposals = tuple(proposals_from_file(base / spec["proposals"]))
        ballots = tuple(read_lines(base / spec["ballots"]))
        if not all(isinstance(b, Ballot) for b in ballots):
            raise CaseStudyError("inputs.ballots must hold Ballot lines")
        inputs = CaseInputs(snapshot, trust_config, config, proposals, ballots)
    else:
        inputs = CaseInputs(GraphSnapshot(0, (), {}, {}), TrustConfig({}), PipelineConfig(seed=seed), (), ())
    inputs.proposals = tuple(sorted(inputs.proposals, key=lambda p: p.id))

    quorum = doc.get("quorum", [3, 5])
    operators = doc.get("operators") or _default_operators(int(quorum[1]), int(doc.get("tamperers", 1)), str(doc.get("bond", "100")))
    actions = []
    for a in doc.get("actions", []):
        if a.get("kind") not in ("veto", "pause", "unpause"):
            raise CaseStudyError(f"unknown policy action {a.get('kind')!r}")
        who = a.get("authority", authority)
        if who is None:
            raise CaseStudyError("policy actions need an authority identity")
        actions.append({"epoch": int(a["epoch"]), "kind": a["kind"], "authority": who})
    settings = {
        "seed": seed,
        "treasury": str(as_fixed(str(doc.get("treasury", "1000")))),
        "quorum": [int(quorum[0]), int(quorum[1])],
        "deadline": int(doc.get("deadline", 2)),
        "reward": str(as_fixed(str(doc.get("reward", "50")))),
        "slash_fraction": str(as_fixed(str(doc.get("slash_fraction", "1")))),
        "challenge_window": int(doc.get("challenge_window", 2)),
        "operators": [
            {"id": o["id"], "bond": str(as_fixed(str(o["bond"]))), "mode": o.get("mode", "economic"),
             "behavior": o.get("behavior", "honest"), "params": o.get("params", {})}
            for o in operators
        ],
        "accounts": {k: str(as_fixed(str(v))) for k, v in sorted(doc.get("accounts", {}).items())},
        "disputes": [dict(d) for d in doc.get("disputes", [])],
        "actions": actions,
    }
    policy_text = doc.get("policy", DEFAULT_FUNDING_POLICY)
    if "policy_file" in doc:
        policy_text = (base / doc["policy_file"]).read_text()
    return inputs, settings, policy_text


# the three phases -----------------------------------------------------------


def trust_table(snapshot: GraphSnapshot, config: TrustConfig) -> TrustScoreTable:
    """Trust scores, or an empty table when there are no seeds (an empty case study)."""
    if not config.seeds:
        return TrustScoreTable(snapshot.snapshot_id, snapshot.digest, config.digest, {}, {})
    return compute_trust_scores(snapshot, config)


def _simulate(inputs: CaseInputs, settings: dict) -> tuple[World, SettlementOutcome | None]:
    world = World(settings["seed"], Fixed.parse(settings["treasury"]), shared_execution=True)
    for o in settings["operators"]:
        world.add_operator(o["id"], Fixed.parse(o["bond"]), o["mode"], o["behavior"], o["params"])
    for name, amt in settings["accounts"].items():
        world.fund(name, Fixed.parse(amt))
    if inputs.proposals:
        pins = tuple(world.pin(x) for x in (inputs.snapshot, inputs.trust_config, inputs.ballots, inputs.proposals, inputs.pipeline_config))
        threshold, total = settings["quorum"]
        task = TaskRecord(
            kind="pipeline-run",
            inputs=pins,
            threshold=threshold,
            total=total,
            deadline=settings["deadline"],
            reward=Fixed.parse(settings["reward"]),
            slash_fraction=Fixed.parse(settings["slash_fraction"]),
            challenge_window=settings["challenge_window"],
        )
        world.scenario_tasks.append(register_task(world, task))
    run_with_disputes(world, settings["disputes"])
    outcome = world.tasks[world.scenario_tasks[0]].outcome if world.scenario_tasks else None
    return world, outcome


def _fund(inputs: CaseInputs, run: PipelineRun, outcome: SettlementOutcome | None, settings: dict, policy_text: str):
    policy = parse_policy(policy_text)
    engine = PolicyEngine([policy], inputs.snapshot)
    budgets = {p.id: p.budget for p in inputs.proposals if p.budget is not None}
    ready = [e for e in run.report.entries if e.ready]
    settled = outcome is not None and outcome.status == ACCEPTED and outcome.root == run.report.root
    metrics = {"ready_budget": sum_by_key({e.proposal_id: budgets.get(e.proposal_id, ZERO) for e in ready}),
               "ready_count": Fixed.from_int(len(ready))}
    flags = {"settled": settled}
    submitted = tuple((e.proposal_id, tuple(e.themes)) for e in ready)
    actions = settings["actions"]
    last = max((a["epoch"] for a in actions), default=1)
    worlds = []
    interventions = 0
    epoch = 1
    while epoch <= last + 1000:
        for a in (x for x in actions if x["epoch"] == epoch):
            who = bytes.fromhex(a["authority"])
            if a["kind"] == "veto":
                for pid in sorted(engine.plans):
                    if engine.plans[pid].status == PLANNED:
                        engine.veto(pid, who, epoch)
                        interventions += 1
            elif a["kind"] == "pause":
                engine.pause(policy.policy_id, who, epoch)
                interventions += 1
            else:
                engine.unpause(policy.policy_id, who, epoch)
        world = PolicyWorld(epoch, None, metrics, flags, submitted if epoch == 1 else ())
        worlds.append(world)
        engine.run_epoch(world)
        if epoch >= last and not any(p.status == PLANNED for p in engine.plans.values()):
            break
        epoch += 1
    funded = sum_by_key({
        (pid, i): a.params["amount"]
        for pid, plan in engine.plans.items() if plan.status == EXECUTED
        for i, a in enumerate(plan.actions) if a.kind == "transfer"
    })
    return engine, worlds, funded, interventions


def _derive(inputs: CaseInputs, settings: dict, policy_text: str, timings: dict | None = None) -> tuple[dict, dict]:
    """Every derived bundle file, plus the values the summary needs."""
    timings = {} if timings is None else timings
    t0 = time.perf_counter()
    trust = trust_table(inputs.snapshot, inputs.trust_config)
    run = run_pipeline(inputs.ballots, inputs.snapshot, trust, inputs.proposals, inputs.pipeline_config)
    t1 = time.perf_counter()
    world, outcome = _simulate(inputs, settings)
    t2 = time.perf_counter()
    engine, worlds, funded, interventions = _fund(inputs, run, outcome, settings, policy_text)
    t3 = time.perf_counter()
    timings.update({"pipeline": t1 - t0, "simulation": t2 - t1, "policy": t3 - t2})

    files = {"stages/trust.bin": codec.encode(trust)}
    for stage in PIPELINE_STAGES:
        files[f"stages/{stage}.bin"] = codec.encode(run.outputs[stage])
    files["stages/audit.lines"] = lines_bytes(run.audit)
    files["report.md"] = run.report.to_markdown().encode()
    tree = run.report.proof_tree()
    files["proofs.lines"] = lines_bytes([tree.prove(e.proposal_id.encode()) for e in run.report.entries] if tree else [])
    files["sim/events.lines"] = lines_bytes(world.events)
    files["sim/outcome.bin"] = codec.encode(outcome)
    files["policy/worlds.lines"] = lines_bytes(worlds)
    files["policy/plans.lines"] = lines_bytes([engine.plans[k] for k in sorted(engine.plans)])
    files["policy/audit.lines"] = lines_bytes(engine.audit)
    files["policy/manifests.lines"] = lines_bytes(engine.manifests)

    if outcome is not None and outcome.status == NO_QUORUM:
        exit_code = EXIT_QUORUM
    elif interventions:
        exit_code = EXIT_VETO
    else:
        exit_code = EXIT_OK
    summary = {
        "run": run, "trust": trust, "world": world, "outcome": outcome, "engine": engine,
        "funded": funded, "exit_code": exit_code,
    }
    return files, summary


def input_files(inputs: CaseInputs, settings: dict, policy_text: str) -> dict[str, bytes]:
    return {
        "inputs/snapshot.bin": codec.encode(inputs.snapshot),
        "inputs/trust_config.bin": codec.encode(inputs.trust_config),
        "inputs/pipeline_config.bin": codec.encode(inputs.pipeline_config),
        "inputs/proposals.lines": lines_bytes(inputs.proposals),
        "inputs/ballots.lines": lines_bytes(inputs.ballots),
        "inputs/scenario.json": canonical_json(settings),
        "inputs/funding.policy": policy_text.encode(),
    }


def _decode_inputs(files: dict[str, bytes]) -> tuple[CaseInputs, dict, str]:
    def lines(path):
        return tuple(codec.load_lines(files[path].decode().splitlines()))

    snapshot = codec.decode(files["inputs/snapshot.bin"])
    trust_config = codec.decode(files["inputs/trust_config.bin"])
    config = codec.decode(files["inputs/pipeline_config.bin"])
    proposals = lines("inputs/proposals.lines")
    ballots = lines("inputs/ballots.lines")
    checks = [
        isinstance(snapshot, GraphSnapshot), isinstance(trust_config, TrustConfig), isinstance(config, PipelineConfig),
        all(isinstance(p, Proposal) for p in proposals), all(isinstance(b, Ballot) for b in ballots),
    ]
    if not all(checks):
        raise CaseStudyError("an input file decodes to the wrong record type")
    settings = json.loads(files["inputs/scenario.json"])
    if canonical_json(settings) != files["inputs/scenario.json"]:
        raise CaseStudyError("scenario.json is not canonical")
    return CaseInputs(snapshot, trust_config, config, proposals, ballots), settings, files["inputs/funding.policy"].decode()


def _manifest(files: dict[str, bytes], summary: dict, settings: dict, command: list) -> bytes:
    run, outcome = summary["run"], summary["outcome"]
    doc = {
        "format": BUNDLE_FORMAT,
        "tool_version": __version__,
        "command": list(command),
        "seed": settings["seed"],
        "files": {k: hashlib.sha256(v).hexdigest() for k, v in sorted(files.items())},
        "stages": {stage: d.hex() for stage, d in run.stages},
        "run_id": run.run_id.hex(),
        "report_root": run.report.root.hex(),
        "settlement": None if outcome is None else {
            "status": outcome.status,
            "root": outcome.root.hex() if outcome.root else None,
            "slashed": sorted(outcome.slashed),
        },
        "funded": str(summary["funded"]),
        "exit_code": summary["exit_code"],
    }
    doc["manifest_digest"] = hashlib.sha256(canonical_json(doc)).hexdigest()
    return canonical_json(doc)


def run_case_study(
    scenario: dict,
    base: str | Path = ".",
    command: list | None = None,
    workspace=None,
    out: str = "case-study",
) -> CaseStudyResult:
    """Run the whole case study; with a workspace, also write and record the bundle under ``out``."""
    t0 = time.perf_counter()
    inputs, settings, policy_text = resolve_scenario(scenario, base)
    t1 = time.perf_counter()
    timings = {"ingest": t1 - t0}
    derived, summary = _derive(inputs, settings, policy_text, timings)
    files = {**input_files(inputs, settings, policy_text), **derived}
    files["manifest.json"] = _manifest(files, summary, settings, command or ["case-study"])
    timings["total"] = time.perf_counter() - t0
    result = CaseStudyResult(
        run=summary["run"], trust=summary["trust"], world=summary["world"], outcome=summary["outcome"],
        engine=summary["engine"], funded=summary["funded"], exit_code=summary["exit_code"], files=files, timings=timings,
    )
    if workspace is not None:
        write_bundle(workspace, out, files, command or ["case-study"], settings["seed"])
    return result


# bundle io ------------------------------------------------------------------


def write_bundle(workspace, out: str, files: dict[str, bytes], command: list, seed: int) -> None:
    from vgov.workspace import RunManifest

    with workspace.lock():
        for rel in sorted(files):
            workspace.write(f"{out}/{rel}", files[rel], kind="bundle")
        man = json.loads(files["manifest.json"])
        workspace.record_run(RunManifest(
            command=list(command),
            inputs={k: v for k, v in man["files"].items() if k.startswith("inputs/")},
            outputs={k: v for k, v in man["files"].items() if not k.startswith("inputs/")},
            seed=seed,
        ))


def read_bundle(path: str | Path) -> dict[str, bytes]:
    root = Path(path)
    if not root.is_dir():
        raise IncompleteBundle(f"{root} is not a bundle directory")
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def stage_of(path: str) -> str:
    if path == "manifest.json":
        return "manifest"
    if path.startswith("inputs/"):
        return "inputs"
    if path.startswith("stages/"):
        return Path(path).stem
    if path in ("report.md", "proofs.lines"):
        return "report" if path == "report.md" else "proofs"
    return path.split("/", 1)[0]


# verification order for recomputed files; the first mismatch names the stage
_CHECK_ORDER = (
    "stages/trust.bin",
    *(f"stages/{s}.bin" for s in PIPELINE_STAGES),
    "stages/audit.lines",
    "report.md",
    "proofs.lines",
    "sim/events.lines",
    "sim/outcome.bin",
    "policy/worlds.lines",
    "policy/plans.lines",
    "policy/audit.lines",
    "policy/manifests.lines",
)


def verify_bundle(bundle: str | Path | dict) -> VerifyReport:
    """Check a bundle: manifest, file digests, then recompute every stage from the inputs.

    Raises :class:`IncompleteBundle` when the manifest or a listed file is
    missing; every other problem comes back as a failed :class:`VerifyReport`.
    """
    files = dict(bundle) if isinstance(bundle, dict) else read_bundle(bundle)
    raw = files.get("manifest.json")
    if raw is None:
        raise IncompleteBundle("manifest.json is missing")

    # 1. the manifest itself
    try:
        doc = json.loads(raw)
    except (ValueError, UnicodeDecodeError) as exc:
        return VerifyReport(False, "manifest", "manifest.json", f"not JSON: {exc}")
    if not isinstance(doc, dict) or canonical_json(doc) != raw:
        return VerifyReport(False, "manifest", "manifest.json", "not canonical JSON")
    body = {k: v for k, v in doc.items() if k != "manifest_digest"}
    if doc.get("manifest_digest") != hashlib.sha256(canonical_json(body)).hexdigest():
        return VerifyReport(False, "manifest", "manifest.json", "self-digest mismatch")
    listed = doc.get("files")
    if doc.get("format") != BUNDLE_FORMAT or not isinstance(listed, dict):
        return VerifyReport(False, "manifest", "manifest.json", "unknown bundle format")

    # 2. file set and digests
    missing = sorted(set(listed) - set(files))
    if missing:
        raise IncompleteBundle(f"missing files: {', '.join(missing)}")
    for rel in sorted(set(files) - set(listed) - {"manifest.json"}):
        return VerifyReport(False, stage_of(rel), rel, "file not listed in the manifest")
    for rel in sorted(listed):
        if hashlib.sha256(files[rel]).hexdigest() != listed[rel]:
            return VerifyReport(False, stage_of(rel), rel, "sha256 differs from the manifest")

    # 3. recompute from inputs
    needed = set(input_files(CaseInputs(GraphSnapshot(0, (), {}, {}), TrustConfig({}), PipelineConfig(), (), ()), {}, ""))
    absent = sorted(needed - set(files))
    if absent:
        raise IncompleteBundle(f"missing inputs: {', '.join(absent)}")
    try:
        inputs, settings, policy_text = _decode_inputs(files)
    except Exception as exc:  # noqa: BLE001 - any decode failure is a divergence at the inputs
        return VerifyReport(False, "inputs", None, f"inputs do not decode: {exc}")
    if input_files(inputs, settings, policy_text) != {k: files[k] for k in needed}:
        return VerifyReport(False, "inputs", None, "inputs do not re-encode to the same bytes")
    try:
        derived, summary = _derive(inputs, settings, policy_text)
    except Exception as exc:  # noqa: BLE001
        return VerifyReport(False, "inputs", None, f"recomputation failed: {type(exc).__name__}: {exc}")
    for rel in _CHECK_ORDER:
        if files.get(rel) != derived[rel]:
            return VerifyReport(False, stage_of(rel), rel, "recomputed bytes differ")

    # 4. independent checks on the proofs and the policy epochs
    report = summary["run"].report
    proofs = codec.load_lines(files["proofs.lines"].decode().splitlines())
    if len(proofs) != len(report.entries):
        return VerifyReport(False, "proofs", "proofs.lines", "one proof per report entry expected")
    for entry, proof in zip(report.entries, proofs):
        if not isinstance(proof, MerkleProof) or proof.value != codec.encode(entry) or not verify_proof(report.root, proof):
            return VerifyReport(False, "proofs", "proofs.lines", f"proof for {entry.proposal_id} does not verify")
    engine = summary["engine"]
    worlds = codec.load_lines(files["policy/worlds.lines"].decode().splitlines())
    try:
        for manifest, world in zip(engine.manifests, worlds):
            engine.replay(manifest, world, list(engine.policies.values()))
    except ReplayMismatch as exc:
        return VerifyReport(False, "policy", "policy/manifests.lines", str(exc))

    # 5. the manifest summary matches the recomputation
    command = doc.get("command", [])
    if not isinstance(command, list) or _manifest({k: files[k] for k in listed}, summary, settings, command) != raw:
        return VerifyReport(False, "manifest", "manifest.json", "summary fields differ from the recomputation")
    return VerifyReport(True)


def load_case_scenario(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
