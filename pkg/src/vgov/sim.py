"""Discrete-event simulator of a bonded operator service.

Operators are assigned to tasks, compute the task with the real modules,
and submit signed result roots. Settlement accepts a root once a threshold
of assigned operators agree on it by the deadline, pays those operators,
and slashes everyone else. A challenge window after settlement lets anyone
dispute with a recomputed root.

Time is an integer tick. The world is single-threaded; event order within
a tick is fixed by (operator id, task id).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from vgov import codec
from vgov.attestation import Keypair, verify_signature
from vgov.fixed import ONE, ZERO, Fixed, apportion, as_fixed
from vgov.merkle import EMPTY_ROOT, MerkleTree

TASK_KINDS = ("trust-score", "delegation-resolve", "pipeline-run", "policy-eval")
TRUST_MODES = ("economic", "tee-attested", "hybrid")
BEHAVIORS = ("honest", "crash", "equivocate", "tamper", "laggard")
ACCEPTED = "accepted"
NO_QUORUM = "rejected-no-quorum"
MAX_LAG = 1000


class SimError(Exception):
    pass


class BadQuorum(SimError):
    pass


class DeadlinePassed(SimError):
    pass


class UnknownInputDigest(SimError):
    pass


class NotYetDue(SimError):
    pass


class AlreadySettled(SimError):
    pass


class WindowClosed(SimError):
    pass


class NoSuchTask(SimError):
    pass


class NotDisputable(SimError):
    pass


class InsufficientFunds(SimError):
    pass


# records --------------------------------------------------------------------


@codec.record("OperatorProfile")
@dataclass(frozen=True)
class OperatorProfile:
    operator_id: str
    public_key: bytes
    bond: Fixed
    mode: str = "economic"
    behavior: str = "honest"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.bond <= ZERO:
            raise ValueError(f"operator {self.operator_id}: bond must be positive")
        if self.mode not in TRUST_MODES:
            raise ValueError(f"operator {self.operator_id}: unknown trust mode {self.mode!r}")
        if self.behavior not in BEHAVIORS:
            raise ValueError(f"operator {self.operator_id}: unknown behavior {self.behavior!r}")
        allowed = {"tamper": {"tamper_seed"}, "equivocate": {"tamper_seed"}, "laggard": {"lag"}}.get(self.behavior, set())
        extra = set(self.params) - allowed
        if extra:
            raise ValueError(f"operator {self.operator_id}: unexpected params {sorted(extra)}")
        lag = self.params.get("lag", 1)
        if type(lag) is not int or not 1 <= lag <= MAX_LAG:
            raise ValueError(f"operator {self.operator_id}: lag must be an int in [1, {MAX_LAG}]")
        seed = self.params.get("tamper_seed", 0)
        if type(seed) is not int or seed < 0:
            raise ValueError(f"operator {self.operator_id}: tamper_seed must be a non-negative int")


@codec.record("TaskRecord")
@dataclass(frozen=True)
class TaskRecord:
    kind: str
    inputs: tuple  # pinned input digests, in the order the kind expects
    threshold: int
    total: int
    deadline: int
    reward: Fixed = ZERO
    slash_fraction: Fixed = ONE
    challenge_window: int = 2
    nonce: int = 0

    @property
    def task_id(self) -> bytes:
        return codec.digest(self)


@codec.record("ResultSubmission")
@dataclass(frozen=True)
class ResultSubmission:
    task_id: bytes
    operator_id: str
    root: bytes
    tag: bytes | None
    submitted_at: int
    signature: bytes = b""

    def body(self) -> dict:
        return {
            "domain": "submission",
            "task_id": self.task_id,
            "operator_id": self.operator_id,
            "root": self.root,
            "tag": self.tag,
            "submitted_at": self.submitted_at,
        }


@codec.record("Dispute")
@dataclass(frozen=True)
class Dispute:
    task_id: bytes
    challenger: str
    evidence: bytes
    bond: Fixed
    filed_at: int
    upheld: bool


@codec.record("SettlementOutcome")
@dataclass(frozen=True)
class SettlementOutcome:
    task_id: bytes
    status: str
    root: bytes | None
    paid: dict  # operator -> reward share
    slashed: dict  # operator -> amount
    reasons: dict  # operator -> why it was slashed
    window: tuple  # (open tick, close tick)
    disputes: tuple = ()
    reversed: bool = False


@codec.record("SimEvent")
@dataclass(frozen=True)
class SimEvent:
    tick: int
    seq: int
    kind: str
    task_id: bytes | None
    operator_id: str | None
    data: dict


# honest execution -----------------------------------------------------------


def score_root(table) -> bytes:
    """Merkle root over identity -> canonical Fixed trust score."""
    if not table.scores:
        return EMPTY_ROOT
    return MerkleTree([(i, codec.encode(s)) for i, s in table.scores.items()]).root


def _exec_trust(snapshot, config) -> bytes:
    from vgov.trust import compute_trust_scores

    return score_root(compute_trust_scores(snapshot, config))


def _exec_delegation(snapshot, delegations, proposal) -> bytes:
    from vgov.delegation import resolve

    return resolve(snapshot, list(delegations), proposal).root


def _exec_pipeline(snapshot, trust_config, ballots, proposals, config) -> bytes:
    from vgov.pipeline import run_pipeline
    from vgov.trust import compute_trust_scores

    trust = compute_trust_scores(snapshot, trust_config)
    return run_pipeline(ballots, snapshot, trust, proposals, config).report.root


def _exec_policy(policy, observation) -> bytes:
    from vgov.policy import evaluation_root

    return evaluation_root(policy, observation)


EXECUTORS: dict[str, Callable[..., bytes]] = {
    "trust-score": _exec_trust,
    "delegation-resolve": _exec_delegation,
    "pipeline-run": _exec_pipeline,
    "policy-eval": _exec_policy,
}


def input_digest(obj) -> bytes:
    d = getattr(obj, "digest", None)
    return d if isinstance(d, bytes) else codec.digest(obj)


# behaviours -----------------------------------------------------------------


def tamper(root: bytes, tamper_seed: int, task_id: bytes) -> bytes:
    """Flip one byte of ``root``, chosen deterministically from the seed and task."""
    h = hashlib.sha256(b"tamper" + tamper_seed.to_bytes(8, "big") + task_id).digest()
    pos = h[0] % len(root)
    mask = h[1] | 1
    return root[:pos] + bytes([root[pos] ^ mask]) + root[pos + 1:]


def tee_tag(public_key: bytes, task_id: bytes, root: bytes) -> bytes:
    """Stand-in for an enclave quote binding the key, task and output."""
    return hashlib.sha256(b"tee-quote" + public_key + task_id + root).digest()


# world ----------------------------------------------------------------------


@dataclass
class TaskState:
    task: TaskRecord
    registered_at: int
    operators: tuple
    submissions: dict = field(default_factory=dict)  # operator -> ResultSubmission
    equivocators: set = field(default_factory=set)
    outcome: SettlementOutcome | None = None
    honest_root: bytes | None = None


class World:
    """Mutable simulator state. All value moves go through the account maps."""

    def __init__(self, seed: int = 0, treasury: Fixed = ZERO, shared_execution: bool = True):
        self.seed = seed
        self.tick = 0
        self.treasury = treasury
        self.operators: dict[str, OperatorProfile] = {}
        self.keys: dict[str, Keypair] = {}
        self.bonds: dict[str, Fixed] = {}
        self.payouts: dict[str, Fixed] = {}
        self.accounts: dict[str, Fixed] = {}  # outside parties (challengers)
        self.escrow: dict[bytes, Fixed] = {}
        self.slashed_pool = ZERO
        self.inputs: dict[bytes, object] = {}
        self.tasks: dict[bytes, TaskState] = {}
        self.events: list[SimEvent] = []
        self.fallback = False
        self.shared_execution = shared_execution
        self._honest_cache: dict[bytes, bytes] = {}
        self.scenario_tasks: list[bytes] = []
        self.scenario_disputes: list[dict] = []

    # setup ------------------------------------------------------------
    def add_operator(self, operator_id: str, bond: Fixed, mode: str = "economic", behavior: str = "honest", params: dict | None = None) -> OperatorProfile:
        key = Keypair.from_seed(f"{self.seed}:operator:{operator_id}")
        prof = OperatorProfile(operator_id, key.public_key, bond, mode, behavior, dict(params or {}))
        if operator_id in self.operators:
            raise SimError(f"operator {operator_id} already registered")
        self.operators[operator_id] = prof
        self.keys[operator_id] = key
        self.bonds[operator_id] = bond
        self.payouts[operator_id] = ZERO
        self._log("operator-registered", None, operator_id, {"bond": bond, "mode": mode, "behavior": behavior})
        return prof

    def fund(self, account: str, amount: Fixed) -> None:
        self.accounts[account] = self.accounts.get(account, ZERO) + amount

    def pin(self, obj) -> bytes:
        d = input_digest(obj)
        self.inputs[d] = obj
        return d

    def total_value(self) -> Fixed:
        parts = [self.treasury, self.slashed_pool]
        parts += [self.bonds[k] for k in sorted(self.bonds)]
        parts += [self.payouts[k] for k in sorted(self.payouts)]
        parts += [self.accounts[k] for k in sorted(self.accounts)]
        parts += [self.escrow[k] for k in sorted(self.escrow)]
        return sum(parts, ZERO)

    def _log(self, kind: str, task_id, operator_id, data: dict) -> SimEvent:
        ev = SimEvent(self.tick, len(self.events), kind, task_id, operator_id, data)
        self.events.append(ev)
        return ev

    # honest computation -----------------------------------------------
    def honest_root(self, task: TaskRecord) -> bytes:
        tid = task.task_id
        if self.shared_execution and tid in self._honest_cache:
            return self._honest_cache[tid]
        args = [self.inputs[d] for d in task.inputs]
        root = EXECUTORS[task.kind](*args)
        self._honest_cache[tid] = root
        return root

    def _compute(self, op: OperatorProfile, task: TaskRecord) -> bytes:
        if self.shared_execution:
            return self.honest_root(task)
        args = [self.inputs[d] for d in task.inputs]
        return EXECUTORS[task.kind](*args)


def register_task(world: World, task: TaskRecord) -> bytes:
    """Schedule ``task``; re-registering an identical record returns the same id."""
    tid = task.task_id
    if tid in world.tasks:
        return tid
    if task.kind not in TASK_KINDS:
        raise SimError(f"unknown task kind {task.kind!r}")
    eligible = sorted(o for o, b in world.bonds.items() if b > ZERO)
    if not (1 <= task.threshold <= task.total <= len(eligible)):
        raise BadQuorum(f"quorum ({task.threshold},{task.total}) with {len(eligible)} eligible operators")
    if task.deadline <= world.tick:
        raise DeadlinePassed(f"deadline {task.deadline} is not after tick {world.tick}")
    missing = [d.hex() for d in task.inputs if d not in world.inputs]
    if missing:
        raise UnknownInputDigest(f"inputs not pinned: {missing}")
    if not ZERO <= task.slash_fraction <= ONE:
        raise SimError("slash fraction must be in [0, 1]")
    if task.reward < ZERO or task.reward > world.treasury:
        raise InsufficientFunds(f"treasury cannot cover reward {task.reward}")
    if task.challenge_window < 0:
        raise SimError("challenge window must be non-negative")

    # seeded shuffle: rank eligible operators by a hash of (seed, task, operator)
    def rank(op):
        return hashlib.sha256(world.seed.to_bytes(8, "big", signed=True) + tid + op.encode()).digest()

    chosen = tuple(sorted(sorted(eligible, key=rank)[: task.total]))
    world.treasury -= task.reward
    world.escrow[tid] = task.reward
    world.tasks[tid] = TaskState(task, world.tick, chosen)
    world._log("task-registered", tid, None, {"kind": task.kind, "operators": list(chosen), "deadline": task.deadline})
    return tid


def make_submission(world: World, operator_id: str, task_id: bytes, root: bytes) -> ResultSubmission:
    prof = world.operators[operator_id]
    tag = tee_tag(prof.public_key, task_id, root) if prof.mode != "economic" else None
    sub = ResultSubmission(task_id, operator_id, root, tag, world.tick)
    return replace(sub, signature=world.keys[operator_id].sign(codec.encode(sub.body())))


def receive_submission(world: World, sub: ResultSubmission) -> bool:
    """Apply the acceptance rules for one submission; rejects become events."""
    st = world.tasks.get(sub.task_id)

    def reject(reason):
        world._log("submission-rejected", sub.task_id, sub.operator_id, {"reason": reason, "root": sub.root})
        return False

    if st is None:
        return reject("unknown task")
    prof = world.operators.get(sub.operator_id)
    if prof is None or sub.operator_id not in st.operators:
        return reject("operator not assigned")
    if not verify_signature(prof.public_key, sub.signature, codec.encode(sub.body())):
        return reject("bad signature")
    if prof.mode != "economic" and sub.tag != tee_tag(prof.public_key, sub.task_id, sub.root):
        return reject("bad attestation tag")
    prev = st.submissions.get(sub.operator_id)
    if prev is not None:
        if prev.root != sub.root:
            st.equivocators.add(sub.operator_id)
            return reject("equivocation")
        return reject("duplicate")
    st.submissions[sub.operator_id] = sub
    late = sub.submitted_at > st.task.deadline
    world._log("submission", sub.task_id, sub.operator_id, {"root": sub.root, "late": late})
    return True


def _operator_actions(world: World, st: TaskState, op_id: str) -> list[bytes]:
    """Roots this operator sends at the current tick."""
    prof = world.operators[op_id]
    due = st.registered_at + 1
    if prof.behavior == "laggard":
        due = st.task.deadline + prof.params.get("lag", 1)
    if world.tick != due or prof.behavior == "crash":
        return []
    root = world._compute(prof, st.task)
    tid = st.task.task_id
    seed = prof.params.get("tamper_seed", int.from_bytes(hashlib.sha256(op_id.encode()).digest()[:4], "big"))
    if prof.behavior == "tamper" and prof.mode == "economic":
        return [tamper(root, seed, tid)]
    if prof.behavior == "equivocate":
        return [root, tamper(root, seed, tid)]
    return [root]


def step(world: World) -> list[SimEvent]:
    """Advance one tick: deliver due submissions, then settle tasks at their deadline."""
    world.tick += 1
    start = len(world.events)
    work = []
    for tid, st in world.tasks.items():
        for op in st.operators:
            work.append((op, tid))
    for op, tid in sorted(work):
        st = world.tasks[tid]
        for root in _operator_actions(world, st, op):
            receive_submission(world, make_submission(world, op, tid, root))
    for tid in sorted(world.tasks):
        st = world.tasks[tid]
        if st.outcome is None and world.tick >= st.task.deadline:
            settle(world, tid)
    return world.events[start:]


def _slash(world: World, st: TaskState, ops) -> dict:
    out = {}
    for op in sorted(ops):
        amount = world.bonds[op] * st.task.slash_fraction
        world.bonds[op] -= amount
        world.slashed_pool += amount
        out[op] = amount
    return out


def _pay(world: World, tid: bytes, ops) -> dict:
    ops = sorted(ops)
    if not ops:
        return {}
    shares = apportion(dict.fromkeys(ops, 1), world.escrow[tid].raw)
    out = {}
    for op in ops:
        amount = Fixed(shares[op])
        world.payouts[op] += amount
        world.escrow[tid] -= amount
        out[op] = amount
    return out


def _classify(st: TaskState):
    timely = {
        op: s.root
        for op, s in st.submissions.items()
        if s.submitted_at <= st.task.deadline and op not in st.equivocators
    }
    absent = [op for op in st.operators if op not in timely and op not in st.equivocators]
    return timely, absent


def _apply(world: World, st: TaskState, canonical: bytes | None) -> tuple[dict, dict, dict]:
    tid = st.task.task_id
    timely, absent = _classify(st)
    reasons = {op: "equivocation" for op in st.equivocators}
    reasons.update({op: "absent" for op in absent})
    if canonical is None:
        world.treasury += world.escrow[tid]
        world.escrow[tid] = ZERO
        return {}, _slash(world, st, reasons), reasons
    matching = [op for op, r in timely.items() if r == canonical]
    reasons.update({op: "divergent" for op, r in timely.items() if r != canonical})
    paid = _pay(world, tid, matching)
    return paid, _slash(world, st, reasons), reasons


def settle(world: World, task_id: bytes) -> SettlementOutcome:
    st = world.tasks.get(task_id)
    if st is None:
        raise NoSuchTask(task_id.hex())
    if st.outcome is not None:
        raise AlreadySettled(task_id.hex())
    if world.tick < st.task.deadline:
        raise NotYetDue(f"deadline {st.task.deadline}, now {world.tick}")
    timely, _ = _classify(st)
    counts: dict[bytes, int] = {}
    for r in timely.values():
        counts[r] = counts.get(r, 0) + 1
    canonical = None
    if counts:
        best = min(counts, key=lambda r: (-counts[r], r))
        if counts[best] >= st.task.threshold:
            canonical = best
    paid, slashed, reasons = _apply(world, st, canonical)
    status = ACCEPTED if canonical is not None else NO_QUORUM
    if canonical is None:
        world.fallback = True
    window = (world.tick, world.tick + st.task.challenge_window)
    st.outcome = SettlementOutcome(task_id, status, canonical, paid, slashed, reasons, window)
    world._log("settled", task_id, None, {
        "status": status, "root": canonical, "paid": sorted(paid), "slashed": slashed, "fallback": canonical is None,
    })
    return st.outcome


def open_dispute(world: World, task_id: bytes, challenger: str, evidence: bytes, bond: Fixed) -> Dispute:
    """Challenge a settled root with a recomputed one.

    The simulator recomputes the task honestly. If the evidence matches that
    and the settled root does not, the settlement is reversed; otherwise the
    challenger's bond is forfeited.
    """
    st = world.tasks.get(task_id)
    if st is None:
        raise NoSuchTask(task_id.hex())
    out = st.outcome
    if out is None or out.status != ACCEPTED:
        raise NotDisputable("only accepted settlements can be disputed")
    if world.tick > out.window[1]:
        raise WindowClosed(f"window closed at tick {out.window[1]}")
    if world.accounts.get(challenger, ZERO) < bond:
        raise InsufficientFunds(f"{challenger} cannot post bond {bond}")
    honest = world.honest_root(st.task)
    upheld = evidence == honest and out.root != honest
    dispute = Dispute(task_id, challenger, evidence, bond, world.tick, upheld)
    if upheld:
        # unwind payouts and slashes, then settle on the honest root
        for op, amt in out.paid.items():
            world.payouts[op] -= amt
            world.escrow[task_id] += amt
        for op, amt in out.slashed.items():
            world.bonds[op] += amt
            world.slashed_pool -= amt
        paid, slashed, reasons = _apply(world, st, honest)
        st.outcome = replace(out, root=honest, paid=paid, slashed=slashed, reasons=reasons,
                             disputes=out.disputes + (dispute,), reversed=True)
    else:
        world.accounts[challenger] -= bond
        world.slashed_pool += bond
        st.outcome = replace(out, disputes=out.disputes + (dispute,))
    world._log("dispute", task_id, None, {"challenger": challenger, "upheld": upheld, "root": st.outcome.root})
    return dispute


def pending(world: World) -> bool:
    """True while any task is unsettled or still expects a late submission."""
    for st in world.tasks.values():
        if st.outcome is None:
            return True
        for op in st.operators:
            prof = world.operators[op]
            if prof.behavior == "laggard" and world.tick < st.task.deadline + prof.params.get("lag", 1):
                return True
    return False


def run(world: World, max_ticks: int = 10_000) -> list[SimEvent]:
    start = len(world.events)
    for _ in range(max_ticks):
        if not pending(world):
            break
        step(world)
    return world.events[start:]


def dump_events(events, path) -> None:
    with open(path, "w") as fh:
        codec.dump_lines(events, fh)


# scenario files -------------------------------------------------------------


def _load_input(spec: dict, base: Path):
    from vgov import demo
    from vgov.attestation import import_snapshot
    from vgov.delegation import DelegationRecord, ProposalRef
    from vgov.trust import TrustConfig

    kind = spec.get("type")
    if kind == "snapshot":
        return import_snapshot(base / spec["path"])
    if kind == "demo-snapshot":
        return demo.demo_snapshot(spec.get("identities", 20), spec.get("seed", 0))
    if kind == "trust-config":
        seeds = {bytes.fromhex(k): as_fixed(v) for k, v in spec["seeds"].items()}
        return TrustConfig(seeds, hop_limit=spec.get("hop_limit", 3))
    if kind == "demo-trust-config":
        return demo.demo_trust_config(spec.get("identities", 20), spec.get("seed", 0))
    if kind == "delegations":
        with open(base / spec["path"]) as fh:
            recs = codec.load_lines(fh)
        if not all(isinstance(r, DelegationRecord) for r in recs):
            raise SimError("delegation file must hold DelegationRecord lines")
        return tuple(recs)
    if kind == "demo-delegations":
        return demo.demo_delegations(spec.get("identities", 20), spec.get("seed", 0))
    if kind == "proposal":
        return ProposalRef(spec["id"], spec.get("topic", "global"))
    if kind == "canonical":
        return codec.decode((base / spec["path"]).read_bytes())
    raise SimError(f"unknown input type {kind!r}")


def load_scenario(path: str | Path, seed: int | None = None) -> World:
    """Build a world from a JSON scenario.

    ``{"seed", "treasury", "operators": [...], "inputs": {name: spec},
    "tasks": [{"kind", "inputs": [names], "quorum": [t, n], "deadline", ...}],
    "accounts": {name: amount}, "disputes": [...]}``
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    world = World(seed if seed is not None else doc.get("seed", 0), as_fixed(doc.get("treasury", "0")),
                  shared_execution=doc.get("shared_execution", True))
    for op in doc.get("operators", []):
        world.add_operator(op["id"], as_fixed(op["bond"]), op.get("mode", "economic"), op.get("behavior", "honest"), op.get("params", {}))
    for name, amt in sorted(doc.get("accounts", {}).items()):
        world.fund(name, as_fixed(amt))
    names = {name: world.pin(_load_input(spec, path.parent)) for name, spec in sorted(doc.get("inputs", {}).items())}
    for t in doc.get("tasks", []):
        threshold, total = t["quorum"]
        rec = TaskRecord(
            kind=t["kind"],
            inputs=tuple(names[n] for n in t["inputs"]),
            threshold=threshold,
            total=total,
            deadline=t.get("deadline", 2),
            reward=as_fixed(t.get("reward", "0")),
            slash_fraction=as_fixed(t.get("slash_fraction", "1")),
            challenge_window=t.get("challenge_window", 2),
            nonce=t.get("nonce", 0),
        )
        world.scenario_tasks.append(register_task(world, rec))
    world.scenario_disputes = doc.get("disputes", [])
    return world


def run_scenario(path: str | Path, seed: int | None = None, max_ticks: int = 10_000) -> World:
    world = load_scenario(path, seed)
    return run_with_disputes(world, world.scenario_disputes, max_ticks)


def run_with_disputes(world: World, disputes: list[dict], max_ticks: int = 10_000) -> World:
    """Run to quiescence, filing each dispute at its tick; ``task`` indexes ``scenario_tasks``."""
    disputes = sorted(disputes, key=lambda d: (d["tick"], d["task"]))
    for d in disputes:
        while world.tick < d["tick"]:
            step(world)
        tid = world.scenario_tasks[d["task"]]
        evidence = bytes.fromhex(d["evidence"]) if "evidence" in d else world.honest_root(world.tasks[tid].task)
        try:
            open_dispute(world, tid, d["challenger"], evidence, as_fixed(d["bond"]))
        except SimError as exc:
            world._log("dispute-rejected", tid, None, {"challenger": d["challenger"], "reason": type(exc).__name__})
    run(world, max_ticks)
    return world
