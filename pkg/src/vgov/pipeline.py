"""Deterministic four-stage preference pipeline.

validate -> weights -> aggregate -> report. Every stage output is a
canonical value whose digest lands in the audit trail; inputs are sorted by
canonical bytes before any work, so input order and worker count never
change a digest.
"""

from __future__ import annotations

import hashlib
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from math import isqrt
from typing import Iterable, Sequence

from vgov import codec
from vgov.attestation import GraphSnapshot, Keypair, verify_signature
from vgov.fixed import (
    ONE,
    SCALE,
    ZERO,
    Fixed,
    div_round_half_even,
    normalize,
    pairwise_sum,
)
from vgov.merkle import EMPTY_ROOT, MerkleTree
from vgov.proposal import Proposal
from vgov.scorer import LexicalScorer, Scorer
from vgov.trust import SnapshotMismatch, TrustScoreTable

ABSTAIN = "abstain"
KINDS = ("rubric", "ranking", "quadratic", "allocation", "conditional")
PREDICATES = {"flag": ("name",), "at_most": ("key", "value"), "at_least": ("key", "value")}
Z_95 = Fixed(1_960_000_000)

# rejection codes
BAD_SIGNATURE = "BAD_SIGNATURE"
INELIGIBLE = "INELIGIBLE"
MALFORMED = "MALFORMED"
OVERSPEND = "OVERSPEND"
UNKNOWN_CONTEST = "UNKNOWN_CONTEST"
SUPERSEDED = "SUPERSEDED"


class PipelineError(Exception):
    pass


class NoBallots(PipelineError):
    pass


class DimensionMismatch(PipelineError):
    pass


class SpreadExceeded(PipelineError):
    def __init__(self, offending: list[tuple[int, Fixed]]):
        self.offending = offending
        detail = ", ".join(f"coord {i}: spread {s}" for i, s in offending)
        super().__init__(f"operator outputs disagree beyond tolerance ({detail})")


# records --------------------------------------------------------------------


@codec.record("Ballot")
@dataclass(frozen=True)
class Ballot:
    voter: bytes
    kind: str
    contest: str
    body: dict
    issued_at: int = 0
    signature: bytes = b""

    def unsigned(self) -> dict:
        return {
            "domain": "ballot",
            "voter": self.voter,
            "kind": self.kind,
            "contest": self.contest,
            "body": self.body,
            "issued_at": self.issued_at,
        }

    @property
    def uid(self) -> bytes:
        return hashlib.sha256(codec.encode(self.unsigned())).digest()


def make_ballot(signer: Keypair, kind: str, contest: str, body: dict, issued_at: int = 0) -> Ballot:
    b = Ballot(signer.id, kind, contest, body, issued_at)
    return Ballot(signer.id, kind, contest, body, issued_at, signer.sign(codec.encode(b.unsigned())))


@codec.record("CastBallot")
@dataclass(frozen=True)
class CastBallot:
    """A ballot that passed validation, with its body normalized."""

    uid: bytes
    voter: bytes
    kind: str
    contest: str
    body: dict
    issued_at: int


@codec.record("Rejection")
@dataclass(frozen=True)
class Rejection:
    uid: bytes
    voter: bytes
    code: str
    detail: str


@codec.record("ValidationResult")
@dataclass(frozen=True)
class ValidationResult:
    accepted: tuple  # CastBallot sorted by uid
    rejections: tuple  # Rejection sorted by (uid, code)


@codec.record("PipelineConfig")
@dataclass(frozen=True)
class PipelineConfig:
    criteria: tuple = ("feasibility", "impact", "alignment", "risk")
    criterion_weights: dict = field(default_factory=dict)  # empty = equal weights
    mix: tuple = (Fixed(0), Fixed(SCALE), Fixed(0))  # token, trust, expertise
    domain_schema: str | None = None
    quadratic_budget: int = 100
    contests: dict = field(default_factory=dict)  # contest id -> options tuple
    context: dict = field(default_factory=dict)
    funding_threshold: Fixed = Fixed(600_000_000)
    cluster_by_tags: bool = True
    seed: int = 0
    themes: dict = field(default_factory=dict)

    def weights_for_criteria(self) -> dict[str, Fixed]:
        if self.criterion_weights:
            return {c: self.criterion_weights.get(c, ZERO) for c in self.criteria}
        return {c: ONE for c in self.criteria}

    def scorer(self) -> LexicalScorer:
        return LexicalScorer(themes=self.themes)


@codec.record("RubricResult")
@dataclass(frozen=True)
class RubricResult:
    proposal_id: str
    means: dict  # criterion -> Fixed | None
    overall: Fixed | None
    ci: tuple | None  # (lo, hi)
    voters: int


@codec.record("IRVResult")
@dataclass(frozen=True)
class IRVResult:
    contest: str
    winner: str | None
    rounds: tuple  # ({"round", "tallies", "eliminated"}, ...)


@codec.record("AggregateResult")
@dataclass(frozen=True)
class AggregateResult:
    rubrics: dict
    rankings: dict
    quadratic: dict
    allocations: dict
    themes: dict


@codec.record("PriorityEntry")
@dataclass(frozen=True)
class PriorityEntry:
    proposal_id: str
    rank: int
    score: Fixed | None
    ci: tuple | None
    cluster: str
    ready: bool
    themes: tuple


@codec.record("PriorityReport")
@dataclass(frozen=True)
class PriorityReport:
    entries: tuple
    clusters: tuple
    root: bytes = EMPTY_ROOT

    def proof_tree(self) -> MerkleTree | None:
        if not self.entries:
            return None
        return MerkleTree(report_leaves(self.entries))

    def to_markdown(self) -> str:
        lines = [
            "| rank | proposal | score | 95% CI | cluster | ready |",
            "|---:|---|---:|---|---|:---:|",
        ]
        for e in self.entries:
            score = "n/a" if e.score is None else f"{float(e.score):.4f}"
            ci = "n/a" if e.ci is None else f"[{float(e.ci[0]):.3f}, {float(e.ci[1]):.3f}]"
            lines.append(f"| {e.rank} | {e.proposal_id} | {score} | {ci} | {e.cluster} | {'yes' if e.ready else 'no'} |")
        lines.append("")
        lines.append(f"root: `{self.root.hex()}`")
        return "\n".join(lines) + "\n"


@codec.record("AuditEntry")
@dataclass(frozen=True)
class AuditEntry:
    stage: str
    input_digest: bytes
    output_digest: bytes
    note: dict = field(default_factory=dict)


@codec.record("PipelineRun")
@dataclass(frozen=True)
class PipelineRun:
    run_id: bytes
    snapshot_id: int
    stages: tuple  # ((stage, output digest), ...)
    audit: tuple  # AuditEntry
    report: PriorityReport
    outputs: dict  # stage -> output value

    def stage_digest(self, stage: str) -> bytes:
        return dict(self.stages)[stage]


# stage 1: validation --------------------------------------------------------


class _Reject(Exception):
    def __init__(self, code: str, detail: str):
        self.code = code
        self.detail = detail


def _fixed_unit(v, what: str) -> Fixed:
    if not isinstance(v, Fixed) or not (ZERO <= v <= ONE):
        raise _Reject(MALFORMED, f"{what} must be a fixed value in [0, 1]")
    return v


def _options(config: PipelineConfig, contest: str) -> tuple:
    opts = config.contests.get(contest)
    if opts is None:
        raise _Reject(UNKNOWN_CONTEST, f"no contest {contest!r}")
    return tuple(opts)


def _check_body(kind, contest, body, config: PipelineConfig, proposal_ids) -> dict:
    if not isinstance(body, dict):
        raise _Reject(MALFORMED, "body must be a map")
    if kind == "rubric":
        if contest not in proposal_ids:
            raise _Reject(UNKNOWN_CONTEST, f"no proposal {contest!r}")
        if set(body) != {"scores"} or not isinstance(body["scores"], dict):
            raise _Reject(MALFORMED, "rubric body is {scores: map}")
        scores = body["scores"]
        unknown = [c for c in scores if c not in config.criteria]
        if unknown:
            raise _Reject(MALFORMED, f"unknown criteria {sorted(map(repr, unknown))}")
        out = {}
        for c in config.criteria:
            v = scores.get(c, ABSTAIN)
            out[c] = ABSTAIN if v == ABSTAIN else _fixed_unit(v, f"score {c}")
        if all(v == ABSTAIN for v in out.values()):
            raise _Reject(MALFORMED, "rubric abstains on every criterion")
        return {"scores": out}
    if kind == "ranking":
        opts = _options(config, contest)
        ranking = body.get("ranking") if set(body) == {"ranking"} else None
        if not isinstance(ranking, (list, tuple)) or not ranking:
            raise _Reject(MALFORMED, "ranking body is {ranking: non-empty list}")
        if any(not isinstance(o, str) or o not in opts for o in ranking):
            raise _Reject(MALFORMED, "ranking lists an unknown option")
        if len(set(ranking)) != len(ranking):
            raise _Reject(MALFORMED, "ranking repeats an option")
        return {"ranking": tuple(ranking)}
    if kind == "quadratic":
        opts = _options(config, contest)
        votes = body.get("votes") if set(body) == {"votes"} else None
        if not isinstance(votes, dict) or not votes:
            raise _Reject(MALFORMED, "quadratic body is {votes: map}")
        for o, v in votes.items():
            if not isinstance(o, str) or o not in opts or type(v) is not int:
                raise _Reject(MALFORMED, "quadratic votes map options to integers")
        cost = sum(v * v for v in votes.values())
        if cost > config.quadratic_budget:
            raise _Reject(OVERSPEND, f"cost {cost} exceeds budget {config.quadratic_budget}")
        return {"votes": dict(votes)}
    if kind == "allocation":
        opts = _options(config, contest)
        fr = body.get("fractions") if set(body) == {"fractions"} else None
        if not isinstance(fr, dict) or not fr:
            raise _Reject(MALFORMED, "allocation body is {fractions: map}")
        for o, v in fr.items():
            if not isinstance(o, str) or o not in opts:
                raise _Reject(MALFORMED, "allocation names an unknown option")
            _fixed_unit(v, "fraction")
        if pairwise_sum([fr[k] for k in sorted(fr)]) > ONE:
            raise _Reject(MALFORMED, "allocation fractions sum above 1")
        return {"fractions": dict(fr)}
    if kind == "conditional":
        if set(body) != {"predicate", "params", "kind", "body"}:
            raise _Reject(MALFORMED, "conditional body is {predicate, params, kind, body}")
        pred, params, inner_kind = body["predicate"], body["params"], body["kind"]
        if pred not in PREDICATES or not isinstance(params, dict):
            raise _Reject(MALFORMED, f"unknown predicate {pred!r}")
        if set(params) != set(PREDICATES[pred]):
            raise _Reject(MALFORMED, f"predicate {pred} takes {PREDICATES[pred]}")
        if not all(isinstance(params[k], str) for k in params if k != "value"):
            raise _Reject(MALFORMED, "predicate names must be strings")
        if "value" in params and not isinstance(params["value"], Fixed):
            raise _Reject(MALFORMED, "predicate value must be fixed")
        if inner_kind not in KINDS or inner_kind == "conditional":
            raise _Reject(MALFORMED, "conditional wraps a non-conditional ballot kind")
        inner = _check_body(inner_kind, contest, body["body"], config, proposal_ids)
        return {"predicate": pred, "params": dict(params), "kind": inner_kind, "body": inner}
    raise _Reject(MALFORMED, f"unknown ballot kind {kind!r}")


def _well_typed(b) -> bool:
    return (
        isinstance(b, Ballot)
        and isinstance(b.voter, bytes)
        and isinstance(b.kind, str)
        and isinstance(b.contest, str)
        and type(b.issued_at) is int
        and isinstance(b.signature, bytes)
    )


def validate_and_normalize(
    ballots: Iterable[Ballot],
    snapshot: GraphSnapshot,
    config: PipelineConfig,
    proposal_ids: Iterable[str] = (),
) -> ValidationResult:
    """Accept well-formed, signed, eligible ballots; every rejection carries a code."""
    proposal_ids = frozenset(proposal_ids)
    keyed = []
    for b in ballots:
        try:
            keyed.append((codec.encode(b), b))
        except (codec.CodecError, TypeError):
            keyed.append((b"", b))
    keyed.sort(key=lambda kb: kb[0])

    accepted: list[CastBallot] = []
    rejections: list[Rejection] = []
    for raw, b in keyed:
        voter = b.voter if isinstance(getattr(b, "voter", None), bytes) else b""
        if not raw or not _well_typed(b):
            rejections.append(Rejection(hashlib.sha256(raw).digest(), voter, MALFORMED, "not a well-typed ballot"))
            continue
        uid = b.uid
        key = snapshot.identities.get(b.voter)
        if key is None:
            rejections.append(Rejection(uid, voter, INELIGIBLE, "voter not in snapshot"))
            continue
        if not verify_signature(key, b.signature, codec.encode(b.unsigned())):
            rejections.append(Rejection(uid, voter, BAD_SIGNATURE, "signature does not verify"))
            continue
        try:
            body = _check_body(b.kind, b.contest, b.body, config, proposal_ids)
        except _Reject as r:
            rejections.append(Rejection(uid, voter, r.code, r.detail))
            continue
        except Exception as exc:  # noqa: BLE001 - any body that breaks a check is malformed
            rejections.append(Rejection(uid, voter, MALFORMED, f"{type(exc).__name__}"))
            continue
        accepted.append(CastBallot(uid, b.voter, b.kind, b.contest, body, b.issued_at))

    # one ballot per (voter, kind, contest): latest issued_at, ties to lowest uid
    best: dict[tuple, CastBallot] = {}
    for c in accepted:
        k = (c.voter, c.kind, c.contest)
        cur = best.get(k)
        if cur is None or (c.issued_at, -int.from_bytes(c.uid, "big")) > (cur.issued_at, -int.from_bytes(cur.uid, "big")):
            best[k] = c
    keep = {c.uid for c in best.values()}
    for c in accepted:
        if c.uid not in keep:
            rejections.append(Rejection(c.uid, c.voter, SUPERSEDED, "newer ballot from the same voter"))
    final = sorted((c for c in accepted if c.uid in keep), key=lambda c: c.uid)
    rejections.sort(key=lambda r: (r.uid, r.code))
    return ValidationResult(tuple(final), tuple(rejections))


def effective_ballots(ballots: Sequence[CastBallot], context: dict) -> list[CastBallot]:
    """Unwrap conditional ballots whose predicate holds; drop the rest."""
    out = []
    for b in ballots:
        if b.kind != "conditional":
            out.append(b)
        elif predicate_holds(b.body["predicate"], b.body["params"], context):
            out.append(CastBallot(b.uid, b.voter, b.body["kind"], b.contest, b.body["body"], b.issued_at))
    return out


def predicate_holds(pred: str, params: dict, context: dict) -> bool:
    if pred == "flag":
        return context.get(params["name"]) is True
    value = context.get(params["key"])
    if not isinstance(value, Fixed):
        return False
    if pred == "at_most":
        return value <= params["value"]
    if pred == "at_least":
        return value >= params["value"]
    return False


# stage 2: weights -----------------------------------------------------------


def compute_voter_weights(
    snapshot: GraphSnapshot,
    trust: TrustScoreTable,
    mix: tuple = (ZERO, ONE, ZERO),
    domain_schema: str | None = None,
) -> dict[bytes, Fixed]:
    """``w_t*balance_share + w_a*trust + w_e*expert_indicator``, normalized to one."""
    if trust.snapshot_digest != snapshot.digest:
        raise SnapshotMismatch("trust table was computed over a different snapshot")
    w_t, w_a, w_e = mix
    idents = sorted(snapshot.identities)
    shares = normalize({i: snapshot.balance(i) for i in idents})
    raw = {}
    for i in idents:
        expert = ONE if domain_schema is not None and snapshot.holds_schema(i, domain_schema) else ZERO
        raw[i] = w_t * shares[i] + w_a * trust.score(i) + w_e * expert
    return normalize(raw)


# stage 3: aggregation -------------------------------------------------------


def _weighted_mean_raw(pairs: list[tuple[int, int]]) -> int | None:
    total = sum(w for w, _ in pairs)
    if total <= 0:
        return None
    return div_round_half_even(sum(w * s for w, s in pairs), total)


def aggregate_rubric(
    proposal_id: str,
    ballots: Sequence[CastBallot],
    weights: dict,
    criteria: Sequence[str],
    criterion_weights: dict,
) -> RubricResult:
    """Weighted criterion means, their weighted overall, and a 1.96*SE interval."""
    rows = []
    for b in sorted(ballots, key=lambda b: b.uid):
        w = weights.get(b.voter, ZERO).raw
        if w > 0:
            rows.append((w, b.body["scores"]))
    if not rows:
        return RubricResult(proposal_id, {c: None for c in criteria}, None, None, 0)

    means: dict[str, Fixed | None] = {}
    for c in criteria:
        m = _weighted_mean_raw([(w, s[c].raw) for w, s in rows if s[c] != ABSTAIN])
        means[c] = None if m is None else Fixed(m)

    def dot(values: dict) -> int | None:
        present = [(criterion_weights[c].raw, v.raw) for c, v in values.items() if v is not None and v != ABSTAIN]
        return _weighted_mean_raw(present)

    overall_raw = dot(means)
    if overall_raw is None:
        return RubricResult(proposal_id, means, None, None, len(rows))

    per_voter = [(w, dot(s)) for w, s in rows]
    per_voter = [(w, v) for w, v in per_voter if v is not None]
    total_w = sum(w for w, _ in per_voter)
    centre = div_round_half_even(sum(w * v for w, v in per_voter), total_w)
    spread = sum(w * w * (v - centre) ** 2 for w, v in per_voter)
    se = Fixed(div_round_half_even(isqrt(spread), total_w))
    half = se * Z_95
    overall = Fixed(overall_raw)
    ci = ((overall - half).clamp(ZERO, ONE), (overall + half).clamp(ZERO, ONE))
    return RubricResult(proposal_id, means, overall, ci, len(rows))


def _rubric_chunk(args) -> list[RubricResult]:
    chunk, weights, criteria, cweights = args
    return [aggregate_rubric(pid, bs, weights, criteria, cweights) for pid, bs in chunk]


def aggregate_rubrics(
    ballots: Sequence[CastBallot],
    weights: dict,
    criteria: Sequence[str],
    criterion_weights: dict | None = None,
    proposal_ids: Iterable[str] = (),
    workers: int = 1,
) -> dict[str, RubricResult]:
    cweights = criterion_weights or {c: ONE for c in criteria}
    by_prop: dict[str, list] = defaultdict(list)
    for b in ballots:
        if b.kind == "rubric":
            by_prop[b.contest].append(b)
    pids = sorted(set(by_prop) | set(proposal_ids))
    work = [(pid, by_prop.get(pid, [])) for pid in pids]
    if workers <= 1 or len(work) < 2:
        results = _rubric_chunk((work, weights, tuple(criteria), cweights))
    else:
        size = -(-len(work) // workers)
        chunks = [(work[i:i + size], weights, tuple(criteria), cweights) for i in range(0, len(work), size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [r for part in pool.map(_rubric_chunk, chunks) for r in part]
    return {r.proposal_id: r for r in sorted(results, key=lambda r: r.proposal_id)}


def ranked_choice(ballots: Sequence[CastBallot], weights: dict, options: Sequence[str], contest: str = "") -> IRVResult:
    """Weighted instant runoff; the weakest option is eliminated each round, ties to the lowest id."""
    continuing = sorted(set(options))
    if not continuing:
        return IRVResult(contest, None, ())
    prefs = [(weights.get(b.voter, ZERO), b.body["ranking"]) for b in sorted(ballots, key=lambda b: b.uid)]
    rounds = []
    while True:
        alive = set(continuing)
        tallies = {o: [] for o in continuing}
        for w, ranking in prefs:
            for o in ranking:
                if o in alive:
                    tallies[o].append(w)
                    break
        totals = {o: pairwise_sum(ws) for o, ws in tallies.items()}
        grand = pairwise_sum([totals[o] for o in continuing])
        leader = min(continuing, key=lambda o: (-totals[o].raw, o))
        if len(continuing) == 1 or totals[leader].raw * 2 > grand.raw:
            rounds.append({"round": len(rounds) + 1, "tallies": totals, "eliminated": None})
            return IRVResult(contest, leader, tuple(rounds))
        loser = min(continuing, key=lambda o: (totals[o].raw, o))
        rounds.append({"round": len(rounds) + 1, "tallies": totals, "eliminated": loser})
        continuing.remove(loser)


def quadratic_tally(ballots: Sequence[CastBallot], budget: int, options: Sequence[str] = ()) -> dict[str, int]:
    """Net signed votes per option; ballots over budget are ignored (validation rejects them)."""
    net = dict.fromkeys(sorted(options), 0)
    for b in ballots:
        votes = b.body["votes"]
        if sum(v * v for v in votes.values()) > budget:
            continue
        for o, v in votes.items():
            net[o] = net.get(o, 0) + v
    return dict(sorted(net.items()))


def allocation_mean(ballots: Sequence[CastBallot], weights: dict, options: Sequence[str]) -> dict[str, Fixed]:
    """Weighted mean budget fraction per option (unlisted options count as 0)."""
    rows = [(weights.get(b.voter, ZERO).raw, b.body["fractions"]) for b in sorted(ballots, key=lambda b: b.uid)]
    total = sum(w for w, _ in rows)
    out = {}
    for o in sorted(options):
        if total <= 0:
            out[o] = ZERO
        else:
            out[o] = Fixed(div_round_half_even(sum(w * f.get(o, ZERO).raw for w, f in rows), total))
    return out


def structured_accept(vectors: Sequence[Sequence[Fixed]], tolerance: Fixed) -> tuple[Fixed, ...]:
    """Coordinate-wise lower median when every coordinate's spread is within ``tolerance``."""
    if len(vectors) < 3:
        raise ValueError("structured acceptance needs at least three operator outputs")
    dims = {len(v) for v in vectors}
    if len(dims) != 1:
        raise DimensionMismatch(f"operator vectors have dimensions {sorted(dims)}")
    offending = []
    canonical = []
    for i in range(dims.pop()):
        col = sorted(v[i] for v in vectors)
        spread = col[-1] - col[0]
        if spread > tolerance:
            offending.append((i, spread))
        canonical.append(col[(len(col) - 1) // 2])
    if offending:
        raise SpreadExceeded(offending)
    return tuple(canonical)


def aggregate(
    validated: ValidationResult,
    weights: dict,
    proposals: Sequence[Proposal],
    config: PipelineConfig,
    scorer: Scorer | None = None,
    workers: int = 1,
) -> AggregateResult:
    scorer = scorer or config.scorer()
    ballots = effective_ballots(validated.accepted, config.context)
    by_kind: dict[str, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for b in ballots:
        by_kind[b.kind][b.contest].append(b)
    rubrics = aggregate_rubrics(
        ballots, weights, config.criteria, config.weights_for_criteria(),
        proposal_ids=[p.id for p in proposals], workers=workers,
    )
    rankings, quad, alloc = {}, {}, {}
    for contest in sorted(config.contests):
        opts = config.contests[contest]
        if by_kind["ranking"].get(contest):
            rankings[contest] = ranked_choice(by_kind["ranking"][contest], weights, opts, contest)
        if by_kind["quadratic"].get(contest):
            quad[contest] = quadratic_tally(by_kind["quadratic"][contest], config.quadratic_budget, opts)
        if by_kind["allocation"].get(contest):
            alloc[contest] = allocation_mean(by_kind["allocation"][contest], weights, opts)
    themes = {p.id: tuple(sorted(set(p.tags) | set(scorer.themes(p.text)))) for p in sorted(proposals, key=lambda p: p.id)}
    return AggregateResult(rubrics, rankings, quad, alloc, themes)


# stage 4: report ------------------------------------------------------------


def report_leaves(entries) -> list[tuple[bytes, bytes]]:
    return [(e.proposal_id.encode(), codec.encode(e)) for e in entries]


def cluster_proposals(proposals: Sequence[Proposal], by_tags: bool = True) -> dict[str, str]:
    """Connected components over declared dependencies and equal tags; cluster id = smallest member id."""
    ids = sorted(p.id for p in proposals)
    parent = {i: i for i in ids}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for p in proposals:
        for dep in p.depends_on:
            if dep in parent:
                union(p.id, dep)
    if by_tags:
        tags = {p.id: p.tags for p in proposals}
        first_with: dict[str, str] = {}
        for pid in ids:
            for tag in tags[pid]:
                if tag in first_with:
                    union(pid, first_with[tag])
                else:
                    first_with[tag] = pid
    return {i: find(i) for i in ids}


def build_priority_report(
    rubrics: dict[str, RubricResult],
    proposals: Sequence[Proposal],
    config: PipelineConfig,
    themes: dict | None = None,
) -> PriorityReport:
    themes = themes or {p.id: tuple(p.tags) for p in proposals}
    if not proposals:
        return PriorityReport((), (), EMPTY_ROOT)
    cluster_of = cluster_proposals(proposals, config.cluster_by_tags)

    def order(pid):
        r = rubrics.get(pid)
        if r is None or r.overall is None:
            return (1, 0, pid)
        return (0, -r.overall.raw, pid)

    entries = []
    for rank, pid in enumerate(sorted(cluster_of, key=order), 1):
        r = rubrics.get(pid)
        score = None if r is None else r.overall
        entries.append(
            PriorityEntry(
                proposal_id=pid,
                rank=rank,
                score=score,
                ci=None if r is None else r.ci,
                cluster=cluster_of[pid],
                ready=score is not None and score >= config.funding_threshold,
                themes=tuple(themes.get(pid, ())),
            )
        )
    groups: dict[str, list[str]] = defaultdict(list)
    for pid, c in cluster_of.items():
        groups[c].append(pid)
    clusters = tuple(tuple(sorted(groups[c])) for c in sorted(groups))
    root = MerkleTree(report_leaves(entries)).root
    return PriorityReport(tuple(entries), clusters, root)


# the whole run --------------------------------------------------------------


def _sorted_canonical(items) -> list:
    return [codec.decode(x) for x in sorted(codec.encode(i) for i in items)]


def run_pipeline(
    ballots: Iterable[Ballot],
    snapshot: GraphSnapshot,
    trust: TrustScoreTable,
    proposals: Iterable[Proposal],
    config: PipelineConfig,
    scorer: Scorer | None = None,
    workers: int = 1,
) -> PipelineRun:
    ballots = list(ballots)
    proposals = sorted(proposals, key=lambda p: p.id)
    ballot_digest = codec.digest(sorted(codec.encode(b) for b in ballots))
    audit = []

    in1 = codec.digest([ballot_digest, snapshot.digest, codec.digest(config)])
    validated = validate_and_normalize(ballots, snapshot, config, [p.id for p in proposals])
    out1 = codec.digest(validated)
    audit.append(AuditEntry("validate", in1, out1, {
        "accepted": len(validated.accepted), "rejected": len(validated.rejections), "seed": config.seed,
    }))

    in2 = codec.digest([snapshot.digest, codec.digest(trust), list(config.mix), config.domain_schema])
    weights = compute_voter_weights(snapshot, trust, config.mix, config.domain_schema)
    out2 = codec.digest(weights)
    audit.append(AuditEntry("weights", in2, out2))

    in3 = codec.digest([out1, out2, codec.digest(proposals), codec.digest(config)])
    agg = aggregate(validated, weights, proposals, config, scorer, workers)
    out3 = codec.digest(agg)
    audit.append(AuditEntry("aggregate", in3, out3))

    in4 = codec.digest([out3, codec.digest(proposals)])
    report = build_priority_report(agg.rubrics, proposals, config, agg.themes)
    out4 = codec.digest(report)
    audit.append(AuditEntry("report", in4, out4, {"root": report.root}))

    run_id = codec.digest([in1, codec.digest(trust), codec.digest(proposals)])
    return PipelineRun(
        run_id=run_id,
        snapshot_id=snapshot.snapshot_id,
        stages=(("validate", out1), ("weights", out2), ("aggregate", out3), ("report", out4)),
        audit=tuple(audit),
        report=report,
        outputs={"validate": validated, "weights": weights, "aggregate": agg, "report": report},
    )
