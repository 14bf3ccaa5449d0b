"""Deterministic proposal quality gate."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Iterable

from vgov import codec
from vgov.attestation import GraphSnapshot
from vgov.fixed import Fixed
from vgov.proposal import MalformedProposal, Proposal
from vgov.scorer import LexicalScorer, Scorer

PASS = "pass"
FAIL = "fail"
ESCALATE = "escalate"

MISSING_FIELD = "MISSING_FIELD"
BUDGET_OUT_OF_BOUNDS = "BUDGET_OUT_OF_BOUNDS"
BANNED_TERM = "BANNED_TERM"
CONFLICT_OF_INTEREST = "CONFLICT_OF_INTEREST"
LOW_SCORE = "LOW_SCORE"

_TEXT_FIELDS = ("title", "problem", "impact", "risks", "body")


@codec.record("GateRules")
@dataclass(frozen=True)
class GateRules:
    budget_min: Fixed = Fixed(0)
    budget_max: Fixed = Fixed(1_000_000 * 10**9)
    banned_terms: tuple = ()
    score_threshold: Fixed = Fixed(500_000_000)
    reviewers: tuple = ()  # identity ids allowed to override
    override_quorum: int = 2


@codec.record("Span")
@dataclass(frozen=True)
class Span:
    field: str
    start: int
    end: int
    text: str


@codec.record("GateResult")
@dataclass(frozen=True)
class GateResult:
    proposal_id: str
    decision: str
    reasons: tuple  # ((code, detail), ...)
    spans: tuple = ()
    suggestions: tuple = ()
    score: Fixed | None = None
    override: tuple = ()  # reviewers who overrode a fail

    @property
    def codes(self) -> tuple[str, ...]:
        return tuple(code for code, _ in self.reasons)


def banned_spans(proposal: Proposal, terms: Iterable[str]) -> list[Span]:
    """Whole-word, case-insensitive matches with offsets into the named field."""
    out = []
    for name in _TEXT_FIELDS:
        text = getattr(proposal, name) or ""
        for term in sorted(set(terms)):
            for m in re.finditer(r"(?<!\w)" + re.escape(term) + r"(?!\w)", text, re.IGNORECASE):
                out.append(Span(name, m.start(), m.end(), m.group()))
    return sorted(out, key=lambda s: (_TEXT_FIELDS.index(s.field), s.start, s.end))


def conflict_of_interest(proposal: Proposal, snapshot: GraphSnapshot | None) -> list[bytes]:
    """Beneficiaries that have attested to the proposer."""
    if snapshot is None or proposal.proposer is None or not proposal.beneficiaries:
        return []
    bens = set(proposal.beneficiaries)
    return sorted({a.attestor for a in snapshot.attestations if a.subject == proposal.proposer and a.attestor in bens})


def gate_proposal(
    proposal: Proposal | dict,
    rules: GateRules,
    scorer: Scorer | None = None,
    snapshot: GraphSnapshot | None = None,
) -> GateResult:
    """Run every check; any failing check fails, otherwise any escalation escalates."""
    if isinstance(proposal, dict):
        proposal = Proposal.from_mapping(proposal)
    if not isinstance(proposal, Proposal):
        raise MalformedProposal("expected a proposal")
    scorer = scorer or LexicalScorer()
    fails: list[tuple[str, str]] = []
    escalations: list[tuple[str, str]] = []

    for name in proposal.missing_fields():
        fails.append((MISSING_FIELD, name))
    if proposal.budget is not None and not rules.budget_min <= proposal.budget <= rules.budget_max:
        fails.append((BUDGET_OUT_OF_BOUNDS, f"{proposal.budget} not in [{rules.budget_min}, {rules.budget_max}]"))
    spans = banned_spans(proposal, rules.banned_terms)
    for s in spans:
        fails.append((BANNED_TERM, f"{s.field}[{s.start}:{s.end}]"))
    for who in conflict_of_interest(proposal, snapshot):
        escalations.append((CONFLICT_OF_INTEREST, who.hex()))

    score = scorer.score(proposal.text)
    suggestions: tuple = ()
    if score < rules.score_threshold:
        fails.append((LOW_SCORE, f"{score} < {rules.score_threshold}"))
        suggestions = tuple(scorer.suggestions(proposal.text))
    suggestions += tuple(f"add the {name} section" for name in proposal.missing_fields())

    decision = FAIL if fails else ESCALATE if escalations else PASS
    return GateResult(proposal.id, decision, tuple(fails + escalations), tuple(spans), suggestions, score)


def reviewer_override(result: GateResult, approvals: Iterable[bytes], rules: GateRules) -> GateResult:
    """A quorum of listed reviewers can pass a failed or escalated proposal; the override is recorded."""
    approvers = tuple(sorted(set(approvals) & set(rules.reviewers)))
    if result.decision == PASS or len(approvers) < rules.override_quorum:
        return result
    return replace(result, decision=PASS, override=approvers)
