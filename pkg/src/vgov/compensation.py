"""Tiered contributor compensation with a bounded, slowly moving multiplier."""

from __future__ import annotations

from dataclasses import dataclass

from vgov import codec
from vgov.fixed import ONE, ZERO, Fixed, iroot
from vgov.trust import ContributionScoreTable


@codec.record("CompensationParams")
@dataclass(frozen=True)
class CompensationParams:
    min_score: Fixed = Fixed(1_000_000)  # 0.001
    max_score: Fixed = Fixed(1_000_000_000)  # 1.0
    tiers: int = 6
    base_min: Fixed = Fixed(200 * 10**9)
    base_max: Fixed = Fixed(1200 * 10**9)
    band: tuple = (Fixed(800_000_000), Fixed(1_200_000_000))
    max_step: Fixed = Fixed(100_000_000)  # largest multiplier move per epoch without a proposal
    previous_multiplier: Fixed = ONE
    reviewer_credibility: Fixed = ONE

    def __post_init__(self):
        if not (ZERO < self.min_score < self.max_score):
            raise ValueError("need 0 < min_score < max_score")
        if self.tiers < 2:
            raise ValueError("need at least two tiers")
        if not (ZERO < self.base_min <= self.base_max):
            raise ValueError("need 0 < base_min <= base_max")
        if not (ZERO < self.band[0] <= self.band[1]):
            raise ValueError("multiplier band must be positive and ordered")


@codec.record("PayoutRow")
@dataclass(frozen=True)
class PayoutRow:
    score: Fixed
    tier: int
    base: Fixed
    payout: Fixed


@codec.record("PayoutTable")
@dataclass(frozen=True)
class PayoutTable:
    epoch: int
    multiplier: Fixed
    escalations: tuple
    rows: dict  # identity -> PayoutRow


def tier_boundaries(params: CompensationParams) -> list[Fixed]:
    """Lower score edge of tiers 2..n, evenly spaced in log-score (floored)."""
    n, lo, hi = params.tiers, params.min_score.raw, params.max_score.raw
    return [Fixed(iroot(lo ** (n - k) * hi**k, n)) for k in range(1, n)]


def tier_of(score: Fixed, params: CompensationParams) -> int:
    """0 for a non-positive score, else 1 + number of log-spaced edges the score reaches.

    Edges are compared exactly: ``s >= lo^(1-k/n) hi^(k/n)`` iff
    ``s^n >= lo^(n-k) hi^k``.
    """
    if score <= ZERO:
        return 0
    n, lo, hi = params.tiers, params.min_score.raw, params.max_score.raw
    s_n = score.raw**n
    return 1 + sum(1 for k in range(1, n) if s_n >= lo ** (n - k) * hi**k)


def tier_base(tier: int, params: CompensationParams) -> Fixed:
    if tier == 0:
        return ZERO
    span = params.base_max - params.base_min
    return params.base_min + span * (tier - 1) / (params.tiers - 1)


def epoch_multiplier(treasury_health: Fixed, params: CompensationParams) -> tuple[Fixed, list[str]]:
    """Health x credibility, moved at most ``max_step`` from last epoch and clamped to the band."""
    escalations = []
    target = treasury_health * params.reviewer_credibility
    prev = params.previous_multiplier
    m = target
    if abs(target - prev) > params.max_step:
        escalations.append(f"multiplier change {prev} -> {target} exceeds step {params.max_step}; requires a proposal")
        m = prev + params.max_step if target > prev else prev - params.max_step
    lo, hi = params.band
    if not lo <= m <= hi:
        escalations.append(f"multiplier {m} outside band [{lo}, {hi}]; requires a proposal")
        m = m.clamp(lo, hi)
    return m, escalations


def compensation_epoch(
    contributions: ContributionScoreTable,
    treasury_health: Fixed,
    params: CompensationParams | None = None,
) -> PayoutTable:
    params = params or CompensationParams()
    m, escalations = epoch_multiplier(treasury_health, params)
    rows = {}
    for ident in sorted(contributions.scores):
        score = contributions.scores[ident]
        tier = tier_of(score, params)
        base = tier_base(tier, params)
        payout = ZERO if tier == 0 else (base * m).clamp(params.base_min, params.base_max)
        rows[ident] = PayoutRow(score, tier, base, payout)
    return PayoutTable(contributions.epoch, m, tuple(escalations), rows)
