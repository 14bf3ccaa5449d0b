"""Portfolio drift and capped rebalancing plans."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from vgov import codec
from vgov.fixed import ONE, SCALE, ZERO, Fixed, div_round_half_even, sum_by_key


class InfeasibleWithinCaps(Exception):
    """Raised only on request; by default the partial plan is returned flagged."""


@codec.record("PortfolioState")
@dataclass(frozen=True)
class PortfolioState:
    holdings: dict  # asset class -> Fixed value
    targets: dict  # asset class -> Fixed fraction, summing to one

    def __post_init__(self):
        if set(self.holdings) != set(self.targets):
            raise ValueError("holdings and targets must name the same asset classes")
        if sum_by_key(self.targets) != ONE:
            raise ValueError("target fractions must sum to 1")
        if any(v < ZERO for v in self.holdings.values()) or any(t < ZERO for t in self.targets.values()):
            raise ValueError("holdings and targets are non-negative")

    @property
    def total(self) -> Fixed:
        return sum_by_key(self.holdings)

    def deviations(self) -> dict[str, int]:
        """Signed ``holding*SCALE - target*total`` per class (exact integers)."""
        v = self.total.raw
        return {c: self.holdings[c].raw * SCALE - self.targets[c].raw * v for c in sorted(self.holdings)}

    @property
    def drift(self) -> Fixed:
        """Largest absolute gap between current and target fraction."""
        v = self.total.raw
        if v == 0:
            return ZERO
        return Fixed(max(div_round_half_even(abs(d), v) for d in self.deviations().values()))

    def exact_drift(self) -> Fraction:
        v = self.total.raw
        if v == 0:
            return Fraction(0)
        return max(Fraction(abs(d), v * SCALE) for d in self.deviations().values())

    def fractions(self) -> dict[str, Fixed]:
        v = self.total.raw
        return {c: Fixed.ratio(self.holdings[c].raw, v) if v else ZERO for c in sorted(self.holdings)}


@codec.record("Transfer")
@dataclass(frozen=True)
class Transfer:
    source: str
    sink: str
    amount: Fixed


@codec.record("RebalancePlan")
@dataclass(frozen=True)
class RebalancePlan:
    transfers: tuple
    moved: Fixed
    needed: Fixed
    partial: bool


def _water_fill(excess: dict[str, Fraction], budget: Fraction) -> dict[str, Fraction]:
    """Amounts to take from each positive entry so the largest ones drop to a common level."""
    items = sorted(((e, c) for c, e in excess.items() if e > 0), key=lambda t: (-t[0], t[1]))
    take = {c: Fraction(0) for _, c in items}
    if not items or budget <= 0:
        return take
    total = sum(e for e, _ in items)
    if budget >= total:
        return {c: e for e, c in items}
    # find level L with sum(max(0, e - L)) == budget
    for k in range(len(items)):
        nxt = items[k + 1][0] if k + 1 < len(items) else Fraction(0)
        acc_here = sum(e - nxt for e, _ in items[: k + 1])
        if acc_here >= budget:
            level = (sum(e for e, _ in items[: k + 1]) - budget) / (k + 1)
            for e, c in items[: k + 1]:
                take[c] = e - level
            return take
    return take


def _to_raw(amounts: dict[str, Fraction], total: int) -> dict[str, int]:
    """Round fractional raw amounts to integers that sum to ``total``."""
    floors = {c: int(a) for c, a in amounts.items()}
    short = total - sum(floors.values())
    order = sorted(amounts, key=lambda c: (-(amounts[c] - floors[c]), c))
    for c in order[:short]:
        floors[c] += 1
    return floors


def plan_rebalance(portfolio: PortfolioState, max_move: Fixed, strict: bool = False) -> RebalancePlan:
    """Transfers from over-weight to under-weight classes moving at most ``max_move`` in total.

    The moved amount is the smaller of the cap and the total over-weight
    value. It is taken from the most over-weight classes first (their
    excesses are lowered to a common level) and given to the most
    under-weight classes the same way, then sources are matched to sinks
    largest-first. With ``strict`` a cap that cannot close the gap raises
    :class:`InfeasibleWithinCaps` instead of returning a flagged partial plan.
    """
    if max_move < ZERO:
        raise ValueError("max_move must be non-negative")
    dev = portfolio.deviations()
    over = {c: Fraction(d, SCALE) for c, d in dev.items() if d > 0}
    under = {c: Fraction(-d, SCALE) for c, d in dev.items() if d < 0}
    needed = sum(over.values(), Fraction(0))
    budget = min(Fraction(max_move.raw), needed)
    moved = int(budget)  # whole raw units
    partial = Fraction(max_move.raw) < needed
    if strict and partial:
        raise InfeasibleWithinCaps(f"need {needed / SCALE} but cap is {max_move}")
    src = _to_raw(_water_fill(over, Fraction(moved)), moved)
    dst = _to_raw(_water_fill(under, Fraction(moved)), moved)
    sources = sorted(((v, c) for c, v in src.items() if v > 0), key=lambda t: (-t[0], t[1]))
    sinks = sorted(((v, c) for c, v in dst.items() if v > 0), key=lambda t: (-t[0], t[1]))
    transfers = []
    i = j = 0
    s_left = sources[0][0] if sources else 0
    d_left = sinks[0][0] if sinks else 0
    while i < len(sources) and j < len(sinks):
        amt = min(s_left, d_left)
        if amt > 0:
            transfers.append(Transfer(sources[i][1], sinks[j][1], Fixed(amt)))
        s_left -= amt
        d_left -= amt
        if s_left == 0:
            i += 1
            s_left = sources[i][0] if i < len(sources) else 0
        if d_left == 0:
            j += 1
            d_left = sinks[j][0] if j < len(sinks) else 0
    moved_total = sum(t.amount.raw for t in transfers)
    return RebalancePlan(tuple(transfers), Fixed(moved_total), Fixed(div_round_half_even(needed.numerator, needed.denominator)), partial)


def apply_transfers(portfolio: PortfolioState, transfers) -> PortfolioState:
    h = dict(portfolio.holdings)
    for t in transfers:
        h[t.source] = h[t.source] - t.amount
        h[t.sink] = h[t.sink] + t.amount
        if h[t.source] < ZERO:
            raise ValueError(f"transfer overdraws {t.source}")
    return PortfolioState(h, dict(portfolio.targets))
