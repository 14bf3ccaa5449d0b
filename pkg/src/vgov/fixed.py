"""Signed 64-bit fixed-point numbers at scale 10^-9.

Every real-valued quantity that can influence a consensus artifact (trust
scores, weights, confidences, drift fractions, currency amounts) is a
:class:`Fixed`. Floats never enter those paths.
"""

from __future__ import annotations

from decimal import Decimal, InvalidOperation
from typing import Iterable, Mapping, Sequence

SCALE = 10**9
INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1


class FixedOverflow(ArithmeticError):
    """Result does not fit in a signed 64-bit raw value."""


def div_round_half_even(n: int, d: int) -> int:
    """Integer ``n / d`` rounded half-to-even."""
    if d == 0:
        raise ZeroDivisionError("fixed-point division by zero")
    if d < 0:
        n, d = -n, -d
    q, r = divmod(n, d)
    twice = 2 * r
    if twice > d or (twice == d and q & 1):
        q += 1
    return q


def _checked(raw: int) -> int:
    if raw < INT64_MIN or raw > INT64_MAX:
        raise FixedOverflow(f"fixed-point overflow: raw={raw}")
    return raw


class Fixed:
    """Immutable fixed-point value; ``raw`` is the integer count of 10^-9 units."""

    __slots__ = ("raw",)

    def __init__(self, raw: int = 0):
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise TypeError(f"Fixed raw value must be int, got {type(raw).__name__}")
        object.__setattr__(self, "raw", _checked(raw))

    def __setattr__(self, name, value):
        raise AttributeError("Fixed is immutable")

    def __reduce__(self):
        return (Fixed, (self.raw,))

    # construction -----------------------------------------------------
    @classmethod
    def from_int(cls, value: int) -> Fixed:
        return cls(value * SCALE)

    @classmethod
    def parse(cls, text: str | int | Decimal) -> Fixed:
        """Parse a decimal literal exactly, rounding half-even past 9 places."""
        if isinstance(text, int) and not isinstance(text, bool):
            return cls.from_int(text)
        try:
            d = Decimal(str(text).strip())
        except InvalidOperation as exc:
            raise ValueError(f"not a decimal literal: {text!r}") from exc
        if not d.is_finite():
            raise ValueError(f"non-finite value: {text!r}")
        num, den = (d * SCALE).as_integer_ratio()
        return cls(div_round_half_even(num, den))

    @classmethod
    def ratio(cls, num: int, den: int) -> Fixed:
        return cls(div_round_half_even(num * SCALE, den))

    # arithmetic -------------------------------------------------------
    def __add__(self, other: Fixed) -> Fixed:
        if not isinstance(other, Fixed):
            return NotImplemented
        return Fixed(self.raw + other.raw)

    def __sub__(self, other: Fixed) -> Fixed:
        if not isinstance(other, Fixed):
            return NotImplemented
        return Fixed(self.raw - other.raw)

    def __mul__(self, other: Fixed | int) -> Fixed:
        if isinstance(other, Fixed):
            return Fixed(div_round_half_even(self.raw * other.raw, SCALE))
        if isinstance(other, int) and not isinstance(other, bool):
            return Fixed(self.raw * other)
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other: Fixed | int) -> Fixed:
        if isinstance(other, Fixed):
            return Fixed(div_round_half_even(self.raw * SCALE, other.raw))
        if isinstance(other, int) and not isinstance(other, bool):
            return Fixed(div_round_half_even(self.raw, other))
        return NotImplemented

    def __neg__(self) -> Fixed:
        return Fixed(-self.raw)

    def __abs__(self) -> Fixed:
        return Fixed(abs(self.raw))

    # comparison -------------------------------------------------------
    def __eq__(self, other):
        if isinstance(other, Fixed):
            return self.raw == other.raw
        return NotImplemented

    def __hash__(self):
        return hash(("Fixed", self.raw))

    def __lt__(self, other: Fixed) -> bool:
        return self.raw < other.raw

    def __le__(self, other: Fixed) -> bool:
        return self.raw <= other.raw

    def __gt__(self, other: Fixed) -> bool:
        return self.raw > other.raw

    def __ge__(self, other: Fixed) -> bool:
        return self.raw >= other.raw

    def __bool__(self) -> bool:
        return self.raw != 0

    # display ----------------------------------------------------------
    def to_decimal(self) -> Decimal:
        return Decimal(self.raw).scaleb(-9)

    def __float__(self) -> float:
        # display and test oracles only
        return self.raw / SCALE

    def __str__(self) -> str:
        sign = "-" if self.raw < 0 else ""
        whole, frac = divmod(abs(self.raw), SCALE)
        if frac == 0:
            return f"{sign}{whole}"
        return f"{sign}{whole}.{frac:09d}".rstrip("0")

    def __repr__(self) -> str:
        return f"Fixed({str(self)!r})"

    def clamp(self, lo: Fixed, hi: Fixed) -> Fixed:
        return lo if self < lo else hi if self > hi else self


ZERO = Fixed(0)
ONE = Fixed(SCALE)


def pairwise_sum(values: Sequence[Fixed]) -> Fixed:
    """Overflow-checked pairwise tree summation in the given order."""
    n = len(values)
    if n == 0:
        return ZERO
    if n == 1:
        return values[0]
    level = list(values)
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) & 1:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def sum_by_key(mapping: Mapping[object, Fixed]) -> Fixed:
    """Sum a mapping's values in sorted-key order; a pure function of the multiset."""
    return pairwise_sum([mapping[k] for k in sorted(mapping)])


def apportion(raw_values: Mapping[object, int], total: int) -> dict[object, int]:
    """Scale non-negative integer weights so they sum to exactly ``total``.

    Largest-remainder rounding; leftover units go to the largest remainders,
    ties broken by ascending key. Zero weights stay zero.
    """
    denom = sum(raw_values.values())
    if denom <= 0:
        return {k: 0 for k in raw_values}
    out: dict[object, int] = {}
    remainders = []
    for k in sorted(raw_values):
        v = raw_values[k]
        if v < 0:
            raise ValueError("apportion requires non-negative weights")
        q, r = divmod(v * total, denom)
        out[k] = q
        if r:
            remainders.append((-r, k))
    leftover = total - sum(out.values())
    remainders.sort()
    for _, k in remainders[:leftover]:
        out[k] += 1
    return out


def normalize(values: Mapping[object, Fixed]) -> dict[object, Fixed]:
    """Rescale non-negative values to sum to exactly one."""
    raws = apportion({k: v.raw for k, v in values.items()}, SCALE)
    return {k: Fixed(r) for k, r in raws.items()}


def exp2_neg(num: int, den: int, precision: int = 10**30) -> Fixed:
    """``2 ** (-num/den)`` for ``num >= 0, den > 0``, evaluated in integers.

    The integer part is a shift; the fractional part uses the exp series on
    ``-f*ln2`` at ``precision`` units, so the result is bit-reproducible.
    """
    if num < 0 or den <= 0:
        raise ValueError("exp2_neg needs num >= 0 and den > 0")
    whole, rem = divmod(num, den)
    if whole >= 64:
        return ZERO
    # ln 2 to 40 digits, scaled
    ln2 = 6931471805599453094172321214581765680755 * precision // 10**40
    x = rem * ln2 // den  # f * ln2 at precision
    term = precision
    acc = precision
    k = 1
    while term:
        term = term * x // (precision * k)
        acc += -term if k & 1 else term
        k += 1
    return Fixed(div_round_half_even(acc * SCALE, precision << whole))


def iroot(n: int, k: int) -> int:
    """Floor of the k-th root of a non-negative integer."""
    if n < 0:
        raise ValueError("iroot of negative")
    if n < 2:
        return n
    x = 1 << -(-n.bit_length() // k)
    while True:
        y = ((k - 1) * x + n // x ** (k - 1)) // k
        if y >= x:
            return x
        x = y


def isqrt_fixed(value: Fixed) -> Fixed:
    from math import isqrt

    if value.raw < 0:
        raise ValueError("sqrt of negative")
    return Fixed(isqrt(value.raw * SCALE))


def as_fixed(value: Fixed | int | str) -> Fixed:
    if isinstance(value, Fixed):
        return value
    return Fixed.parse(value)


def fixed_list(values: Iterable[Fixed | int | str]) -> list[Fixed]:
    return [as_fixed(v) for v in values]
