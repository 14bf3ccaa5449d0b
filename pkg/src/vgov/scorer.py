"""Deterministic text scoring used where a model would otherwise sit.

:class:`Scorer` is the seam; :class:`LexicalScorer` is the shipped
implementation (token overlap with a reference vocabulary plus keyword
rubric coverage). Everything is integer arithmetic on lower-cased word
tokens, so every operator computes the same numbers.
"""

from __future__ import annotations

import re
from typing import Mapping, Protocol

from vgov.fixed import Fixed

_TOKEN = re.compile(r"[a-z0-9]+")

DEFAULT_RUBRIC = {
    "problem": ("problem", "issue", "gap", "need", "currently"),
    "impact": ("impact", "benefit", "improve", "users", "outcome"),
    "budget": ("budget", "cost", "funding", "usd", "spend"),
    "risks": ("risk", "mitigation", "failure", "dependency", "fallback"),
}


def tokens(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class Scorer(Protocol):
    def score(self, text: str) -> Fixed: ...

    def themes(self, text: str) -> tuple[str, ...]: ...

    def suggestions(self, text: str) -> tuple[str, ...]: ...


class LexicalScorer:
    def __init__(
        self,
        rubric: Mapping[str, tuple[str, ...]] | None = None,
        themes: Mapping[str, tuple[str, ...]] | None = None,
        reference: tuple[str, ...] = (),
    ):
        self.rubric = {k: tuple(v) for k, v in sorted((rubric or DEFAULT_RUBRIC).items())}
        self.theme_keywords = {k: tuple(v) for k, v in sorted((themes or {}).items())}
        self.reference = frozenset(w for r in reference for w in tokens(r))

    def coverage(self, text: str) -> dict[str, bool]:
        words = set(tokens(text))
        return {crit: any(k in words for k in kws) for crit, kws in self.rubric.items()}

    def score(self, text: str) -> Fixed:
        """Half keyword-rubric coverage, half reference-vocabulary overlap.

        With no reference vocabulary the score is rubric coverage alone.
        """
        cov = self.coverage(text)
        hit = sum(cov.values())
        if not self.reference:
            return Fixed.ratio(hit, len(cov) or 1)
        words = set(tokens(text))
        overlap = len(words & self.reference)
        # (hit/n + overlap/|ref|) / 2
        n = len(cov) or 1
        return Fixed.ratio(hit * len(self.reference) + overlap * n, 2 * n * len(self.reference))

    def themes(self, text: str) -> tuple[str, ...]:
        words = set(tokens(text))
        return tuple(t for t, kws in self.theme_keywords.items() if any(k in words for k in kws))

    def suggestions(self, text: str) -> tuple[str, ...]:
        return tuple(
            f"mention {crit} (e.g. '{self.rubric[crit][0]}')"
            for crit, ok in self.coverage(text).items()
            if not ok
        )
