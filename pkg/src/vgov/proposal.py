"""Structured proposal documents shared by the pipeline and the gatekeeper."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from vgov import codec
from vgov.fixed import Fixed

REQUIRED_FIELDS = ("problem", "impact", "budget", "risks")


class MalformedProposal(ValueError):
    pass


@codec.record("Proposal")
@dataclass(frozen=True)
class Proposal:
    id: str
    title: str = ""
    problem: str | None = None
    impact: str | None = None
    budget: Fixed | None = None
    risks: str | None = None
    body: str = ""
    proposer: bytes | None = None
    beneficiaries: tuple = ()
    tags: tuple = ()
    depends_on: tuple = ()

    @property
    def text(self) -> str:
        parts = [self.title, self.problem or "", self.impact or "", self.risks or "", self.body]
        return "\n".join(p for p in parts if p)

    def missing_fields(self) -> list[str]:
        out = []
        for name in REQUIRED_FIELDS:
            value = getattr(self, name)
            if value is None or (isinstance(value, str) and not value.strip()):
                out.append(name)
        return out

    @classmethod
    def from_mapping(cls, doc: Mapping) -> Proposal:
        """Build from a JSON-like mapping; ``budget`` may be a decimal string or number."""
        if isinstance(doc, Proposal):
            return doc
        if not isinstance(doc, Mapping):
            raise MalformedProposal("proposal must be a mapping")
        pid = doc.get("id")
        if not isinstance(pid, str) or not pid:
            raise MalformedProposal("proposal id must be a non-empty string")
        kwargs: dict = {"id": pid}
        for name in ("title", "body"):
            v = doc.get(name, "")
            if not isinstance(v, str):
                raise MalformedProposal(f"{name} must be a string")
            kwargs[name] = v
        for name in ("problem", "impact", "risks"):
            v = doc.get(name)
            if v is not None and not isinstance(v, str):
                raise MalformedProposal(f"{name} must be a string")
            kwargs[name] = v
        budget = doc.get("budget")
        if budget is not None:
            if isinstance(budget, Fixed):
                kwargs["budget"] = budget
            elif isinstance(budget, bool) or not isinstance(budget, (int, str, float)):
                raise MalformedProposal("budget must be a number")
            else:
                try:
                    kwargs["budget"] = Fixed.parse(str(budget))
                except (ValueError, ArithmeticError) as exc:
                    raise MalformedProposal(f"budget: {exc}") from exc
        proposer = doc.get("proposer")
        if proposer is not None:
            kwargs["proposer"] = _ident(proposer, "proposer")
        kwargs["beneficiaries"] = tuple(_ident(b, "beneficiary") for b in _seq(doc.get("beneficiaries", ()), "beneficiaries"))
        for name in ("tags", "depends_on"):
            items = _seq(doc.get(name, ()), name)
            if not all(isinstance(x, str) for x in items):
                raise MalformedProposal(f"{name} must be strings")
            kwargs[name] = tuple(sorted(set(items)))
        return cls(**kwargs)


def _seq(v, name):
    if isinstance(v, (str, bytes)) or not isinstance(v, (list, tuple)):
        raise MalformedProposal(f"{name} must be a list")
    return list(v)


def _ident(v, name) -> bytes:
    if isinstance(v, str):
        try:
            v = bytes.fromhex(v)
        except ValueError as exc:
            raise MalformedProposal(f"{name} is not hex") from exc
    if not isinstance(v, bytes) or len(v) != 32:
        raise MalformedProposal(f"{name} must be a 32-byte identity id")
    return v
