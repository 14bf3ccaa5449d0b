"""Parser for the line-oriented policy language.

A policy file is a sequence of statements, one per line, ``#`` starts a
comment. The vocabulary of triggers, predicates and actions is closed, and
every numeric action parameter must carry a closed ``in [lo, hi]`` bound, so
bounds are checked before a policy ever runs. See ``docs/policy-language.md``
for the grammar.

Parsing never raises anything except :class:`PolicyError` subclasses, and
every error carries a 1-based (line, column).
"""

from __future__ import annotations

import re
from decimal import Decimal, InvalidOperation
from dataclasses import dataclass, field
from functools import cached_property

from vgov import codec
from vgov.fixed import SCALE, ZERO, Fixed

TRIGGERS = {
    # kind -> {param: (type, required)}
    "time-elapsed": {"every": ("int", True), "start": ("int", False)},
    "drift-exceeds": {"threshold": ("num", True)},
    "proposal-submitted": {"tag": ("ident", False)},
    "attestation-changed": {"schema": ("ident", False)},
}
PREDICATES = {
    # name -> argument types
    "flag": ("ident",),
    "at_most": ("ident", "num"),
    "at_least": ("ident", "num"),
    "drift_above": ("num",),
}
ACTIONS = {
    # kind -> {param: kind}; "bounded" params need `in [lo, hi]`
    "rebalance": {"max_move": "bounded"},
    "transfer": {"to": "ident", "amount": "bounded"},
    "set-param": {"name": "ident", "value": "bounded"},
}
AMOUNT_PARAMS = {"transfer": "amount", "rebalance": "max_move"}
EXCEPTION_EVENTS = ("missing-data", "clipped", "partial")
EXCEPTION_RESPONSES = ("escalate", "pause")


class PolicyError(Exception):
    code = "POLICY"

    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.message = message
        self.line = line
        self.col = col
        super().__init__(f"{line}:{col}: {self.code}: {message}")


class PolicySyntaxError(PolicyError):
    code = "SYNTAX"


class UnboundedAction(PolicyError):
    code = "UNBOUNDED_ACTION"


class UnknownPredicate(PolicyError):
    code = "UNKNOWN_PREDICATE"


class ExpiryMissing(PolicyError):
    code = "EXPIRY_MISSING"


@codec.record("Trigger")
@dataclass(frozen=True)
class Trigger:
    kind: str
    params: dict


@codec.record("BoundedParam")
@dataclass(frozen=True)
class BoundedParam:
    value: object  # Fixed or ["metric", key]
    lo: Fixed
    hi: Fixed


@codec.record("ActionTemplate")
@dataclass(frozen=True)
class ActionTemplate:
    kind: str
    params: dict  # name -> BoundedParam | str


@codec.record("Limits")
@dataclass(frozen=True)
class Limits:
    per_action: Fixed | None = None
    per_epoch: Fixed | None = None
    rate: int | None = None


@codec.record("Policy")
@dataclass(frozen=True)
class Policy:
    policy_id: str
    version: int
    expiry: int
    delay: int
    window: int
    triggers: tuple
    condition: object  # expression tree as nested lists
    actions: tuple
    limits: Limits = field(default_factory=Limits)
    exceptions: dict = field(default_factory=dict)

    @cached_property
    def digest(self) -> bytes:
        return codec.digest(self)


# tokens ---------------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t]+)
  | (?P<num>-?\d+(?:\.\d+)?%?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.\-]*)
  | (?P<arrow>->)
  | (?P<punct>[()\[\],=])
    """,
    re.VERBOSE,
)


@dataclass
class Tok:
    kind: str
    text: str
    col: int


def _lex(line: str, lineno: int) -> list[Tok]:
    toks = []
    pos = 0
    while pos < len(line):
        m = _TOKEN.match(line, pos)
        if m is None:
            raise PolicySyntaxError(f"unexpected character {line[pos]!r}", lineno, pos + 1)
        if m.lastgroup != "ws":
            toks.append(Tok(m.lastgroup, m.group(), pos + 1))
        pos = m.end()
    return toks


def parse_number(text: str, line: int = 0, col: int = 0) -> Fixed:
    """Exact decimal literal; anything finer than the fixed-point unit is an error."""
    pct = text.endswith("%")
    try:
        num, den = Decimal(text[:-1] if pct else text).as_integer_ratio()
    except (InvalidOperation, ArithmeticError, ValueError):
        raise PolicySyntaxError(f"bad number: {text}", line, col) from None
    raw, rem = divmod(num * SCALE, den * (100 if pct else 1))
    if rem:
        raise PolicySyntaxError(f"number has more precision than the fixed-point unit: {text}", line, col)
    try:
        return Fixed(raw)
    except (ValueError, ArithmeticError):
        raise PolicySyntaxError(f"number out of range: {text}", line, col) from None


class _Line:
    """Cursor over one line's tokens."""

    def __init__(self, toks: list[Tok], lineno: int, width: int):
        self.toks = toks
        self.i = 0
        self.lineno = lineno
        self.width = width

    def peek(self) -> Tok | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def col(self) -> int:
        t = self.peek()
        return t.col if t else self.width + 1

    def error(self, msg: str, cls=PolicySyntaxError, col: int | None = None):
        return cls(msg, self.lineno, self.col() if col is None else col)

    def take(self, kind: str | None = None, text: str | None = None) -> Tok:
        t = self.peek()
        if t is None:
            want = text or kind or "token"
            raise self.error(f"expected {want}, found end of line")
        if (kind and t.kind != kind) or (text and t.text != text):
            want = repr(text) if text else kind
            raise self.error(f"expected {want}, found {t.text!r}")
        self.i += 1
        return t

    def accept(self, text: str) -> bool:
        t = self.peek()
        if t is not None and t.text == text and t.kind in ("punct", "arrow", "ident"):
            self.i += 1
            return True
        return False

    def end(self) -> None:
        t = self.peek()
        if t is not None:
            raise self.error(f"unexpected {t.text!r}")

    def int(self, nonneg: bool = True) -> int:
        t = self.take("num")
        if not re.fullmatch(r"-?\d+", t.text):
            raise PolicySyntaxError(f"expected an integer, found {t.text}", self.lineno, t.col)
        v = int(t.text)
        if nonneg and v < 0:
            raise PolicySyntaxError("expected a non-negative integer", self.lineno, t.col)
        if v > 2**62:
            raise PolicySyntaxError("integer too large", self.lineno, t.col)
        return v

    def num(self) -> Fixed:
        t = self.take("num")
        return parse_number(t.text, self.lineno, t.col)


# expressions ------------------------------------------------------------------


def _expr(cur: _Line, depth: int = 0):
    if depth > 32:
        raise cur.error("expression nested too deeply")
    t = cur.take("ident")
    if t.text in ("true", "false"):
        return ["const", t.text == "true"]
    if t.text in ("all", "any", "not"):
        cur.take("punct", "(")
        args = [_expr(cur, depth + 1)]
        while cur.accept(","):
            args.append(_expr(cur, depth + 1))
        cur.take("punct", ")")
        if t.text == "not" and len(args) != 1:
            raise PolicySyntaxError("not() takes one argument", cur.lineno, t.col)
        return [t.text, args]
    sig = PREDICATES.get(t.text)
    if sig is None:
        raise UnknownPredicate(f"unknown predicate {t.text!r}", cur.lineno, t.col)
    cur.take("punct", "(")
    args = []
    for i, typ in enumerate(sig):
        if i:
            cur.take("punct", ",")
        args.append(cur.take("ident").text if typ == "ident" else cur.num())
    cur.take("punct", ")")
    return ["pred", t.text, args]


def _value(cur: _Line):
    t = cur.peek()
    if t is not None and t.kind == "ident" and t.text == "metric":
        cur.take()
        cur.take("punct", "(")
        key = cur.take("ident").text
        cur.take("punct", ")")
        return ["metric", key]
    return cur.num()


# statements -----------------------------------------------------------------


def _params(cur: _Line) -> dict[str, tuple[Tok, Tok]]:
    out: dict[str, tuple[Tok, Tok]] = {}
    while cur.peek() is not None:
        name = cur.take("ident")
        cur.take("punct", "=")
        val = cur.take()
        if val.kind not in ("ident", "num"):
            raise PolicySyntaxError(f"bad value {val.text!r}", cur.lineno, val.col)
        if name.text in out:
            raise PolicySyntaxError(f"duplicate parameter {name.text}", cur.lineno, name.col)
        out[name.text] = (name, val)
    return out


def _trigger(cur: _Line) -> Trigger:
    kt = cur.take("ident")
    spec = TRIGGERS.get(kt.text)
    if spec is None:
        raise UnknownPredicate(f"unknown trigger {kt.text!r}", cur.lineno, kt.col)
    raw = _params(cur)
    params = {}
    for name, (nt, vt) in raw.items():
        if name not in spec:
            raise PolicySyntaxError(f"trigger {kt.text} has no parameter {name}", cur.lineno, nt.col)
        typ = spec[name][0]
        if typ == "ident":
            if vt.kind != "ident":
                raise PolicySyntaxError(f"{name} must be a name", cur.lineno, vt.col)
            params[name] = vt.text
        elif vt.kind != "num":
            raise PolicySyntaxError(f"{name} must be a number", cur.lineno, vt.col)
        elif typ == "int":
            if not re.fullmatch(r"\d+", vt.text) or int(vt.text) > 2**62:
                raise PolicySyntaxError(f"{name} must be a non-negative integer", cur.lineno, vt.col)
            params[name] = int(vt.text)
        else:
            params[name] = parse_number(vt.text, cur.lineno, vt.col)
    for name, (_, required) in spec.items():
        if required and name not in params:
            raise PolicySyntaxError(f"trigger {kt.text} needs {name}=", cur.lineno, cur.col())
    if kt.text == "time-elapsed" and params["every"] < 1:
        raise PolicySyntaxError("every must be at least 1", cur.lineno, kt.col)
    return Trigger(kt.text, params)


def _action(cur: _Line) -> ActionTemplate:
    kt = cur.take("ident")
    spec = ACTIONS.get(kt.text)
    if spec is None:
        raise UnknownPredicate(f"unknown action {kt.text!r}", cur.lineno, kt.col)
    params: dict = {}
    while cur.peek() is not None:
        if params:
            cur.accept(",")
        nt = cur.take("ident")
        if nt.text not in spec:
            raise PolicySyntaxError(f"action {kt.text} has no parameter {nt.text}", cur.lineno, nt.col)
        if nt.text in params:
            raise PolicySyntaxError(f"duplicate parameter {nt.text}", cur.lineno, nt.col)
        cur.take("punct", "=")
        if spec[nt.text] == "ident":
            params[nt.text] = cur.take("ident").text
            continue
        value = _value(cur)
        t = cur.peek()
        if t is None or t.text != "in":
            raise UnboundedAction(f"parameter {nt.text} of {kt.text} has no bound", cur.lineno, cur.col())
        cur.take()
        cur.take("punct", "[")
        lo = cur.num()
        cur.take("punct", ",")
        hi = cur.num()
        close = cur.take("punct", "]")
        if lo > hi:
            raise PolicySyntaxError(f"empty bound [{lo}, {hi}]", cur.lineno, close.col)
        params[nt.text] = BoundedParam(value, lo, hi)
    for name, kind in spec.items():
        if name not in params:
            cls = UnboundedAction if kind == "bounded" else PolicySyntaxError
            raise cls(f"action {kt.text} needs {name}", cur.lineno, cur.col())
    return ActionTemplate(kt.text, params)


def parse_policy(document: bytes | str) -> Policy:
    """Parse and validate one policy document; raises the first diagnostic."""
    diags = diagnose(document)
    if isinstance(diags, Policy):
        return diags
    raise diags[0]


def diagnose(document: bytes | str) -> Policy | list[PolicyError]:
    """Return the parsed policy, or every diagnostic found (one per bad line)."""
    if isinstance(document, bytes):
        try:
            document = document.decode("utf-8")
        except UnicodeDecodeError as exc:
            line = document[: exc.start].count(b"\n") + 1
            col = exc.start - (document.rfind(b"\n", 0, exc.start) + 1) + 1
            return [PolicySyntaxError("document is not UTF-8", line, col)]
    errors: list[PolicyError] = []
    state: dict = {"triggers": [], "actions": [], "exceptions": {}, "limits": {}}
    lines = document.split("\n")
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(lines, 1):
        text = raw.split("#", 1)[0].rstrip("\r")
        try:
            toks = _lex(text, lineno)
            if not toks:
                continue
            cur = _Line(toks, lineno, len(text))
            head = cur.take("ident")
            kw = head.text
            if kw in ("policy", "version", "expiry", "timelock", "condition") and kw in seen:
                raise PolicySyntaxError(f"duplicate {kw} statement (first on line {seen[kw]})", lineno, head.col)
            seen.setdefault(kw, lineno)
            if kw == "policy":
                state["policy_id"] = cur.take("ident").text
            elif kw == "version":
                state["version"] = cur.int()
            elif kw == "expiry":
                state["expiry"] = cur.int()
            elif kw == "timelock":
                p = _params(cur)
                for name, (nt, vt) in p.items():
                    if name not in ("delay", "window"):
                        raise PolicySyntaxError(f"timelock has no parameter {name}", lineno, nt.col)
                    if vt.kind != "num" or not re.fullmatch(r"\d+", vt.text) or int(vt.text) > 2**40:
                        raise PolicySyntaxError(f"{name} must be a non-negative integer", lineno, vt.col)
                    state[name] = int(vt.text)
            elif kw == "trigger":
                state["triggers"].append(_trigger(cur))
            elif kw == "condition":
                state["condition"] = _expr(cur)
            elif kw == "action":
                state["actions"].append(_action(cur))
            elif kw == "limit":
                which = cur.take("ident")
                if which.text in ("per-action", "per-epoch"):
                    v = cur.num()
                    if v < ZERO:
                        raise PolicySyntaxError("limits are non-negative", lineno, which.col)
                elif which.text == "rate":
                    v = cur.int()
                else:
                    raise PolicySyntaxError(f"unknown limit {which.text!r}", lineno, which.col)
                if which.text in state["limits"]:
                    raise PolicySyntaxError(f"duplicate limit {which.text}", lineno, which.col)
                state["limits"][which.text] = v
            elif kw == "exception":
                ev = cur.take("ident")
                if ev.text not in EXCEPTION_EVENTS:
                    raise PolicySyntaxError(f"unknown exception {ev.text!r}", lineno, ev.col)
                cur.take("arrow")
                resp = cur.take("ident")
                if resp.text not in EXCEPTION_RESPONSES:
                    raise PolicySyntaxError(f"unknown response {resp.text!r}", lineno, resp.col)
                state["exceptions"][ev.text] = resp.text
            else:
                raise PolicySyntaxError(f"unknown statement {kw!r}", lineno, head.col)
            cur.end()
        except PolicyError as exc:
            errors.append(exc)
    eof = (len(lines) + 1, 1)
    if "policy_id" not in state and not any(e.line == seen.get("policy") for e in errors):
        errors.append(PolicySyntaxError("missing 'policy <id>' statement", *eof))
    if "expiry" not in state and "expiry" not in seen:
        errors.append(ExpiryMissing("policies must declare 'expiry <epoch>'", *eof))
    if not state["triggers"] and "trigger" not in seen:
        errors.append(PolicySyntaxError("at least one trigger is required", *eof))
    if not state["actions"] and "action" not in seen:
        errors.append(PolicySyntaxError("at least one action is required", *eof))
    if errors:
        return errors
    lim = state["limits"]
    return Policy(
        policy_id=state["policy_id"],
        version=state.get("version", 1),
        expiry=state["expiry"],
        delay=state.get("delay", 1),
        window=state.get("window", 2),
        triggers=tuple(state["triggers"]),
        condition=state.get("condition", ["const", True]),
        actions=tuple(state["actions"]),
        limits=Limits(lim.get("per-action"), lim.get("per-epoch"), lim.get("rate")),
        exceptions=dict(state["exceptions"]),
    )
