"""Random policy documents, worlds and engine scenarios for the policy tests."""

from __future__ import annotations

import random

from vgov.fixed import SCALE, ZERO, Fixed
from vgov.policy import EXECUTED, VETOED, PolicyEngine, PolicyWorld
from vgov.policy_lang import BoundedParam, parse_policy
from vgov.treasury import PortfolioState

CLASSES = ("stable", "defi", "strategic")
METRICS = ("budget", "demand", "price")
FLAGS = ("settled", "healthy")


def _num(rng: random.Random, hi: int = 100) -> str:
    return str(rng.randint(0, hi))


def _expr(rng: random.Random, depth: int = 0) -> str:
    r = rng.random()
    if depth > 2 or r < 0.5:
        pick = rng.randrange(5)
        if pick == 0:
            return f"flag({rng.choice(FLAGS)})"
        if pick == 1:
            return f"at_most({rng.choice(METRICS)}, {_num(rng)})"
        if pick == 2:
            return f"at_least({rng.choice(METRICS)}, {_num(rng)})"
        if pick == 3:
            return f"drift_above({rng.randint(0, 20)}%)"
        return rng.choice(["true", "false"])
    if r < 0.65:
        return f"not({_expr(rng, depth + 1)})"
    op = rng.choice(["all", "any"])
    return f"{op}(" + ", ".join(_expr(rng, depth + 1) for _ in range(rng.randint(1, 3))) + ")"


def _bounded(rng: random.Random) -> str:
    lo = rng.randint(0, 30)
    hi = lo + rng.randint(0, 70)
    value = f"metric({rng.choice(METRICS)})" if rng.random() < 0.5 else str(rng.randint(0, 120))
    return f"{value} in [{lo}, {hi}]"


def random_policy_text(rng: random.Random, pid: str = "p") -> str:
    lines = [f"policy {pid}", f"version {rng.randint(1, 3)}", f"expiry {rng.randint(2, 12)}"]
    lines.append(f"timelock delay={rng.randint(0, 3)} window={rng.randint(0, 3)}")
    for _ in range(rng.randint(1, 2)):
        lines.append(rng.choice([
            f"trigger time-elapsed every={rng.randint(1, 3)} start={rng.randint(0, 2)}",
            f"trigger drift-exceeds threshold={rng.randint(0, 20)}%",
            "trigger proposal-submitted",
            "trigger proposal-submitted tag=infra",
            "trigger attestation-changed schema=trust",
        ]))
    if rng.random() < 0.7:
        lines.append(f"condition {_expr(rng)}")
    for _ in range(rng.randint(1, 3)):
        kind = rng.choice(["rebalance", "transfer", "transfer", "set-param"])
        if kind == "rebalance":
            lines.append(f"action rebalance max_move={_bounded(rng)}")
        elif kind == "transfer":
            lines.append(f"action transfer to={rng.choice(['grants', 'ops'])} amount={_bounded(rng)}")
        else:
            lines.append(f"action set-param name={rng.choice(['fee', 'rate'])} value={_bounded(rng)}")
    if rng.random() < 0.5:
        lines.append(f"limit per-action {rng.randint(0, 60)}")
    if rng.random() < 0.5:
        lines.append(f"limit per-epoch {rng.randint(0, 100)}")
    if rng.random() < 0.3:
        lines.append(f"limit rate {rng.randint(0, 3)}")
    for ev in ("clipped", "partial"):
        if rng.random() < 0.3:
            lines.append(f"exception {ev} -> {rng.choice(['escalate', 'pause'])}")
    rng.shuffle(lines)
    return "\n".join(lines) + "\n"


def random_world(rng: random.Random, epoch: int) -> PolicyWorld:
    portfolio = None
    if rng.random() < 0.9:
        holdings = {c: Fixed.from_int(rng.randint(0, 100)) for c in CLASSES}
        if all(v == ZERO for v in holdings.values()):
            holdings["stable"] = Fixed.from_int(1)
        portfolio = PortfolioState(holdings, {"stable": Fixed(300_000_000), "defi": Fixed(500_000_000), "strategic": Fixed(200_000_000)})
    metrics = {m: Fixed.from_int(rng.randint(0, 120)) for m in METRICS if rng.random() < 0.9}
    flags = {f: rng.random() < 0.6 for f in FLAGS if rng.random() < 0.9}
    props = tuple((f"P{i}", tuple(rng.sample(["infra", "research"], rng.randint(0, 2)))) for i in range(rng.randint(0, 2)))
    changes = ("trust",) if rng.random() < 0.4 else ()
    return PolicyWorld(epoch, portfolio, metrics, flags, props, changes)


def bound_violations(plan, policy) -> list[str]:
    """Check a plan against the policy text's declared bounds, without using the plan's own bound records."""
    out = []
    lim = policy.limits
    templates = {t.kind: [] for t in policy.actions}
    for t in policy.actions:
        templates[t.kind].append(t)
    rebalance_cap = None
    if "rebalance" in templates:
        # each rebalance template moves at most its own bound, capped per action
        caps = [t.params["max_move"].hi for t in templates["rebalance"]]
        if lim.per_action is not None:
            caps = [min(c, lim.per_action) for c in caps]
        rebalance_cap = sum(caps, ZERO)
    moved = ZERO
    total = ZERO
    for a in plan.actions:
        if a.kind == "transfer" and "from" in a.params:
            amt = a.params["amount"]
            if amt <= ZERO:
                out.append("non-positive rebalance transfer")
            moved = moved + amt
            total = total + amt
            continue
        declared = [t for t in templates.get(a.kind, ()) if all(a.params.get(k) == v for k, v in t.params.items() if isinstance(v, str))]
        if not declared:
            out.append(f"undeclared action {a.kind}")
            continue
        for name, p in a.params.items():
            if isinstance(p, Fixed):
                bounds = [t.params[name] for t in declared if isinstance(t.params.get(name), BoundedParam)]
                if not any(b.lo <= p <= b.hi for b in bounds):
                    out.append(f"{a.kind}.{name}={p} outside declared bounds")
        if a.kind == "transfer":
            amt = a.params["amount"]
            if lim.per_action is not None and amt > lim.per_action:
                out.append("per-action cap exceeded")
            total = total + amt
    if rebalance_cap is not None and moved > rebalance_cap:
        out.append("rebalance moved more than its bound")
    if lim.per_epoch is not None and total > lim.per_epoch:
        out.append("per-epoch cap exceeded")
    if lim.rate is not None and len(plan.actions) > lim.rate:
        out.append("rate limit exceeded")
    return out


def run_policy_case(seed: int, epochs: int = 8, authority: bytes | None = None, snapshot=None) -> dict:
    """One randomized policy/world case driven through the engine with random vetoes and pauses."""
    rng = random.Random(seed)
    policies = [parse_policy(random_policy_text(rng, f"p{i}")) for i in range(rng.randint(1, 3))]
    engine = PolicyEngine(policies, snapshot=snapshot)
    worlds = []
    vetoed_at = {}
    report = {"violations": [], "early": 0, "vetoed_executed": 0, "replay_failures": 0, "plans": 0, "executed": 0}
    for epoch in range(epochs):
        if authority is not None and rng.random() < 0.2:
            pid = rng.choice(policies).policy_id
            (engine.pause if rng.random() < 0.5 else engine.unpause)(pid, authority, epoch)
        world = random_world(rng, epoch)
        worlds.append(world)
        executed, plans = engine.run_epoch(world)
        report["plans"] += len(plans)
        for p in executed:
            report["executed"] += 1
            if epoch < p.timelock[0]:
                report["early"] += 1
            if p.plan_id in vetoed_at:
                report["vetoed_executed"] += 1
            report["violations"] += bound_violations(p, engine.policies[p.policy_id])
        if authority is not None:
            for pid, plan in sorted(engine.plans.items()):
                if plan.status == "planned" and plan.timelock[0] <= epoch + 1 <= plan.timelock[1] and rng.random() < 0.2:
                    engine.veto(pid, authority, epoch + 1)
                    vetoed_at[pid] = epoch
    for m, w in zip(engine.manifests, worlds):
        try:
            engine.replay(m, w, list(engine.policies.values()))
        except Exception:  # noqa: BLE001 - any failure counts
            report["replay_failures"] += 1
    for pid in vetoed_at:
        if engine.plans[pid].status != VETOED:
            report["vetoed_executed"] += 1
    report["executed"] = sum(1 for p in engine.plans.values() if p.status == EXECUTED)
    report["vetoes"] = len(vetoed_at)
    return report


__all__ = ["random_policy_text", "random_world", "bound_violations", "run_policy_case", "SCALE"]
