"""Epoch evaluation of parsed policies into timelocked, bounded action plans.

:func:`evaluate_epoch` is a pure function of (world, policies, epoch,
paused set); :class:`PolicyEngine` wraps it with plan state, pause and
veto powers, an append-only audit log and per-epoch replay manifests.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Sequence

from vgov import codec
from vgov.attestation import GraphSnapshot
from vgov.fixed import ZERO, Fixed, sum_by_key
from vgov.merkle import EMPTY_ROOT, MerkleTree
from vgov.policy_lang import AMOUNT_PARAMS, BoundedParam, Policy
from vgov.treasury import PortfolioState, Transfer, apply_transfers, plan_rebalance

PLANNED = "planned"
EXECUTED = "executed"
VETOED = "vetoed"
EXPIRED = "expired"
PAUSE_SCHEMA = "pause-authority"


class PolicyRuntimeError(Exception):
    pass


class NotAuthorized(PolicyRuntimeError):
    pass


class WindowClosed(PolicyRuntimeError):
    pass


class TimelockNotOpen(PolicyRuntimeError):
    pass


class NotPlanned(PolicyRuntimeError):
    pass


class UnknownPlan(PolicyRuntimeError):
    pass


class ReplayMismatch(PolicyRuntimeError):
    pass


class _Missing(Exception):
    def __init__(self, what: str):
        self.what = what


@codec.record("PolicyWorld")
@dataclass(frozen=True)
class PolicyWorld:
    """Everything a policy may look at in one epoch."""

    epoch: int
    portfolio: PortfolioState | None = None
    metrics: dict = field(default_factory=dict)  # name -> Fixed
    flags: dict = field(default_factory=dict)  # name -> bool
    proposals_submitted: tuple = ()  # (proposal id, tags) pairs
    attestation_changes: tuple = ()  # schema ids with changes this epoch

    @cached_property
    def digest(self) -> bytes:
        return codec.digest(self)


@codec.record("PlannedAction")
@dataclass(frozen=True)
class PlannedAction:
    kind: str
    params: dict
    bounds: dict  # param -> (lo, hi) it was clipped into


@codec.record("ActionPlan")
@dataclass(frozen=True)
class ActionPlan:
    plan_id: bytes
    policy_id: str
    version: int
    epoch: int
    actions: tuple
    justification: dict
    timelock: tuple  # (open, close)
    flags: tuple
    status: str = PLANNED


@codec.record("PolicyEvent")
@dataclass(frozen=True)
class PolicyEvent:
    epoch: int
    kind: str
    policy_id: str | None
    data: dict


@codec.record("EpochManifest")
@dataclass(frozen=True)
class EpochManifest:
    epoch: int
    world_digest: bytes
    policies: tuple  # (policy id, digest)
    paused: tuple
    plans_digest: bytes
    events_digest: bytes


# evaluation -----------------------------------------------------------------


def _trigger_fires(trig, world: PolicyWorld, epoch: int) -> bool:
    p = trig.params
    if trig.kind == "time-elapsed":
        start = p.get("start", 0)
        return epoch >= start and (epoch - start) % p["every"] == 0
    if trig.kind == "drift-exceeds":
        if world.portfolio is None:
            raise _Missing("portfolio")
        return world.portfolio.drift > p["threshold"]
    if trig.kind == "proposal-submitted":
        tag = p.get("tag")
        return any(tag is None or tag in tags for _, tags in world.proposals_submitted)
    if trig.kind == "attestation-changed":
        schema = p.get("schema")
        return any(schema is None or schema == s for s in world.attestation_changes)
    raise _Missing(f"trigger {trig.kind}")


def _metric(world: PolicyWorld, key: str) -> Fixed:
    v = world.metrics.get(key)
    if not isinstance(v, Fixed):
        raise _Missing(f"metric {key}")
    return v


def _eval(expr, world: PolicyWorld, trace: list) -> bool:
    op = expr[0]
    if op == "const":
        return expr[1]
    if op in ("all", "any"):
        # evaluate every branch so missing data is never masked by short-circuiting
        vals = [_eval(e, world, trace) for e in expr[1]]
        return all(vals) if op == "all" else any(vals)
    if op == "not":
        return not _eval(expr[1][0], world, trace)
    _, name, args = expr
    if name == "flag":
        v = world.flags.get(args[0])
        if not isinstance(v, bool):
            raise _Missing(f"flag {args[0]}")
        res = v
    elif name == "at_most":
        res = _metric(world, args[0]) <= args[1]
    elif name == "at_least":
        res = _metric(world, args[0]) >= args[1]
    elif name == "drift_above":
        if world.portfolio is None:
            raise _Missing("portfolio")
        res = world.portfolio.drift > args[0]
    else:
        raise _Missing(f"predicate {name}")
    trace.append([name, list(args), res])
    return res


def _resolve(param: BoundedParam, world: PolicyWorld) -> tuple[Fixed, bool]:
    v = param.value
    if isinstance(v, list):
        v = _metric(world, v[1])
    clipped = v.clamp(param.lo, param.hi)
    return clipped, clipped != v


def _build_actions(policy: Policy, world: PolicyWorld) -> tuple[list[PlannedAction], list[str]]:
    actions: list[PlannedAction] = []
    flags: list[str] = []
    lim = policy.limits
    for tmpl in policy.actions:
        params: dict = {}
        bounds: dict = {}
        for name in sorted(tmpl.params):
            p = tmpl.params[name]
            if isinstance(p, BoundedParam):
                v, was_clipped = _resolve(p, world)
                if was_clipped:
                    flags.append(f"clipped:{tmpl.kind}.{name}")
                params[name] = v
                bounds[name] = (p.lo, p.hi)
            else:
                params[name] = p
        if tmpl.kind == "rebalance":
            if world.portfolio is None:
                raise _Missing("portfolio")
            cap = params["max_move"]
            if lim.per_action is not None and cap > lim.per_action:
                cap = lim.per_action
                flags.append("clipped:per-action")
            plan = plan_rebalance(world.portfolio, cap)
            if plan.partial:
                flags.append("partial")
            hi = tmpl.params["max_move"].hi
            for t in plan.transfers:
                actions.append(PlannedAction("transfer", {"from": t.source, "to": t.sink, "amount": t.amount}, {"amount": (ZERO, min(hi, cap))}))
            continue
        amount_key = AMOUNT_PARAMS.get(tmpl.kind)
        if amount_key and lim.per_action is not None and params[amount_key] > lim.per_action:
            if lim.per_action < bounds[amount_key][0]:
                flags.append(f"dropped:{tmpl.kind}")
                continue
            params[amount_key] = lim.per_action
            flags.append("clipped:per-action")
        actions.append(PlannedAction(tmpl.kind, params, bounds))

    if lim.per_epoch is not None:
        budget = lim.per_epoch
        capped = []
        for a in actions:
            if a.kind == "transfer":
                amt = a.params["amount"]
                if amt > budget:
                    amt = budget
                    if amt < a.bounds["amount"][0] or amt == ZERO:
                        flags.append("dropped:per-epoch")
                        continue
                    flags.append("clipped:per-epoch")
                    a = replace(a, params={**a.params, "amount": amt})
                budget = budget - amt
            capped.append(a)
        actions = capped
    if lim.rate is not None and len(actions) > lim.rate:
        actions = actions[: lim.rate]
        flags.append("rate-limited")
    return actions, sorted(set(flags))


def _plan_id(body: dict) -> bytes:
    return codec.digest(body)


def evaluate_policy(policy: Policy, world: PolicyWorld, epoch: int, events: list) -> ActionPlan | None:
    if epoch > policy.expiry:
        return None
    try:
        fired = [t.kind for t in policy.triggers if _trigger_fires(t, world, epoch)]
        if not fired:
            return None
        trace: list = []
        if not _eval(policy.condition, world, trace):
            return None
        actions, flags = _build_actions(policy, world)
    except _Missing as m:
        events.append(PolicyEvent(epoch, "escalation", policy.policy_id, {"reason": "missing-data", "missing": m.what, "paused": True}))
        return None
    for f in flags:
        kind = "partial" if f == "partial" else "clipped"
        resp = policy.exceptions.get(kind)
        if resp is not None:
            events.append(PolicyEvent(epoch, "escalation", policy.policy_id, {"reason": f, "paused": resp == "pause"}))
            if resp == "pause":
                return None
    if not actions:
        return None
    timelock = (epoch + policy.delay, epoch + policy.delay + policy.window)
    body = {
        "policy": policy.policy_id,
        "version": policy.version,
        "epoch": epoch,
        "actions": actions,
        "justification": {"world": world.digest, "triggers": fired, "conditions": trace},
        "timelock": list(timelock),
        "flags": flags,
    }
    return ActionPlan(
        plan_id=_plan_id(body),
        policy_id=policy.policy_id,
        version=policy.version,
        epoch=epoch,
        actions=tuple(actions),
        justification=body["justification"],
        timelock=timelock,
        flags=tuple(flags),
    )


def evaluate_epoch(
    world: PolicyWorld,
    policies: Iterable[Policy],
    epoch: int | None = None,
    paused: Iterable[str] = (),
    events: list | None = None,
) -> list[ActionPlan]:
    """Plans for every active, unpaused policy whose trigger fires and condition holds.

    Missing inputs never raise: the policy sits the epoch out and an
    escalation event is appended to ``events``.
    """
    epoch = world.epoch if epoch is None else epoch
    paused = frozenset(paused)
    sink = events if events is not None else []
    plans = []
    for policy in sorted(policies, key=lambda p: (p.policy_id, p.version)):
        if policy.policy_id in paused:
            continue
        plan = evaluate_policy(policy, world, epoch, sink)
        if plan is not None:
            plans.append(plan)
    return plans


def plans_root(plans: Sequence[ActionPlan]) -> bytes:
    if not plans:
        return EMPTY_ROOT
    return MerkleTree([(p.plan_id, codec.encode(p)) for p in plans]).root


def evaluation_root(policies, world: PolicyWorld) -> bytes:
    """Merkle root of the plans ``policies`` emit for ``world``; the service task output."""
    if isinstance(policies, Policy):
        policies = [policies]
    return plans_root(evaluate_epoch(world, policies))


def shadow_diff(world: PolicyWorld, active: Policy, candidate: Policy, epoch: int | None = None) -> dict:
    """Compare what a candidate version would plan against the active one; nothing executes."""
    a = evaluate_epoch(world, [active], epoch)
    b = evaluate_epoch(world, [candidate], epoch)

    def key(plans):
        return sorted(codec.encode(x).hex() for p in plans for x in p.actions)

    ka, kb = key(a), key(b)
    return {
        "active": [codec.decode(bytes.fromhex(x)) for x in ka],
        "shadow": [codec.decode(bytes.fromhex(x)) for x in kb],
        "only_active": [codec.decode(bytes.fromhex(x)) for x in sorted(set(ka) - set(kb))],
        "only_shadow": [codec.decode(bytes.fromhex(x)) for x in sorted(set(kb) - set(ka))],
        "flags": {"active": sorted({f for p in a for f in p.flags}), "shadow": sorted({f for p in b for f in p.flags})},
        "identical": ka == kb,
    }


def apply_plan(portfolio: PortfolioState, plan: ActionPlan) -> PortfolioState:
    transfers = [a for a in plan.actions if a.kind == "transfer" and "from" in a.params]
    return apply_transfers(portfolio, [Transfer(a.params["from"], a.params["to"], a.params["amount"]) for a in transfers])


# engine -----------------------------------------------------------------------


class PolicyEngine:
    """Stateful runner: plan registry, pause/veto powers, audit log, replay manifests.

    Plans execute automatically at the close of their timelock unless
    vetoed or their policy is paused; :meth:`execute` runs one earlier,
    any time inside ``[open, close]``.
    """

    def __init__(self, policies: Iterable[Policy] = (), snapshot: GraphSnapshot | None = None, authority_schema: str = PAUSE_SCHEMA):
        self.policies: dict[str, Policy] = {}
        for p in policies:
            self.install(p)
        self.snapshot = snapshot
        self.authority_schema = authority_schema
        self.plans: dict[bytes, ActionPlan] = {}
        self.paused: set[str] = set()
        self.audit: list[PolicyEvent] = []
        self.manifests: list[EpochManifest] = []
        self.executed: list[tuple[int, bytes]] = []

    def install(self, policy: Policy) -> None:
        self.policies[policy.policy_id] = policy

    def _log(self, epoch: int, kind: str, policy_id: str | None, data: dict) -> None:
        self.audit.append(PolicyEvent(epoch, kind, policy_id, data))

    def _authorize(self, authority: bytes) -> None:
        if self.snapshot is None or not self.snapshot.holds_schema(authority, self.authority_schema):
            raise NotAuthorized(f"{bytes(authority).hex()[:12]} holds no {self.authority_schema} attestation")

    # powers -----------------------------------------------------------
    def pause(self, policy_id: str, authority: bytes, epoch: int) -> dict:
        self._authorize(authority)
        if policy_id not in self.policies:
            raise PolicyRuntimeError(f"no policy {policy_id!r}")
        self.paused.add(policy_id)
        self._log(epoch, "pause", policy_id, {"authority": authority})
        return {"policy": policy_id, "paused": True, "epoch": epoch}

    def unpause(self, policy_id: str, authority: bytes, epoch: int) -> dict:
        self._authorize(authority)
        self.paused.discard(policy_id)
        self._log(epoch, "unpause", policy_id, {"authority": authority})
        return {"policy": policy_id, "paused": False, "epoch": epoch}

    def veto(self, plan_id: bytes, authority: bytes, epoch: int) -> dict:
        self._authorize(authority)
        plan = self.plans.get(plan_id)
        if plan is None:
            raise UnknownPlan(plan_id.hex())
        if epoch > plan.timelock[1] or plan.status != PLANNED:
            raise WindowClosed(f"plan is {plan.status}; window closed at epoch {plan.timelock[1]}")
        self.plans[plan_id] = replace(plan, status=VETOED)
        self._log(epoch, "veto", plan.policy_id, {"plan": plan_id, "authority": authority})
        return {"plan": plan_id, "status": VETOED, "epoch": epoch}

    def execute(self, plan_id: bytes, epoch: int) -> ActionPlan:
        plan = self.plans.get(plan_id)
        if plan is None:
            raise UnknownPlan(plan_id.hex())
        if plan.status != PLANNED:
            raise NotPlanned(f"plan is {plan.status}")
        lo, hi = plan.timelock
        if epoch < lo:
            raise TimelockNotOpen(f"opens at epoch {lo}")
        if epoch > hi:
            raise WindowClosed(f"closed at epoch {hi}")
        if plan.policy_id in self.paused:
            raise PolicyRuntimeError(f"policy {plan.policy_id} is paused")
        done = replace(plan, status=EXECUTED)
        self.plans[plan_id] = done
        self.executed.append((epoch, plan_id))
        self._log(epoch, "execute", plan.policy_id, {"plan": plan_id})
        return done

    # epochs -----------------------------------------------------------
    def _settle_due(self, epoch: int) -> list[ActionPlan]:
        done = []
        for pid in sorted(self.plans):
            plan = self.plans[pid]
            if plan.status != PLANNED:
                continue
            if epoch > plan.timelock[1]:
                self.plans[pid] = replace(plan, status=EXPIRED)
                self._log(epoch, "expire", plan.policy_id, {"plan": pid})
            elif epoch == plan.timelock[1] and plan.policy_id not in self.paused:
                done.append(self.execute(pid, epoch))
        return done

    def run_epoch(self, world: PolicyWorld) -> tuple[list[ActionPlan], list[ActionPlan]]:
        """Execute plans whose window closes now, then evaluate. Returns (executed, new plans)."""
        epoch = world.epoch
        executed = self._settle_due(epoch)
        events: list[PolicyEvent] = []
        policies = [self.policies[k] for k in sorted(self.policies)]
        paused = tuple(sorted(self.paused))
        plans = evaluate_epoch(world, policies, epoch, paused, events)
        for e in events:
            self.audit.append(e)
        for p in plans:
            self.plans[p.plan_id] = p
            self._log(epoch, "plan", p.policy_id, {"plan": p.plan_id, "timelock": list(p.timelock), "flags": list(p.flags)})
        self.manifests.append(
            EpochManifest(
                epoch=epoch,
                world_digest=world.digest,
                policies=tuple((p.policy_id, p.digest) for p in policies),
                paused=paused,
                plans_digest=codec.digest(plans),
                events_digest=codec.digest(events),
            )
        )
        return executed, plans

    def replay(self, manifest: EpochManifest, world: PolicyWorld, policies: Iterable[Policy] | None = None) -> list[ActionPlan]:
        """Re-evaluate a logged epoch; raises :class:`ReplayMismatch` if anything differs."""
        if world.digest != manifest.world_digest:
            raise ReplayMismatch("world state does not match the manifest digest")
        pols = list(policies) if policies is not None else [self.policies[k] for k, _ in manifest.policies]
        if tuple((p.policy_id, p.digest) for p in sorted(pols, key=lambda p: p.policy_id)) != manifest.policies:
            raise ReplayMismatch("policy set differs from the manifest")
        events: list = []
        plans = evaluate_epoch(world, pols, manifest.epoch, manifest.paused, events)
        if codec.digest(plans) != manifest.plans_digest or codec.digest(events) != manifest.events_digest:
            raise ReplayMismatch(f"epoch {manifest.epoch} does not reproduce")
        return plans


def executed_within_bounds(plan: ActionPlan, policy: Policy) -> bool:
    """Every numeric parameter sits inside the declared template bound and caps."""
    lim = policy.limits
    total = ZERO
    for a in plan.actions:
        for name, (lo, hi) in a.bounds.items():
            if not lo <= a.params[name] <= hi:
                return False
        amt = a.params.get("amount") if a.kind == "transfer" else None
        if amt is not None:
            if lim.per_action is not None and amt > lim.per_action:
                return False
            total = total + amt
    if lim.per_epoch is not None and total > lim.per_epoch:
        return False
    return lim.rate is None or len(plan.actions) <= lim.rate


def sum_amounts(plan: ActionPlan) -> Fixed:
    return sum_by_key({i: a.params.get("amount", ZERO) for i, a in enumerate(plan.actions) if a.kind == "transfer"})
