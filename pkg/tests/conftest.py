"""Shared fixtures and graph builders for the test suite."""

from __future__ import annotations

import functools
import hashlib
import random

import pytest

from vgov.attestation import Attestation, GraphSnapshot
from vgov.fixed import ONE, SCALE, Fixed


def node(i: int) -> bytes:
    return hashlib.sha256(b"node:%d" % i).digest()


def raw_snapshot(
    n: int,
    edges: dict | list,
    balances: dict | None = None,
    schema: str = "trust",
    extra: list | None = None,
    snapshot_id: int = 1,
) -> GraphSnapshot:
    """Snapshot over ``node(0..n-1)`` built directly, skipping signatures.

    ``edges`` maps (u, v) -> Fixed confidence, or is a list of (u, v) pairs at
    confidence one. ``extra`` holds (u, v, schema) attestations.
    """
    if not isinstance(edges, dict):
        edges = {e: ONE for e in edges}
    atts = []
    items = [(u, v, schema, c) for (u, v), c in edges.items()]
    items += [(u, v, s, ONE) for u, v, s in (extra or [])]
    for u, v, s, c in items:
        uid = hashlib.sha256(b"att:%d:%d:" % (u, v) + s.encode()).digest()
        atts.append(Attestation(uid, s, node(u), node(v), c, {}, 1, None, b""))
    atts.sort(key=lambda a: a.uid)
    idents = {node(i): hashlib.sha256(b"pk:%d" % i).digest() for i in range(n)}
    bal = {node(i): Fixed(b) for i, b in (balances or {}).items()}
    return GraphSnapshot(snapshot_id, tuple(atts), dict(sorted(idents.items())), dict(sorted(bal.items())))


def random_edges(rng: random.Random, n: int, p: float, conf: bool = True) -> dict:
    out = {}
    for u in range(n):
        for v in range(n):
            if u != v and rng.random() < p:
                out[(u, v)] = Fixed(rng.randrange(SCALE // 10, SCALE + 1)) if conf else ONE
    return out


@pytest.fixture(scope="session")
def demo_bundle():
    from importlib import resources
    import json

    from vgov.casestudy import run_case_study

    doc = json.loads(resources.files("vgov").joinpath("data/demo_scenario.json").read_text())
    return run_case_study(doc)


def random_delegations(
    rng: random.Random,
    n: int,
    max_depth: int = 20,
    cycle_rate: float = 0.1,
    constraints: bool = True,
    topics: tuple = ("global", "infra"),
) -> tuple[GraphSnapshot, list]:
    """Layered delegation instance with depth at most ``max_depth`` plus injected back-edges."""
    from vgov.delegation import DelegationRecord

    level = [rng.randint(0, max_depth) for _ in range(n)]
    order = sorted(range(n), key=lambda i: level[i])
    first = {}  # level -> index in ``order`` of its first member
    for pos, i in enumerate(order):
        first.setdefault(level[i], pos)
    by_level: dict[int, list[int]] = {}
    for i in order:
        by_level.setdefault(level[i], []).append(i)
    att_edges = {}
    if constraints and n > 1:
        for _ in range(3 * n):
            u, v = rng.randrange(n), rng.randrange(n)
            if u != v:
                att_edges[(u, v)] = ONE
    extra = [(rng.randrange(n), rng.randrange(n), "expertise") for _ in range(n // 4)]
    extra = [(u, v, s) for u, v, s in extra if u != v]
    snap = raw_snapshot(n, att_edges, {i: rng.randrange(0, 1000) * SCALE for i in range(n)}, extra=extra)
    recs = []
    for i in range(n):
        for scope in topics:
            if rng.random() < 0.3 and scope != "global":
                continue
            if rng.random() < cycle_rate and level[i] < max_depth:
                # any deeper identity: a back-edge that may close a cycle
                start = next((first[lv] for lv in range(level[i] + 1, max_depth + 1) if lv in first), n)
                j = order[rng.randrange(start, n)] if start < n else None
            elif level[i] > 0 and by_level.get(level[i] - 1):
                j = rng.choice(by_level[level[i] - 1])
            else:
                j = None
            if j is None or rng.random() < 0.2:
                continue
            kw = {}
            if constraints and rng.random() < 0.2:
                kw["max_distance"] = rng.randint(1, 4)
            if constraints and rng.random() < 0.1:
                kw["required_schema"] = "expertise"
            recs.append(DelegationRecord(node(i), node(j), scope, **kw))
    return snap, recs


@functools.lru_cache(maxsize=None)
def sim_inputs(n: int = 20, seed: int = 0):
    from vgov.delegation import ProposalRef
    from vgov.demo import demo_delegations, demo_snapshot, demo_trust_config

    return demo_snapshot(n, seed), demo_delegations(n, seed), ProposalRef("p1"), demo_trust_config(n, seed)


def sim_world(
    quorum: tuple = (3, 5),
    behaviors: dict | None = None,
    seed: int = 0,
    kind: str = "delegation-resolve",
    reward: int = 50,
    deadline: int = 2,
    modes: dict | None = None,
    params: dict | None = None,
    shared_execution: bool = True,
    challenge_window: int = 2,
):
    """World with ``quorum[1]`` operators (op-1..), one registered task, not yet run."""
    from vgov.sim import TaskRecord, World, register_task

    snap, dels, prop, tcfg = sim_inputs()
    world = World(seed, Fixed.from_int(1000), shared_execution=shared_execution)
    behaviors = behaviors or {}
    for i in range(1, quorum[1] + 1):
        op = f"op-{i}"
        world.add_operator(op, Fixed.from_int(100), (modes or {}).get(op, "economic"), behaviors.get(op, "honest"), (params or {}).get(op))
    if kind == "delegation-resolve":
        inputs = (world.pin(snap), world.pin(dels), world.pin(prop))
    else:
        inputs = (world.pin(snap), world.pin(tcfg))
    task = TaskRecord(kind, inputs, quorum[0], quorum[1], deadline, Fixed.from_int(reward), challenge_window=challenge_window)
    tid = register_task(world, task)
    world.scenario_tasks.append(tid)
    return world, tid
