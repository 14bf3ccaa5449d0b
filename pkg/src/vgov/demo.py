"""Seeded generators for demo worlds, benchmark workloads and the pilot fixture.

Every generator is a pure function of its arguments; keys come from
``Keypair.from_seed`` so the same seed gives the same bytes on any machine.
"""

from __future__ import annotations

import random
from functools import lru_cache
from importlib import resources

from vgov import codec
from vgov.attestation import AttestationStore, GraphSnapshot, Keypair, Schema, make_attestation
from vgov.delegation import DelegationRecord, make_delegation
from vgov.fixed import ONE, SCALE, Fixed
from vgov.pipeline import Ballot, PipelineConfig, make_ballot
from vgov.proposal import Proposal
from vgov.trust import TrustConfig

SCHEMAS = (
    Schema("trust", {}, True),
    Schema("expertise", {"domain": "str"}, True),
    Schema("contribution", {"kind": "str"}, True),
    Schema("pause-authority", {}, True),
)
DOMAINS = ("infra", "research", "community", "security")
CRITERIA = ("feasibility", "impact", "alignment", "risk")
THEMES = {
    "infrastructure": ("node", "client", "infra", "tooling"),
    "research": ("research", "study", "analysis"),
    "community": ("community", "education", "events"),
    "security": ("audit", "security", "bug"),
}
PILOT_SEEDS = 3
PILOT_SIZE = 65


@lru_cache(maxsize=None)
def demo_keys(n: int, seed: int = 0) -> tuple[Keypair, ...]:
    return tuple(Keypair.from_seed(f"demo:{seed}:{i}") for i in range(n))


def demo_store(n: int = 20, seed: int = 0, out_degree: int = 3) -> AttestationStore:
    """A store with preferential-attachment trust edges, expertise claims and balances."""
    rng = random.Random(seed)
    keys = demo_keys(n, seed)
    store = AttestationStore()
    for s in SCHEMAS:
        store.register_schema(s)
    for k in keys:
        store.register_identity(k.public_key)
    indeg = [1] * n
    for i, k in enumerate(keys):
        targets = set()
        for _ in range(out_degree):
            j = rng.choices(range(n), weights=indeg)[0]
            if j != i:
                targets.add(j)
        for j in sorted(targets):
            conf = Fixed(rng.randrange(SCALE // 2, SCALE + 1))
            store.submit_attestation(make_attestation(k, "trust", keys[j].id, conf, {}, 1))
            indeg[j] += 1
    for i, k in enumerate(keys):
        if rng.random() < 0.4:
            attestor = keys[rng.randrange(n)]
            if attestor is not k:
                store.submit_attestation(
                    make_attestation(attestor, "expertise", k.id, ONE, {"domain": rng.choice(DOMAINS)}, 1)
                )
        store.set_balance(k.id, Fixed.from_int(rng.randrange(1, 1000)), 1)
    if n >= 2:
        # identity 1 may pause policies and veto plans
        store.submit_attestation(make_attestation(keys[0], "pause-authority", keys[1].id, ONE, {}, 1))
    return store


def demo_snapshot(n: int = 20, seed: int = 0) -> GraphSnapshot:
    return demo_store(n, seed).take_snapshot(1)


def demo_trust_config(n: int = 20, seed: int = 0, seeds: int = 3) -> TrustConfig:
    keys = demo_keys(n, seed)
    return TrustConfig({k.id: ONE for k in keys[: min(seeds, n)]})


def demo_delegations(n: int = 20, seed: int = 0, rate: float = 0.5) -> tuple[DelegationRecord, ...]:
    rng = random.Random(seed ^ 0xD1E6)
    keys = demo_keys(n, seed)
    out = []
    for i, k in enumerate(keys):
        if rng.random() < rate:
            j = rng.randrange(n)
            if j != i:
                out.append(make_delegation(k, keys[j].id, issued_at=1))
    return tuple(out)


# pilot fixture --------------------------------------------------------------


def build_pilot_store() -> AttestationStore:
    """The 65-identity, three-seed expert network shipped as package data.

    Seeds vouch for a handful of well-known experts, experts vouch mostly
    for already-popular peers, so a few identities collect most of the
    trust while the long tail sits near the minimum.
    """
    rng = random.Random(2024)
    keys = [Keypair.from_seed(f"pilot:{i}") for i in range(PILOT_SIZE)]
    store = AttestationStore()
    for s in SCHEMAS:
        store.register_schema(s)
    for k in keys:
        store.register_identity(k.public_key)

    def attest(a, b, conf):
        store.submit_attestation(make_attestation(keys[a], "trust", keys[b].id, conf, {}, 1))

    hubs = [3, 4, 5, 6]
    for s in range(PILOT_SEEDS):
        for h in hubs:
            attest(s, h, ONE)
    indeg = {i: 1 for i in range(PILOT_SIZE)}
    for h in hubs:
        indeg[h] = 20
    for i in range(PILOT_SEEDS, PILOT_SIZE):
        pool = [j for j in range(PILOT_SEEDS, PILOT_SIZE) if j != i]
        chosen = set()
        for _ in range(rng.randint(1, 4)):
            chosen.add(rng.choices(pool, weights=[indeg[j] ** 2 for j in pool])[0])
        if i in hubs:
            # hubs spread trust into the tail so everyone is reachable
            chosen.update(j for j in range(PILOT_SEEDS, PILOT_SIZE) if j % len(hubs) == hubs.index(i) and j != i)
        for j in sorted(chosen):
            attest(i, j, Fixed(rng.randrange(SCALE // 2, SCALE + 1)))
            indeg[j] += 1
    for i, k in enumerate(keys):
        store.set_balance(k.id, Fixed.from_int(rng.randrange(10, 500)), 1)
    return store


def pilot_seeds() -> dict[bytes, Fixed]:
    return {Keypair.from_seed(f"pilot:{i}").id: ONE for i in range(PILOT_SEEDS)}


def load_pilot_store() -> AttestationStore:
    text = resources.files("vgov").joinpath("data/pilot.lines").read_text()
    store = AttestationStore()
    store.replay(codec.load_lines(text.splitlines()))
    return store


def pilot_snapshot() -> GraphSnapshot:
    return load_pilot_store().take_snapshot(1)


# case-study workload ----------------------------------------------------------


def case_study_workload(
    proposals: int = 1000,
    evaluations: int = 10_000,
    voters: int = 200,
    seed: int = 0,
) -> dict:
    """Snapshot, trust config, proposals, signed ballots and pipeline config."""
    if evaluations > voters * proposals:
        raise ValueError(f"{evaluations} evaluations exceed {voters} voters x {proposals} proposals")
    rng = random.Random(seed)
    store = demo_store(voters, seed)
    snap = store.take_snapshot(1)
    keys = demo_keys(voters, seed)
    words = [w for kws in THEMES.values() for w in kws]
    props = []
    for i in range(proposals):
        pid = f"P{i:05d}"
        deps = (f"P{rng.randrange(i):05d}",) if i and rng.random() < 0.05 else ()
        props.append(
            Proposal(
                id=pid,
                title=f"proposal {i}: {rng.choice(words)} {rng.choice(words)}",
                problem="the current gap is documented",
                impact="users benefit",
                budget=Fixed.from_int(rng.randrange(1_000, 100_000)),
                risks="risk: delivery slip; mitigation: milestones",
                tags=(rng.choice(DOMAINS),) if rng.random() < 0.02 else (),
                depends_on=deps,
            )
        )
    quality = {p.id: rng.randrange(1001) for p in props}  # thousandths
    ballots: list[Ballot] = []
    seen = set()
    while len(ballots) < evaluations:
        v = rng.randrange(voters)
        p = props[rng.randrange(proposals)].id
        if (v, p) in seen:
            continue
        seen.add((v, p))
        scores = {}
        for c in CRITERIA:
            if rng.random() < 0.05:
                continue
            x = min(max(quality[p] + rng.randint(-150, 150), 0), 1000)
            scores[c] = Fixed(x * 1_000_000)
        if not scores:
            scores[CRITERIA[0]] = Fixed(SCALE // 2)
        ballots.append(make_ballot(keys[v], "rubric", p, {"scores": scores}, issued_at=1))
    config = PipelineConfig(criteria=CRITERIA, seed=seed, themes=THEMES, cluster_by_tags=True)
    return {
        "store": store,
        "snapshot": snap,
        "trust_config": demo_trust_config(voters, seed),
        "proposals": tuple(props),
        "ballots": tuple(ballots),
        "config": config,
    }
