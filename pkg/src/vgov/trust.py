"""Hop-limited personalized PageRank over attestation graphs, plus contribution scores.

Trust propagates only inside the ball of identities within ``hop_limit``
directed edges of a seed. Everything outside the ball scores exactly zero.
Iteration runs in exact integers at 10^-18 resolution and is rounded to
10^-9 only at the end, so two runs over the same snapshot and config give
identical bytes.
"""

from __future__ import annotations

import itertools
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

from vgov import codec
from vgov.attestation import GraphSnapshot, UnknownIdentity
from vgov.fixed import (
    ONE,
    SCALE,
    ZERO,
    Fixed,
    apportion,
    div_round_half_even,
    exp2_neg,
    pairwise_sum,
)

WIDE = 10**18  # internal resolution of the power iteration
CONTRIBUTION_SCHEMA = "contribution"


class TrustError(Exception):
    pass


class NoSeeds(TrustError):
    pass


class SeedNotInSnapshot(TrustError):
    pass


class SnapshotMismatch(TrustError):
    pass


class NonConvergence(UserWarning):
    pass


@codec.record("TrustConfig")
@dataclass(frozen=True)
class TrustConfig:
    seeds: dict  # identity id -> prior (Fixed, > 0)
    damping: Fixed = Fixed(850_000_000)
    hop_limit: int = 3
    max_iterations: int = 1000
    convergence_epsilon: Fixed = Fixed(1)
    score_scale: int = 10_000
    schemas: tuple | None = None  # attestation schemas that carry trust; None = all

    def __post_init__(self):
        if not (ZERO < self.damping < ONE):
            raise ValueError("damping must lie strictly between 0 and 1")
        if self.hop_limit < 1:
            raise ValueError("hop_limit must be at least 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.convergence_epsilon <= ZERO:
            raise ValueError("convergence_epsilon must be positive")
        for ident, prior in self.seeds.items():
            if not isinstance(prior, Fixed) or prior <= ZERO:
                raise ValueError(f"seed {bytes(ident).hex()[:12]} needs a positive prior")

    @property
    def digest(self) -> bytes:
        return codec.digest(self)


@codec.record("TrustScoreTable")
@dataclass(frozen=True)
class TrustScoreTable:
    snapshot_id: int
    snapshot_digest: bytes
    config_digest: bytes
    scores: dict  # id -> Fixed, sums to exactly one
    scaled: dict  # id -> int
    converged: bool = True
    iterations: int = 0
    residual: Fixed = ZERO

    def score(self, ident: bytes) -> Fixed:
        return self.scores.get(ident, ZERO)

    def to_bytes(self) -> bytes:
        return codec.encode(self)

    def ranking(self) -> list[tuple[bytes, int]]:
        return sorted(self.scaled.items(), key=lambda kv: (-kv[1], kv[0]))


@codec.record("ContributionScoreTable")
@dataclass(frozen=True)
class ContributionScoreTable:
    snapshot_id: int
    epoch: int
    scores: dict  # id -> Fixed
    discounted_rings: frozenset = field(default_factory=frozenset)


def _trust_edges(snapshot: GraphSnapshot, schemas) -> dict[tuple[bytes, bytes], int]:
    allowed = None if schemas is None else set(schemas)
    edges: dict[tuple[bytes, bytes], int] = defaultdict(int)
    for a in snapshot.attestations:
        if allowed is not None and a.schema_id not in allowed:
            continue
        if a.attestor == a.subject or a.confidence.raw <= 0:
            continue
        edges[(a.attestor, a.subject)] += a.confidence.raw
    return edges


def seed_distances(adj: dict, seeds, limit: int) -> dict[bytes, int]:
    """Multi-source BFS distances from ``seeds``, truncated at ``limit`` hops."""
    dist = {s: 0 for s in seeds}
    frontier = sorted(seeds)
    d = 0
    while frontier and d < limit:
        d += 1
        nxt = []
        for u in frontier:
            for v in adj.get(u, ()):
                if v not in dist:
                    dist[v] = d
                    nxt.append(v)
        frontier = sorted(nxt)
    return dist


def compute_trust_scores(snapshot: GraphSnapshot, config: TrustConfig) -> TrustScoreTable:
    """Personalized PageRank restricted to the seed ball.

    ``rank = (1-d)*prior + d*sum_in(rank(u) * conf(u,v) / W(u))`` where ``W(u)``
    is the confidence-weighted out-degree of ``u`` inside the ball; mass of
    in-ball identities with no in-ball out-edges returns to the seed priors.
    """
    if not config.seeds:
        raise NoSeeds("trust computation needs at least one seed")
    for s in config.seeds:
        if s not in snapshot.identities:
            raise SeedNotInSnapshot(bytes(s).hex())

    edges = _trust_edges(snapshot, config.schemas)
    adj: dict[bytes, list[bytes]] = defaultdict(list)
    for (u, v) in sorted(edges):
        adj[u].append(v)
    ball = seed_distances(adj, list(config.seeds), config.hop_limit)

    nodes = sorted(ball)
    index = {n: i for i, n in enumerate(nodes)}
    n = len(nodes)

    prior_wide = apportion({s: p.raw for s, p in config.seeds.items()}, WIDE)
    prior = [prior_wide.get(x, 0) for x in nodes]

    out_weight = [0] * n
    in_ball = []
    for (u, v), w in sorted(edges.items()):
        if u in index and v in index:
            in_ball.append((index[u], index[v], w))
            out_weight[index[u]] += w

    d = config.damping.raw
    incoming: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for ui, vi, w in in_ball:
        coef = div_round_half_even(d * w * WIDE, SCALE * out_weight[ui])
        incoming[vi].append((ui, coef))
    dangling = [i for i in range(n) if out_weight[i] == 0]
    teleport = [div_round_half_even((SCALE - d) * p, SCALE) for p in prior]
    seed_idx = [i for i in range(n) if prior[i]]

    eps = config.convergence_epsilon.raw * (WIDE // SCALE)
    rank = list(prior)
    residual = 0
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        dmass = div_round_half_even(d * sum(rank[i] for i in dangling), SCALE)
        new = [0] * n
        for v in range(n):
            acc = sum(rank[u] * c for u, c in incoming[v])
            new[v] = teleport[v] + div_round_half_even(acc, WIDE)
        for i in seed_idx:
            new[i] += div_round_half_even(dmass * prior[i], WIDE)
        residual = sum(abs(a - b) for a, b in zip(new, rank))
        rank = new
        if residual < eps:
            converged = True
            break
    if not converged:
        warnings.warn(
            NonConvergence(f"trust iteration residual {residual / WIDE:.3e} after {iterations} iterations"),
            stacklevel=2,
        )

    final = apportion({nodes[i]: max(rank[i], 0) for i in range(n)}, SCALE)
    scores = {ident: Fixed(final.get(ident, 0)) for ident in sorted(snapshot.identities)}
    scaled = {ident: div_round_half_even(s.raw * config.score_scale, SCALE) for ident, s in scores.items()}
    return TrustScoreTable(
        snapshot_id=snapshot.snapshot_id,
        snapshot_digest=snapshot.digest,
        config_digest=config.digest,
        scores=scores,
        scaled=scaled,
        converged=converged,
        iterations=iterations,
        residual=Fixed(div_round_half_even(residual, WIDE // SCALE)),
    )


def social_distance(snapshot: GraphSnapshot, src: bytes, dst: bytes) -> int | None:
    """Shortest directed attestation path length, or None if unreachable."""
    for who in (src, dst):
        if who not in snapshot.identities:
            raise UnknownIdentity(bytes(who).hex())
    return snapshot.distance(src, dst)


def _canonical_rotation(cycle: tuple) -> tuple:
    i = min(range(len(cycle)), key=cycle.__getitem__)
    return cycle[i:] + cycle[:i]


def detect_rings(snapshot: GraphSnapshot, max_ring_size: int = 3, schema_id: str = CONTRIBUTION_SCHEMA) -> frozenset:
    """All directed attestation cycles of length 2..max_ring_size, as uid tuples.

    Parallel attestations over the same edge yield one ring per combination.
    Each ring is reported once, rotated so its smallest uid comes first.
    """
    if not 2 <= max_ring_size <= 6:
        raise ValueError("max_ring_size must be in [2, 6]")
    uids: dict[tuple[bytes, bytes], list[bytes]] = defaultdict(list)
    for a in snapshot.attestations:
        if a.schema_id == schema_id and a.attestor != a.subject:
            uids[(a.attestor, a.subject)].append(a.uid)
    adj: dict[bytes, list[bytes]] = defaultdict(list)
    for (u, v) in sorted(uids):
        adj[u].append(v)

    node_cycles = []
    for start in sorted(adj):
        # only visit nodes greater than start so each cycle is found from its minimum
        stack = [(start, [start])]
        while stack:
            node, path = stack.pop()
            for nxt in adj.get(node, ()):
                if nxt == start and len(path) >= 2:
                    node_cycles.append(tuple(path))
                elif nxt > start and nxt not in path and len(path) < max_ring_size:
                    stack.append((nxt, path + [nxt]))

    rings = set()
    for cyc in node_cycles:
        hops = [uids[(cyc[i], cyc[(i + 1) % len(cyc)])] for i in range(len(cyc))]
        for combo in itertools.product(*hops):
            rings.add(_canonical_rotation(tuple(combo)))
    return frozenset(rings)


def compute_contribution_scores(
    snapshot: GraphSnapshot,
    trust: TrustScoreTable,
    epoch: int,
    half_life: int,
    ring_discount: Fixed | None = None,
    max_ring_size: int = 3,
    schema_id: str = CONTRIBUTION_SCHEMA,
) -> ContributionScoreTable:
    """score(subject) = sum of confidence * 2^(-age/half_life) * trust(attestor) [* discount on ring edges]."""
    if trust.snapshot_digest != snapshot.digest:
        raise SnapshotMismatch("trust table was computed over a different snapshot")
    if half_life <= 0:
        raise ValueError("half_life must be positive")
    rings = detect_rings(snapshot, max_ring_size, schema_id) if ring_discount is not None else frozenset()
    ring_edges = {uid for ring in rings for uid in ring}
    terms: dict[bytes, list[tuple[bytes, Fixed]]] = defaultdict(list)
    for a in snapshot.attestations:
        if a.schema_id != schema_id or a.attestor == a.subject:
            continue
        age = max(epoch - a.issued_at, 0)
        value = a.confidence * exp2_neg(age, half_life) * trust.score(a.attestor)
        if a.uid in ring_edges:
            value = value * ring_discount
        terms[a.subject].append((a.uid, value))
    scores = {}
    for ident in sorted(snapshot.identities):
        parts = sorted(terms.get(ident, ()))
        scores[ident] = pairwise_sum([v for _, v in parts])
    return ContributionScoreTable(snapshot.snapshot_id, epoch, scores, rings)
