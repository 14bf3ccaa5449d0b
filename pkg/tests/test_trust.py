from __future__ import annotations

import random
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import node, random_edges, raw_snapshot
from oracles import dense_ppr, seed_ball, trust_graph
from vgov.fixed import ONE, SCALE, ZERO, Fixed
from vgov.trust import (
    NonConvergence,
    NoSeeds,
    SeedNotInSnapshot,
    SnapshotMismatch,
    TrustConfig,
    compute_contribution_scores,
    compute_trust_scores,
    detect_rings,
    social_distance,
)


def cfg(*seeds, **kw):
    return TrustConfig({node(s): ONE for s in seeds}, **kw)


def linf(table, oracle):
    return max(abs(table.scores[k].raw / SCALE - oracle[k]) for k in oracle)


def test_chain_beyond_hop_limit_is_zero():
    snap = raw_snapshot(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    t = compute_trust_scores(snap, cfg(0))
    assert t.scores[node(4)] == ZERO
    assert all(t.scores[node(i)] > ZERO for i in range(4))


def test_scores_sum_to_exactly_one_and_scale():
    snap = raw_snapshot(6, random_edges(random.Random(1), 6, 0.5))
    t = compute_trust_scores(snap, cfg(0, 1))
    assert sum(s.raw for s in t.scores.values()) == SCALE
    for k, s in t.scores.items():
        assert t.scaled[k] == round(s.raw * 10_000 / SCALE)
    assert t.converged and t.snapshot_digest == snap.digest


def test_single_seed_no_edges_holds_all_mass():
    t = compute_trust_scores(raw_snapshot(3, []), cfg(2))
    assert t.scores[node(2)] == ONE and t.scaled[node(2)] == 10_000


def test_self_edges_and_zero_confidence_ignored():
    base = raw_snapshot(3, [(0, 1)])
    noisy = raw_snapshot(3, {(0, 1): ONE, (1, 1): ONE, (1, 2): ZERO})
    assert compute_trust_scores(base, cfg(0)).scores == compute_trust_scores(noisy, cfg(0)).scores


def test_schema_filter():
    snap = raw_snapshot(3, [(0, 1)], extra=[(0, 2, "badge")])
    assert compute_trust_scores(snap, cfg(0)).scores[node(2)] > ZERO
    assert compute_trust_scores(snap, cfg(0, schemas=("trust",))).scores[node(2)] == ZERO


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.floats(0.05, 0.6), st.integers(0, 2**32), st.integers(1, 4))
def test_matches_dense_oracle(n, p, seed, hops):
    rng = random.Random(seed)
    snap = raw_snapshot(n, random_edges(rng, n, p))
    seeds = rng.sample(range(n), rng.randint(1, min(3, n)))
    config = TrustConfig({node(s): Fixed(rng.randrange(1, SCALE)) for s in seeds}, hop_limit=hops)
    assert linf(compute_trust_scores(snap, config), dense_ppr(snap, config)) < 1e-7


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 15), st.floats(0.05, 0.4), st.integers(0, 2**32), st.integers(1, 4))
def test_outside_ball_exactly_zero(n, p, seed, hops):
    rng = random.Random(seed)
    snap = raw_snapshot(n, random_edges(rng, n, p))
    config = TrustConfig({node(0): ONE}, hop_limit=hops)
    ball = seed_ball(trust_graph(snap), config.seeds, hops)
    t = compute_trust_scores(snap, config)
    for k, s in t.scores.items():
        assert (s == ZERO) if k not in ball else (s >= ZERO)


def test_deterministic_bytes():
    snap = raw_snapshot(10, random_edges(random.Random(3), 10, 0.3))
    assert compute_trust_scores(snap, cfg(0)).to_bytes() == compute_trust_scores(snap, cfg(0)).to_bytes()


def test_config_errors():
    snap = raw_snapshot(2, [(0, 1)])
    with pytest.raises(NoSeeds):
        compute_trust_scores(snap, TrustConfig({}))
    with pytest.raises(SeedNotInSnapshot):
        compute_trust_scores(snap, cfg(7))
    for bad in ({"damping": ONE}, {"damping": ZERO}, {"hop_limit": 0}, {"max_iterations": 0}):
        with pytest.raises(ValueError):
            cfg(0, **bad)
    with pytest.raises(ValueError):
        TrustConfig({node(0): ZERO})


def test_nonconvergence_warns():
    snap = raw_snapshot(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        t = compute_trust_scores(snap, cfg(0, max_iterations=1))
    assert not t.converged and any(issubclass(x.category, NonConvergence) for x in w)
    assert sum(s.raw for s in t.scores.values()) == SCALE


def test_social_distance():
    snap = raw_snapshot(4, [(0, 1), (1, 2)])
    assert social_distance(snap, node(0), node(2)) == 2
    assert social_distance(snap, node(2), node(0)) is None
    assert social_distance(snap, node(3), node(3)) == 0


# contribution scores --------------------------------------------------------


def contrib_snapshot(edges, trust_edges=((0, 1), (0, 2), (0, 3))):
    return raw_snapshot(4, list(trust_edges), extra=[(u, v, "contribution") for u, v in edges])


def test_contribution_half_life_halves():
    snap = contrib_snapshot([(1, 2)])
    t = compute_trust_scores(snap, cfg(0, schemas=("trust",)))
    c = compute_contribution_scores(snap, t, epoch=1 + 4, half_life=4)
    assert abs(c.scores[node(2)].raw - t.scores[node(1)].raw // 2) <= 1
    fresh = compute_contribution_scores(snap, t, epoch=1, half_life=4)
    assert fresh.scores[node(2)] == t.scores[node(1)]


def test_ring_discount_applies_only_to_ring_edges():
    snap = contrib_snapshot([(1, 2), (2, 1), (3, 1)])
    t = compute_trust_scores(snap, cfg(0, schemas=("trust",)))
    rings = detect_rings(snap)
    assert len(rings) == 1 and len(next(iter(rings))) == 2
    half = Fixed(SCALE // 2)
    plain = compute_contribution_scores(snap, t, 1, 10)
    disc = compute_contribution_scores(snap, t, 1, 10, ring_discount=half)
    assert disc.scores[node(2)] == t.scores[node(1)] * half
    assert disc.scores[node(1)] == t.scores[node(2)] * half + t.scores[node(3)]
    assert plain.scores[node(1)] == t.scores[node(2)] + t.scores[node(3)]


def test_outgoing_attestations_do_not_change_own_score():
    a = contrib_snapshot([(3, 1)])
    b = contrib_snapshot([(3, 1), (1, 2)])
    ta = compute_trust_scores(a, cfg(0, schemas=("trust",)))
    tb = compute_trust_scores(b, cfg(0, schemas=("trust",)))
    sa = compute_contribution_scores(a, ta, 1, 10)
    sb = compute_contribution_scores(b, tb, 1, 10)
    assert sa.scores[node(1)] == sb.scores[node(1)]


def test_detect_rings_triangle_and_limit():
    snap = contrib_snapshot([(1, 2), (2, 3), (3, 1)])
    assert len(detect_rings(snap, 3)) == 1
    assert detect_rings(snap, 2) == frozenset()
    with pytest.raises(ValueError):
        detect_rings(snap, 7)


def test_contribution_errors():
    snap = contrib_snapshot([(1, 2)])
    other = contrib_snapshot([(2, 1)])
    t = compute_trust_scores(snap, cfg(0))
    with pytest.raises(SnapshotMismatch):
        compute_contribution_scores(other, t, 1, 4)
    with pytest.raises(ValueError):
        compute_contribution_scores(snap, t, 1, 0)
