from __future__ import annotations

import hashlib

import pytest
from hypothesis import given
from hypothesis import strategies as st

from vgov import codec
from vgov.merkle import (
    EMPTY_ROOT,
    DuplicateKey,
    EmptyLeafSet,
    KeyNotFound,
    MerkleProof,
    MerkleTree,
    merkle_verify,
    verify_proof,
)


def oracle_root(leaves):
    """Recursive build straight from the layout rules."""
    level = [
        hashlib.sha256(b"\x00" + codec.encode([k, v])).digest()
        for k, v in sorted(leaves)
    ]
    while len(level) > 1:
        nxt = [hashlib.sha256(b"\x01" + level[i] + level[i + 1]).digest() for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


leaf_sets = st.dictionaries(st.binary(min_size=1, max_size=8), st.binary(max_size=16), min_size=1, max_size=40)


@given(leaf_sets, st.randoms())
def test_root_matches_oracle_and_ignores_order(d, rnd):
    items = list(d.items())
    rnd.shuffle(items)
    tree = MerkleTree(items)
    assert tree.root == oracle_root(d.items())


@given(leaf_sets)
def test_every_leaf_proves(d):
    tree = MerkleTree(d.items())
    for k, v in d.items():
        proof = tree.prove(k)
        assert verify_proof(tree.root, proof)
        assert MerkleProof.from_bytes(proof.to_bytes()) == proof


@given(leaf_sets, st.data())
def test_tampered_proofs_fail(d, data):
    tree = MerkleTree(d.items())
    k = data.draw(st.sampled_from(sorted(d)))
    proof = tree.prove(k)
    assert not merkle_verify(tree.root, k, proof.value + b"x", proof.path)
    if proof.path:
        i = data.draw(st.integers(0, len(proof.path) - 1))
        sib, side = proof.path[i]
        bad = list(proof.path)
        bad[i] = (bytes([sib[0] ^ 1]) + sib[1:], side)
        assert not merkle_verify(tree.root, k, proof.value, bad)
        bad[i] = (sib, 1 - side)
        assert not merkle_verify(tree.root, k, proof.value, bad) or proof.path[i][0] == tree.levels[0][0]


def test_single_leaf_root_is_leaf_hash():
    assert MerkleTree([(b"k", b"v")]).root == hashlib.sha256(b"\x00" + codec.encode([b"k", b"v"])).digest()


def test_domain_separation_leaf_vs_node():
    # a node preimage cannot be passed off as a leaf
    t = MerkleTree([(b"a", b"1"), (b"b", b"2")])
    l0, l1 = t.levels[0]
    assert t.root == hashlib.sha256(b"\x01" + l0 + l1).digest()
    assert t.root != hashlib.sha256(b"\x00" + l0 + l1).digest()


def test_errors():
    with pytest.raises(EmptyLeafSet):
        MerkleTree([])
    with pytest.raises(DuplicateKey):
        MerkleTree([(b"a", b"1"), (b"a", b"2")])
    with pytest.raises(KeyNotFound):
        MerkleTree([(b"a", b"1")]).prove(b"b")
    assert EMPTY_ROOT == bytes(32)
    assert not merkle_verify(bytes(32), b"a", b"1", [(b"short", 0)])
