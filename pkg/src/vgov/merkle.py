"""Domain-separated SHA-256 merkle trees over (key, value) leaves.

Leaves are sorted by key before building. ``leaf = H(0x00 || L)`` where
``L`` is the canonical encoding of ``[key, value]``; ``node = H(0x01 ||
left || right)``; an unpaired node at the end of a level is promoted
unchanged.
"""

from __future__ import annotations

import hashlib
from bisect import bisect_left
from dataclasses import dataclass
from typing import Iterable, Sequence

from vgov import codec

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"
# root committed for an empty result set; not the hash of anything
EMPTY_ROOT = bytes(32)

SIBLING_LEFT = 0
SIBLING_RIGHT = 1


class MerkleError(ValueError):
    pass


class DuplicateKey(MerkleError):
    pass


class EmptyLeafSet(MerkleError):
    pass


class KeyNotFound(MerkleError, KeyError):
    pass


def leaf_bytes(key: bytes, value: bytes) -> bytes:
    return codec.encode([bytes(key), bytes(value)])


def hash_leaf(key: bytes, value: bytes) -> bytes:
    return hashlib.sha256(LEAF_PREFIX + leaf_bytes(key, value)).digest()


def hash_node(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(NODE_PREFIX + left + right).digest()


@codec.record("MerkleProof")
@dataclass(frozen=True)
class MerkleProof:
    key: bytes
    value: bytes
    path: tuple  # ((sibling digest, side), ...) leaf to root

    def to_bytes(self) -> bytes:
        return codec.encode(self)

    @classmethod
    def from_bytes(cls, data: bytes) -> MerkleProof:
        proof = codec.decode(data)
        if not isinstance(proof, cls):
            raise MerkleError("not a merkle proof")
        return proof


class MerkleTree:
    """Immutable merkle tree; ``levels[0]`` are leaf hashes, ``levels[-1] == [root]``."""

    def __init__(self, leaves: Iterable[tuple[bytes, bytes]]):
        items = sorted((bytes(k), bytes(v)) for k, v in leaves)
        if not items:
            raise EmptyLeafSet("merkle tree needs at least one leaf")
        for i in range(1, len(items)):
            if items[i][0] == items[i - 1][0]:
                raise DuplicateKey(f"duplicate leaf key {items[i][0].hex()}")
        self.keys = [k for k, _ in items]
        self.values = [v for _, v in items]
        level = [hash_leaf(k, v) for k, v in items]
        self.levels = [level]
        while len(level) > 1:
            nxt = [hash_node(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
            if len(level) & 1:
                nxt.append(level[-1])
            level = nxt
            self.levels.append(level)

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    def __len__(self) -> int:
        return len(self.keys)

    def index(self, key: bytes) -> int:
        key = bytes(key)
        i = bisect_left(self.keys, key)
        if i == len(self.keys) or self.keys[i] != key:
            raise KeyNotFound(key.hex())
        return i

    def prove(self, key: bytes) -> MerkleProof:
        leaf = idx = self.index(key)
        path = []
        for level in self.levels[:-1]:
            if idx & 1:
                path.append((level[idx - 1], SIBLING_LEFT))
            elif idx + 1 < len(level):
                path.append((level[idx + 1], SIBLING_RIGHT))
            idx //= 2
        return MerkleProof(self.keys[leaf], self.values[leaf], tuple(path))


def merkle_root(leaves: Sequence[tuple[bytes, bytes]]) -> bytes:
    return MerkleTree(leaves).root


def merkle_prove(tree: MerkleTree, key: bytes) -> MerkleProof:
    return tree.prove(key)


def merkle_verify(root: bytes, key: bytes, value: bytes, path: Sequence) -> bool:
    """True iff the leaf (key, value) with this path hashes to ``root``."""
    try:
        h = hash_leaf(key, value)
        for sibling, side in path:
            if len(sibling) != 32:
                return False
            if side == SIBLING_LEFT:
                h = hash_node(sibling, h)
            elif side == SIBLING_RIGHT:
                h = hash_node(h, sibling)
            else:
                return False
    except (TypeError, ValueError):
        return False
    return h == bytes(root)


def verify_proof(root: bytes, proof: MerkleProof) -> bool:
    return merkle_verify(root, proof.key, proof.value, proof.path)
