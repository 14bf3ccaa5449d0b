"""Liquid-democracy delegation resolution with merkle-committed voting weights.

Each identity has at most one usable outgoing delegation for a proposal:
the record whose scope equals the proposal topic, else its ``global``
record. A hop is usable only when its constraints hold. Following usable
hops from every identity gives a functional graph; chains end at the first
identity with no usable hop, and identities on a cycle keep their own
balance (and are listed as forfeited delegators).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from vgov import codec
from vgov.attestation import BadSignature, GraphSnapshot, Keypair, UnknownIdentity, verify_signature
from vgov.fixed import Fixed
from vgov.merkle import EMPTY_ROOT, MerkleTree
from vgov.trust import SnapshotMismatch, TrustScoreTable

GLOBAL_SCOPE = "global"


class DelegationError(Exception):
    pass


class ConflictingDelegation(DelegationError):
    pass


@codec.record("DelegationRecord")
@dataclass(frozen=True)
class DelegationRecord:
    delegator: bytes
    delegate: bytes
    scope: str = GLOBAL_SCOPE
    max_distance: int | None = None
    required_schema: str | None = None
    issued_at: int = 0
    signature: bytes = b""

    def __post_init__(self):
        if self.delegator == self.delegate:
            raise DelegationError("an identity cannot delegate to itself")

    def body(self) -> dict:
        return {
            "domain": "delegation",
            "delegator": self.delegator,
            "delegate": self.delegate,
            "scope": self.scope,
            "max_distance": self.max_distance,
            "required_schema": self.required_schema,
            "issued_at": self.issued_at,
        }


def make_delegation(
    signer: Keypair,
    delegate: bytes,
    scope: str = GLOBAL_SCOPE,
    max_distance: int | None = None,
    required_schema: str | None = None,
    issued_at: int = 0,
) -> DelegationRecord:
    rec = DelegationRecord(signer.id, delegate, scope, max_distance, required_schema, issued_at)
    sig = signer.sign(codec.encode(rec.body()))
    return DelegationRecord(signer.id, delegate, scope, max_distance, required_schema, issued_at, sig)


def check_signatures(records, snapshot: GraphSnapshot) -> list[DelegationRecord]:
    """Return the records whose signatures verify; raise on the first bad one."""
    for rec in records:
        key = snapshot.identities.get(rec.delegator)
        if key is None:
            raise UnknownIdentity(rec.delegator.hex())
        if not verify_signature(key, rec.signature, codec.encode(rec.body())):
            raise BadSignature(f"delegation from {rec.delegator.hex()[:12]} does not verify")
    return list(records)


@codec.record("ProposalRef")
@dataclass(frozen=True)
class ProposalRef:
    id: str
    topic: str = GLOBAL_SCOPE


@codec.record("ResolvedWeights")
@dataclass(frozen=True)
class ResolvedWeights:
    snapshot_id: int
    proposal_id: str
    weights: dict  # id -> Fixed
    forfeited: frozenset = field(default_factory=frozenset)
    root: bytes = EMPTY_ROOT

    def to_bytes(self) -> bytes:
        return codec.encode(self)


def weight_leaves(weights: dict) -> list[tuple[bytes, bytes]]:
    """Leaf layout: identity id -> canonical Fixed weight."""
    return [(ident, codec.encode(w)) for ident, w in weights.items()]


def _root(weights: dict) -> bytes:
    return MerkleTree(weight_leaves(weights)).root if weights else EMPTY_ROOT


def _index(delegations, universe) -> dict[tuple[bytes, str], DelegationRecord]:
    by_scope: dict[tuple[bytes, str], DelegationRecord] = {}
    for rec in delegations:
        for who in (rec.delegator, rec.delegate):
            if who not in universe:
                raise UnknownIdentity(bytes(who).hex())
        key = (rec.delegator, rec.scope)
        if key in by_scope and by_scope[key] != rec:
            raise ConflictingDelegation(f"two records for delegator {rec.delegator.hex()[:12]} in scope {rec.scope!r}")
        by_scope[key] = rec
    return by_scope


def hop_allowed(snapshot: GraphSnapshot, rec: DelegationRecord) -> bool:
    """Constraint check for one delegation hop."""
    if rec.required_schema is not None and not snapshot.holds_schema(rec.delegate, rec.required_schema):
        return False
    if rec.max_distance is not None:
        if snapshot.distance(rec.delegator, rec.delegate, cutoff=rec.max_distance) is None:
            return False
    return True


def next_hops(snapshot: GraphSnapshot, delegations, proposal: ProposalRef, universe) -> dict[bytes, bytes]:
    by_scope = _index(delegations, universe)
    nxt = {}
    delegators = sorted({d for d, _ in by_scope})
    for ident in delegators:
        rec = by_scope.get((ident, proposal.topic)) or by_scope.get((ident, GLOBAL_SCOPE))
        if rec is not None and hop_allowed(snapshot, rec):
            nxt[ident] = rec.delegate
    return nxt


def resolve(
    snapshot: GraphSnapshot,
    delegations,
    proposal: ProposalRef,
    trust: TrustScoreTable | None = None,
) -> ResolvedWeights:
    if trust is not None and trust.snapshot_digest != snapshot.digest:
        raise SnapshotMismatch("trust table was computed over a different snapshot")
    universe = set(snapshot.identities) | set(snapshot.balances)
    nxt = next_hops(snapshot, delegations, proposal, universe)

    terminal: dict[bytes, bytes] = {}
    forfeited: set[bytes] = set()
    for start in sorted(universe):
        if start in terminal:
            continue
        path = []
        on_path: dict[bytes, int] = {}
        node = start
        while True:
            if node in terminal:
                end = terminal[node]
                break
            if node in on_path:
                cycle = path[on_path[node]:]
                for m in cycle:
                    terminal[m] = m
                forfeited.update(cycle)
                path = path[: on_path[node]]
                end = node
                break
            on_path[node] = len(path)
            path.append(node)
            step = nxt.get(node)
            if step is None:
                end = node
                break
            node = step
        for p in path:
            terminal[p] = end

    totals = dict.fromkeys(universe, 0)
    for ident in universe:
        bal = snapshot.balances.get(ident)
        if bal is not None:
            totals[terminal[ident]] += bal.raw
    weights = {ident: Fixed(totals[ident]) for ident in sorted(universe)}
    return ResolvedWeights(
        snapshot_id=snapshot.snapshot_id,
        proposal_id=proposal.id,
        weights=weights,
        forfeited=frozenset(forfeited),
        root=_root(weights),
    )


def commit(weights: ResolvedWeights) -> tuple[bytes, MerkleTree | None]:
    """Root plus a tree whose ``prove(identity)`` yields a claim proof."""
    if not weights.weights:
        return EMPTY_ROOT, None
    tree = MerkleTree(weight_leaves(weights.weights))
    return tree.root, tree


def weights_digest(weights: ResolvedWeights) -> str:
    return hashlib.sha256(weights.to_bytes()).hexdigest()
