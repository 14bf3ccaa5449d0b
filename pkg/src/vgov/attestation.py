"""Schema-typed, signed, time-bounded attestations and graph snapshots.

Time is a logical integer clock. Expiry and revocation take effect *at*
their timestamp: an attestation expiring at t=10 is visible in snapshot(9)
and absent from snapshot(10).
"""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from vgov import codec
from vgov.fixed import ONE, ZERO, Fixed

FIELD_TYPES = ("str", "int", "fixed", "bytes", "bool", "identity")


class AttestationError(Exception):
    code = "ATTESTATION_ERROR"


class BadSignature(AttestationError):
    code = "BAD_SIGNATURE"


class UnknownSchema(AttestationError):
    code = "UNKNOWN_SCHEMA"


class SchemaViolation(AttestationError):
    code = "SCHEMA_VIOLATION"


class ConfidenceOutOfRange(AttestationError):
    code = "CONFIDENCE_OUT_OF_RANGE"


class SelfAttestation(AttestationError):
    code = "SELF_ATTESTATION"


class UnknownIdentity(AttestationError):
    code = "UNKNOWN_IDENTITY"


class NotAttestor(AttestationError):
    code = "NOT_ATTESTOR"


class NotRevocable(AttestationError):
    code = "NOT_REVOCABLE"


class UnknownTarget(AttestationError):
    code = "UNKNOWN_TARGET"


class FutureTimestamp(AttestationError):
    code = "FUTURE_TIMESTAMP"


class SnapshotFileError(AttestationError):
    code = "SNAPSHOT_FILE"


# identities -----------------------------------------------------------------


def identity_id(public_key: bytes) -> bytes:
    """32-byte identity id: SHA-256 of the raw public key."""
    return hashlib.sha256(bytes(public_key)).digest()


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(bytes(public_key)).verify(bytes(signature), message)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


class Keypair:
    """Ed25519 signing key with its derived identity id."""

    def __init__(self, private_key: Ed25519PrivateKey):
        self._sk = private_key
        self.public_key = private_key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        self.id = identity_id(self.public_key)

    @classmethod
    def from_seed(cls, seed: bytes | str) -> Keypair:
        if isinstance(seed, str):
            seed = seed.encode()
        return cls(Ed25519PrivateKey.from_private_bytes(hashlib.sha256(b"vgov-key:" + seed).digest()))

    @classmethod
    def generate(cls) -> Keypair:
        return cls(Ed25519PrivateKey.generate())

    def private_bytes(self) -> bytes:
        from cryptography.hazmat.primitives.serialization import NoEncryption, PrivateFormat

        return self._sk.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())

    @classmethod
    def from_private_bytes(cls, data: bytes) -> Keypair:
        return cls(Ed25519PrivateKey.from_private_bytes(data))

    def sign(self, message: bytes) -> bytes:
        return self._sk.sign(message)

    def __repr__(self) -> str:
        return f"Keypair(id={self.id.hex()[:12]}…)"


# records --------------------------------------------------------------------


@codec.record("Identity")
@dataclass(frozen=True)
class Identity:
    id: bytes
    public_key: bytes


@codec.record("Schema")
@dataclass(frozen=True)
class Schema:
    schema_id: str
    fields: dict  # field name -> one of FIELD_TYPES
    revocable: bool = True

    def __post_init__(self):
        if not self.schema_id or not isinstance(self.schema_id, str):
            raise SchemaViolation("schema id must be a non-empty string")
        for name, kind in self.fields.items():
            if kind not in FIELD_TYPES:
                raise SchemaViolation(f"field {name!r}: unknown type {kind!r}")

    def check(self, payload: Mapping) -> None:
        if not isinstance(payload, dict):
            raise SchemaViolation("payload must be a map")
        missing = set(self.fields) - set(payload)
        extra = set(payload) - set(self.fields)
        if missing or extra:
            raise SchemaViolation(
                f"schema {self.schema_id}: missing={sorted(map(str, missing))} extra={sorted(map(str, extra))}"
            )
        for name, kind in self.fields.items():
            if not _conforms(payload[name], kind):
                raise SchemaViolation(f"schema {self.schema_id}: field {name!r} is not {kind}")


def _conforms(value, kind: str) -> bool:
    if kind == "str":
        return isinstance(value, str)
    if kind == "int":
        return type(value) is int
    if kind == "fixed":
        return isinstance(value, Fixed)
    if kind == "bytes":
        return isinstance(value, bytes)
    if kind == "bool":
        return isinstance(value, bool)
    if kind == "identity":
        return isinstance(value, bytes) and len(value) == 32
    return False


@codec.record("Attestation")
@dataclass(frozen=True)
class Attestation:
    uid: bytes
    schema_id: str
    attestor: bytes
    subject: bytes
    confidence: Fixed
    payload: dict
    issued_at: int
    expires_at: int | None
    signature: bytes

    def body(self) -> dict:
        return attestation_body(
            self.schema_id, self.attestor, self.subject, self.confidence,
            self.payload, self.issued_at, self.expires_at,
        )

    def active_at(self, t: int) -> bool:
        return self.issued_at <= t and (self.expires_at is None or t < self.expires_at)


def attestation_body(schema_id, attestor, subject, confidence, payload, issued_at, expires_at) -> dict:
    return {
        "domain": "attestation",
        "schema_id": schema_id,
        "attestor": attestor,
        "subject": subject,
        "confidence": confidence,
        "payload": payload,
        "issued_at": issued_at,
        "expires_at": expires_at,
    }


def make_attestation(
    signer: Keypair,
    schema_id: str,
    subject: bytes,
    confidence: Fixed = ONE,
    payload: dict | None = None,
    issued_at: int = 0,
    expires_at: int | None = None,
) -> Attestation:
    body = attestation_body(schema_id, signer.id, subject, confidence, payload or {}, issued_at, expires_at)
    raw = codec.encode(body)
    return Attestation(
        uid=hashlib.sha256(raw).digest(),
        schema_id=schema_id,
        attestor=signer.id,
        subject=subject,
        confidence=confidence,
        payload=payload or {},
        issued_at=issued_at,
        expires_at=expires_at,
        signature=signer.sign(raw),
    )


@codec.record("Revocation")
@dataclass(frozen=True)
class Revocation:
    target: bytes
    attestor: bytes
    revoked_at: int
    signature: bytes

    def body(self) -> dict:
        return {"domain": "revocation", "target": self.target, "attestor": self.attestor, "revoked_at": self.revoked_at}


def make_revocation(signer: Keypair, target: bytes, revoked_at: int) -> Revocation:
    body = {"domain": "revocation", "target": target, "attestor": signer.id, "revoked_at": revoked_at}
    return Revocation(target, signer.id, revoked_at, signer.sign(codec.encode(body)))


@codec.record("BalanceRecord")
@dataclass(frozen=True)
class BalanceRecord:
    identity: bytes
    amount: Fixed
    at: int


# snapshot -------------------------------------------------------------------


@codec.record("GraphSnapshot")
@dataclass(frozen=True)
class GraphSnapshot:
    """Immutable view of identities, balances and active attestations at one tick."""

    snapshot_id: int
    attestations: tuple  # Attestation, sorted by uid
    identities: dict  # id -> public key
    balances: dict = field(default_factory=dict)  # id -> Fixed

    def to_bytes(self) -> bytes:
        return codec.encode(self)

    @cached_property
    def digest(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()

    @cached_property
    def by_uid(self) -> dict[bytes, Attestation]:
        return {a.uid: a for a in self.attestations}

    @cached_property
    def out_edges(self) -> dict[bytes, list[bytes]]:
        """attestor -> sorted distinct subjects, over all schemas."""
        adj: dict[bytes, set] = defaultdict(set)
        for a in self.attestations:
            adj[a.attestor].add(a.subject)
        return {k: sorted(v) for k, v in adj.items()}

    @cached_property
    def subjects_by_schema(self) -> dict[str, frozenset]:
        out: dict[str, set] = defaultdict(set)
        for a in self.attestations:
            out[a.schema_id].add(a.subject)
        return {k: frozenset(v) for k, v in out.items()}

    def holds_schema(self, identity: bytes, schema_id: str) -> bool:
        """True if ``identity`` is the subject of an active attestation of ``schema_id``."""
        return identity in self.subjects_by_schema.get(schema_id, ())

    def balance(self, identity: bytes) -> Fixed:
        return self.balances.get(identity, ZERO)

    def distance(self, src: bytes, dst: bytes, cutoff: int | None = None) -> int | None:
        """Directed BFS hop count from ``src`` to ``dst``; None when unreachable."""
        if src == dst:
            return 0
        seen = {src}
        frontier = deque([(src, 0)])
        adj = self.out_edges
        while frontier:
            node, d = frontier.popleft()
            if cutoff is not None and d >= cutoff:
                continue
            for nxt in adj.get(node, ()):
                if nxt == dst:
                    return d + 1
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append((nxt, d + 1))
        return None


def export_snapshot(snapshot: GraphSnapshot, path: str | Path) -> Path:
    """Write canonical bytes plus a ``.manifest.json`` sidecar carrying the digest."""
    path = Path(path)
    data = snapshot.to_bytes()
    path.write_bytes(data)
    manifest = {
        "kind": "GraphSnapshot",
        "snapshot_id": snapshot.snapshot_id,
        "bytes": len(data),
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    sidecar = path.with_name(path.name + ".manifest.json")
    sidecar.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return sidecar


def import_snapshot(path: str | Path) -> GraphSnapshot:
    path = Path(path)
    data = path.read_bytes()
    sidecar = path.with_name(path.name + ".manifest.json")
    if sidecar.exists():
        manifest = json.loads(sidecar.read_text())
        if manifest.get("sha256") != hashlib.sha256(data).hexdigest():
            raise SnapshotFileError(f"{path}: digest does not match {sidecar.name}")
    snap = codec.decode(data)
    if not isinstance(snap, GraphSnapshot):
        raise SnapshotFileError(f"{path}: not a GraphSnapshot")
    return snap


# store ----------------------------------------------------------------------


class AttestationStore:
    """Append-only, single-writer attestation store.

    ``history`` holds every accepted record in order; nothing is mutated or
    removed. Revocations are new records.
    """

    def __init__(self):
        self.history: list = []
        self.identities: dict[bytes, bytes] = {}
        self.schemas: dict[str, Schema] = {}
        self.attestations: dict[bytes, Attestation] = {}
        self.revoked_at: dict[bytes, int] = {}
        self._balances: dict[bytes, list[BalanceRecord]] = defaultdict(list)
        self.clock = 0

    def _append(self, rec) -> None:
        self.history.append(rec)

    def _tick(self, t: int) -> None:
        self.clock = max(self.clock, t)

    def advance(self, t: int) -> None:
        self._tick(t)

    def register_identity(self, public_key: bytes) -> bytes:
        ident = identity_id(public_key)
        if ident not in self.identities:
            self.identities[ident] = bytes(public_key)
            self._append(Identity(ident, bytes(public_key)))
        return ident

    def register_schema(self, schema: Schema) -> str:
        existing = self.schemas.get(schema.schema_id)
        if existing is not None:
            if existing != schema:
                raise SchemaViolation(f"schema {schema.schema_id!r} already registered with different fields")
            return schema.schema_id
        self.schemas[schema.schema_id] = schema
        self._append(schema)
        return schema.schema_id

    def set_balance(self, identity: bytes, amount: Fixed, at: int) -> None:
        if identity not in self.identities:
            raise UnknownIdentity(identity.hex())
        if amount < ZERO:
            raise ValueError("balances are non-negative")
        rec = BalanceRecord(identity, amount, at)
        self._balances[identity].append(rec)
        self._append(rec)
        self._tick(at)

    def submit_attestation(self, att: Attestation) -> bytes:
        if att.uid in self.attestations:
            if self.attestations[att.uid] != att:
                raise BadSignature("uid collision with a different record")
            return att.uid
        schema = self.schemas.get(att.schema_id)
        if schema is None:
            raise UnknownSchema(att.schema_id)
        for who in (att.attestor, att.subject):
            if who not in self.identities:
                raise UnknownIdentity(who.hex())
        if att.attestor == att.subject:
            raise SelfAttestation("attestor and subject are the same identity")
        if not isinstance(att.confidence, Fixed) or not (ZERO <= att.confidence <= ONE):
            raise ConfidenceOutOfRange(f"confidence {att.confidence} outside [0, 1]")
        if att.expires_at is not None and att.expires_at <= att.issued_at:
            raise SchemaViolation("expires_at must be after issued_at")
        schema.check(att.payload)
        raw = codec.encode(att.body())
        if hashlib.sha256(raw).digest() != att.uid:
            raise BadSignature("uid is not the digest of the body")
        if not verify_signature(self.identities[att.attestor], att.signature, raw):
            raise BadSignature("signature does not verify against the attestor key")
        self.attestations[att.uid] = att
        self._append(att)
        self._tick(att.issued_at)
        return att.uid

    def revoke(self, rev: Revocation) -> dict:
        target = self.attestations.get(rev.target)
        if target is None:
            raise UnknownTarget(rev.target.hex())
        if rev.attestor != target.attestor:
            raise NotAttestor("only the original attestor may revoke")
        if not self.schemas[target.schema_id].revocable:
            raise NotRevocable(f"schema {target.schema_id} is not revocable")
        if not verify_signature(self.identities[rev.attestor], rev.signature, codec.encode(rev.body())):
            raise BadSignature("revocation signature does not verify")
        prev = self.revoked_at.get(rev.target)
        self.revoked_at[rev.target] = rev.revoked_at if prev is None else min(prev, rev.revoked_at)
        self._append(rev)
        self._tick(rev.revoked_at)
        return {"target": rev.target, "revoked_at": self.revoked_at[rev.target]}

    def balance_at(self, identity: bytes, t: int) -> Fixed | None:
        latest = None
        for rec in self._balances.get(identity, ()):
            if rec.at <= t:
                latest = rec.amount
        return latest

    def take_snapshot(self, at: int) -> GraphSnapshot:
        if at > self.clock:
            raise FutureTimestamp(f"snapshot at {at} is after store clock {self.clock}")
        active = []
        for uid in sorted(self.attestations):
            att = self.attestations[uid]
            if not att.active_at(at):
                continue
            r = self.revoked_at.get(uid)
            if r is not None and r <= at:
                continue
            active.append(att)
        balances = {}
        for ident in sorted(self._balances):
            amt = self.balance_at(ident, at)
            if amt is not None:
                balances[ident] = amt
        return GraphSnapshot(
            snapshot_id=at,
            attestations=tuple(active),
            identities=dict(sorted(self.identities.items())),
            balances=balances,
        )

    # persistence ------------------------------------------------------

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            codec.dump_lines(self.history, fh)

    @classmethod
    def load(cls, path: str | Path) -> AttestationStore:
        store = cls()
        p = Path(path)
        if not p.exists():
            return store
        with open(p) as fh:
            store.replay(codec.load_lines(fh))
        return store

    def replay(self, records: Iterable) -> None:
        for rec in records:
            self.apply(rec)

    def apply(self, rec):
        if isinstance(rec, Identity):
            return self.register_identity(rec.public_key)
        if isinstance(rec, Schema):
            return self.register_schema(rec)
        if isinstance(rec, Attestation):
            return self.submit_attestation(rec)
        if isinstance(rec, Revocation):
            return self.revoke(rec)
        if isinstance(rec, BalanceRecord):
            return self.set_balance(rec.identity, rec.amount, rec.at)
        raise TypeError(f"unknown store record {type(rec).__name__}")


def write_schema_registry(schemas: Iterable[Schema], path: str | Path) -> None:
    with open(path, "w") as fh:
        codec.dump_lines(sorted(schemas, key=lambda s: s.schema_id), fh)


def read_schema_registry(path: str | Path) -> dict[str, Schema]:
    with open(path) as fh:
        recs = codec.load_lines(fh)
    out = {}
    for rec in recs:
        if not isinstance(rec, Schema):
            raise SchemaViolation("schema registry contains a non-schema record")
        if rec.schema_id in out:
            raise SchemaViolation(f"duplicate schema id {rec.schema_id!r}")
        out[rec.schema_id] = rec
    return out
