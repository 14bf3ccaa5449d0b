from __future__ import annotations

import json
from dataclasses import replace

import pytest

from vgov import codec
from vgov.attestation import (
    AttestationStore,
    BadSignature,
    ConfidenceOutOfRange,
    FutureTimestamp,
    Keypair,
    NotAttestor,
    NotRevocable,
    Schema,
    SchemaViolation,
    SelfAttestation,
    SnapshotFileError,
    UnknownIdentity,
    UnknownSchema,
    export_snapshot,
    import_snapshot,
    make_attestation,
    make_revocation,
    read_schema_registry,
    write_schema_registry,
)
from vgov.fixed import ONE, Fixed


@pytest.fixture
def world():
    a, b, c = (Keypair.from_seed(s) for s in "abc")
    store = AttestationStore()
    for k in (a, b, c):
        store.register_identity(k.public_key)
    store.register_schema(Schema("trust", {}, True))
    store.register_schema(Schema("expertise", {"domain": "str"}, True))
    store.register_schema(Schema("badge", {}, False))
    return store, a, b, c


def test_submit_and_snapshot(world):
    store, a, b, c = world
    uid = store.submit_attestation(make_attestation(a, "trust", b.id, Fixed.parse("0.8"), {}, 1))
    snap = store.take_snapshot(1)
    assert [x.uid for x in snap.attestations] == [uid]
    assert snap.holds_schema(b.id, "trust") and not snap.holds_schema(a.id, "trust")
    assert snap.distance(a.id, b.id) == 1 and snap.distance(b.id, a.id) is None


def test_rejections(world):
    store, a, b, c = world
    with pytest.raises(UnknownSchema):
        store.submit_attestation(make_attestation(a, "nope", b.id))
    with pytest.raises(SelfAttestation):
        store.submit_attestation(make_attestation(a, "trust", a.id))
    with pytest.raises(ConfidenceOutOfRange):
        store.submit_attestation(make_attestation(a, "trust", b.id, Fixed.parse("1.5")))
    with pytest.raises(SchemaViolation):
        store.submit_attestation(make_attestation(a, "expertise", b.id, ONE, {"domain": 3}))
    with pytest.raises(UnknownIdentity):
        store.submit_attestation(make_attestation(a, "trust", Keypair.from_seed("z").id))
    att = make_attestation(a, "trust", b.id, ONE, {}, 1)
    forged = replace(att, signature=c.sign(codec.encode(att.body())))
    with pytest.raises(BadSignature):
        store.submit_attestation(forged)
    with pytest.raises(BadSignature):
        store.submit_attestation(replace(att, confidence=Fixed.parse("0.5")))


def test_revocation_rules(world):
    store, a, b, c = world
    uid = store.submit_attestation(make_attestation(a, "trust", b.id, ONE, {}, 1))
    with pytest.raises(NotAttestor):
        store.revoke(make_revocation(c, uid, 2))
    store.revoke(make_revocation(a, uid, 3))
    assert store.take_snapshot(2).attestations
    assert not store.take_snapshot(3).attestations
    badge = store.submit_attestation(make_attestation(a, "badge", c.id, ONE, {}, 1))
    with pytest.raises(NotRevocable):
        store.revoke(make_revocation(a, badge, 4))


def test_expiry_and_balances(world):
    store, a, b, c = world
    store.submit_attestation(make_attestation(a, "trust", b.id, ONE, {}, 1, expires_at=5))
    store.set_balance(a.id, Fixed.from_int(10), 2)
    store.set_balance(a.id, Fixed.from_int(7), 6)
    assert store.take_snapshot(4).attestations and not store.take_snapshot(6).attestations
    assert store.take_snapshot(4).balance(a.id) == Fixed.from_int(10)
    assert store.take_snapshot(6).balance(a.id) == Fixed.from_int(7)
    with pytest.raises(FutureTimestamp):
        store.take_snapshot(99)


def test_snapshot_digest_independent_of_submission_order():
    keys = [Keypair.from_seed(f"k{i}") for i in range(5)]
    atts = [make_attestation(keys[i], "trust", keys[(i + 1) % 5].id, ONE, {}, 1) for i in range(5)]
    digests = set()
    for order in (atts, atts[::-1], atts[2:] + atts[:2]):
        store = AttestationStore()
        store.register_schema(Schema("trust", {}))
        for k in keys[::-1] if order is atts else keys:
            store.register_identity(k.public_key)
        for att in order:
            store.submit_attestation(att)
        digests.add(store.take_snapshot(1).digest)
    assert len(digests) == 1


def test_dump_load_replay_identical(world, tmp_path):
    store, a, b, c = world
    store.submit_attestation(make_attestation(a, "trust", b.id, ONE, {}, 1))
    store.set_balance(c.id, Fixed.from_int(3), 1)
    store.dump(tmp_path / "s.lines")
    again = AttestationStore.load(tmp_path / "s.lines")
    assert again.take_snapshot(1).digest == store.take_snapshot(1).digest


def test_snapshot_file_roundtrip_and_tamper(world, tmp_path):
    store, a, b, c = world
    store.submit_attestation(make_attestation(a, "trust", b.id, ONE, {}, 1))
    snap = store.take_snapshot(1)
    path = tmp_path / "snap.bin"
    sidecar = export_snapshot(snap, path)
    assert json.loads(sidecar.read_text())["sha256"]
    assert import_snapshot(path).digest == snap.digest
    data = bytearray(path.read_bytes())
    data[-1] ^= 1
    path.write_bytes(bytes(data))
    with pytest.raises(SnapshotFileError):
        import_snapshot(path)


def test_schema_registry_file(tmp_path):
    schemas = [Schema("b", {"x": "int"}), Schema("a", {})]
    write_schema_registry(schemas, tmp_path / "reg.lines")
    assert sorted(read_schema_registry(tmp_path / "reg.lines")) == ["a", "b"]
    with pytest.raises(SchemaViolation):
        Schema("c", {"x": "float"})
