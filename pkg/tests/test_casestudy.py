from __future__ import annotations

import hashlib
import json
import random

import pytest

from vgov import codec
from vgov.casestudy import (
    EXIT_OK,
    EXIT_QUORUM,
    EXIT_VETO,
    IncompleteBundle,
    read_bundle,
    run_case_study,
    verify_bundle,
)
from vgov.demo import demo_keys
from vgov.io import canonical_json
from vgov.sim import ACCEPTED, NO_QUORUM

SMALL = {"seed": 5, "workload": {"proposals": 8, "evaluations": 40, "voters": 12}}


def reseal(files: dict, rel: str, data: bytes) -> dict:
    """Replace one file and rewrite the manifest digests so only recomputation can notice."""
    files = dict(files)
    files[rel] = data
    doc = json.loads(files["manifest.json"])
    doc.pop("manifest_digest")
    doc["files"][rel] = hashlib.sha256(data).hexdigest()
    doc["manifest_digest"] = hashlib.sha256(canonical_json(doc)).hexdigest()
    files["manifest.json"] = canonical_json(doc)
    return files


def test_demo_bundle_verifies_and_is_deterministic(demo_bundle):
    assert verify_bundle(demo_bundle.files).ok
    assert demo_bundle.exit_code == EXIT_OK
    assert demo_bundle.outcome.status == ACCEPTED
    assert demo_bundle.outcome.root == demo_bundle.run.report.root
    again = run_case_study(_demo_doc())
    assert again.files == demo_bundle.files


def _demo_doc() -> dict:
    from importlib import resources

    return json.loads(resources.files("vgov").joinpath("data/demo_scenario.json").read_text())


def test_every_listed_file_has_a_digest(demo_bundle):
    man = demo_bundle.manifest
    assert set(man["files"]) == set(demo_bundle.files) - {"manifest.json"}
    assert man["report_root"] == demo_bundle.run.report.root.hex()


@pytest.mark.parametrize(
    "rel, stage",
    [
        ("stages/trust.bin", "trust"),
        ("stages/weights.bin", "weights"),
        ("stages/aggregate.bin", "aggregate"),
        ("report.md", "report"),
        ("sim/outcome.bin", "sim"),
        ("policy/plans.lines", "policy"),
    ],
)
def test_resealed_corruption_names_the_stage(demo_bundle, rel, stage):
    data = demo_bundle.files[rel]
    bad = data[:-2] + bytes([data[-2] ^ 0x01]) + data[-1:]
    rep = verify_bundle(reseal(demo_bundle.files, rel, bad))
    assert not rep.ok and rep.stage == stage


def test_unresealed_flip_is_a_digest_mismatch(demo_bundle):
    files = dict(demo_bundle.files)
    files["stages/validate.bin"] = b"\x00" + files["stages/validate.bin"][1:]
    rep = verify_bundle(files)
    assert (rep.ok, rep.stage, rep.path) == (False, "validate", "stages/validate.bin")
    assert "sha256" in str(rep)


def test_changed_input_is_caught_by_recomputation(demo_bundle):
    doc = json.loads(demo_bundle.files["inputs/scenario.json"])
    doc["reward"] = "51"
    rep = verify_bundle(reseal(demo_bundle.files, "inputs/scenario.json", canonical_json(doc)))
    assert not rep.ok and rep.stage == "sim"


def test_extra_file_and_manifest_damage(demo_bundle):
    rep = verify_bundle({**demo_bundle.files, "stages/extra.bin": b""})
    assert not rep.ok and rep.path == "stages/extra.bin"
    rep = verify_bundle({**demo_bundle.files, "manifest.json": demo_bundle.files["manifest.json"] + b" "})
    assert not rep.ok and rep.stage == "manifest"


def test_incomplete_bundles(demo_bundle, tmp_path):
    files = dict(demo_bundle.files)
    del files["proofs.lines"]
    with pytest.raises(IncompleteBundle):
        verify_bundle(files)
    with pytest.raises(IncompleteBundle):
        verify_bundle({k: v for k, v in demo_bundle.files.items() if k != "manifest.json"})
    with pytest.raises(IncompleteBundle):
        read_bundle(tmp_path / "nope")


def test_bundle_on_disk_round_trip(demo_bundle, tmp_path):
    for rel, data in demo_bundle.files.items():
        p = tmp_path / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
    assert read_bundle(tmp_path) == demo_bundle.files
    assert verify_bundle(tmp_path).ok


def test_no_quorum_exit_code():
    res = run_case_study({**SMALL, "tamperers": 3})
    assert res.outcome.status == NO_QUORUM and res.exit_code == EXIT_QUORUM
    assert res.funded.raw == 0
    assert verify_bundle(res.files).ok


def test_veto_exit_code():
    authority = demo_keys(12, 5)[1].id.hex()
    base = run_case_study(dict(SMALL))
    assert base.engine.plans, "the small workload should plan a transfer"
    res = run_case_study({**SMALL, "actions": [{"epoch": 2, "kind": "veto", "authority": authority}]})
    assert res.exit_code == EXIT_VETO and res.funded.raw == 0
    assert verify_bundle(res.files).ok


def test_dispute_in_scenario_is_replayed():
    res = run_case_study({**SMALL, "accounts": {"alice": "10"}, "disputes": [{"tick": 3, "task": 0, "challenger": "alice", "bond": "5"}]})
    assert any(e.kind == "dispute" for e in res.world.events)
    assert verify_bundle(res.files).ok


@pytest.mark.parametrize("seed", range(8))
def test_random_scenarios_self_consistent(seed):
    rng = random.Random(seed)
    doc = {
        "seed": seed,
        "workload": {"proposals": rng.randint(2, 10), "evaluations": rng.randint(5, 20), "voters": rng.randint(3, 15)},
        "quorum": rng.choice([[3, 5], [2, 3], [5, 7]]),
        "tamperers": rng.randint(0, 2),
    }
    res = run_case_study(doc)
    assert verify_bundle(res.files).ok
    t, n = doc["quorum"]
    if n - doc["tamperers"] >= t:
        assert res.outcome.status == ACCEPTED and res.outcome.root == res.run.report.root
        assert res.exit_code == EXIT_OK
    else:
        assert res.outcome.status == NO_QUORUM and res.exit_code == EXIT_QUORUM
    assert codec.decode(res.files["sim/outcome.bin"]) == res.outcome


def test_oversized_workload_rejected():
    with pytest.raises(ValueError):
        run_case_study({"seed": 0, "workload": {"proposals": 1, "evaluations": 10, "voters": 4}})


def test_empty_scenario_runs():
    res = run_case_study({"seed": 1})
    assert res.outcome is None and res.exit_code == EXIT_OK
    assert verify_bundle(res.files).ok
