"""File-backed workspace: content files plus an append-only digest manifest.

Layout::

    <root>/.gov/manifest.jsonl   one canonical-JSON entry per line, never rewritten
    <root>/.gov/lock             held by any command that writes
    <root>/store.lines           attestation store history
    <root>/keys/<name>.key       hex Ed25519 private keys made by ``gov identity new``
    <root>/...                   everything else a command writes
"""

from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

from filelock import FileLock

from vgov import __version__
from vgov.attestation import AttestationStore, Keypair
from vgov.io import canonical_json


class WorkspaceError(Exception):
    pass


class ManifestMismatch(WorkspaceError):
    pass


@dataclass(frozen=True)
class RunManifest:
    """What was run, on what, producing what; enough to redo it byte for byte."""

    command: list
    inputs: dict  # name -> sha256 hex
    outputs: dict  # name -> sha256 hex
    seed: int
    tool_version: str = __version__
    python: str = field(default_factory=platform.python_version)

    def to_json(self) -> dict:
        return asdict(self)


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Workspace:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.meta = self.root / ".gov"
        self.manifest_path = self.meta / "manifest.jsonl"

    def init(self) -> Workspace:
        self.meta.mkdir(parents=True, exist_ok=True)
        self.manifest_path.touch(exist_ok=True)
        return self

    def lock(self, timeout: float = 30) -> FileLock:
        self.init()
        return FileLock(str(self.meta / "lock"), timeout=timeout)

    # manifest -----------------------------------------------------------
    def entries(self) -> list[dict]:
        if not self.manifest_path.exists():
            return []
        return [json.loads(line) for line in self.manifest_path.read_text().splitlines() if line.strip()]

    def _append(self, entry: dict) -> dict:
        entry = {"seq": len(self.entries()), **entry}
        with open(self.manifest_path, "ab") as fh:
            fh.write(canonical_json(entry) + b"\n")
        return entry

    def write(self, relpath: str, data: bytes, kind: str = "file") -> dict:
        """Write a file under the root and record its digest."""
        target = self.root / relpath
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
        return self._append({"kind": kind, "path": relpath, "sha256": hashlib.sha256(data).hexdigest()})

    def record(self, relpath: str, kind: str = "file") -> dict:
        """Record the digest of a file already written under the root."""
        return self._append({"kind": kind, "path": relpath, "sha256": sha256_file(self.root / relpath)})

    def record_run(self, run: RunManifest) -> dict:
        return self._append({"kind": "run", "run": run.to_json()})

    def latest(self) -> dict[str, str]:
        out = {}
        for e in self.entries():
            if "path" in e:
                out[e["path"]] = e["sha256"]
        return out

    def verify(self) -> list[str]:
        """Paths whose current bytes differ from their latest recorded digest."""
        bad = []
        for i, e in enumerate(self.entries()):
            if e.get("seq") != i:
                bad.append(f"manifest entry {i} out of sequence")
        for path, digest in sorted(self.latest().items()):
            p = self.root / path
            if not p.exists() or sha256_file(p) != digest:
                bad.append(path)
        return bad

    # store and keys -----------------------------------------------------
    @property
    def store_path(self) -> Path:
        return self.root / "store.lines"

    def load_store(self) -> AttestationStore:
        bad = [p for p in self.verify() if p == "store.lines"]
        if bad:
            raise ManifestMismatch("store.lines does not match the workspace manifest")
        return AttestationStore.load(self.store_path)

    def save_store(self, store: AttestationStore) -> None:
        store.dump(self.store_path)
        self.record("store.lines", kind="store")

    def key_path(self, name: str) -> Path:
        if not name or "/" in name or name.startswith("."):
            raise WorkspaceError(f"bad identity name {name!r}")
        return self.root / "keys" / f"{name}.key"

    def new_key(self, name: str, seed: str | None = None) -> Keypair:
        path = self.key_path(name)
        if path.exists():
            raise WorkspaceError(f"identity {name!r} already exists")
        kp = Keypair.from_seed(seed) if seed is not None else Keypair.generate()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(kp.private_bytes().hex() + "\n")
        return kp

    def key(self, name: str) -> Keypair:
        path = self.key_path(name)
        if not path.exists():
            raise WorkspaceError(f"no identity named {name!r}")
        return Keypair.from_private_bytes(bytes.fromhex(path.read_text().strip()))

    def names(self) -> dict[str, bytes]:
        d = self.root / "keys"
        if not d.exists():
            return {}
        return {p.stem: self.key(p.stem).id for p in sorted(d.glob("*.key"))}

    def resolve_identity(self, ref: str) -> bytes:
        """A key name in this workspace, or a 64-char hex identity id."""
        names = self.names()
        if ref in names:
            return names[ref]
        try:
            raw = bytes.fromhex(ref)
        except ValueError:
            raise WorkspaceError(f"unknown identity {ref!r}") from None
        if len(raw) != 32:
            raise WorkspaceError(f"identity id must be 32 bytes: {ref!r}")
        return raw
