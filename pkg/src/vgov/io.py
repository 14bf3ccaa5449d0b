"""JSON and line-file loaders shared by the CLI, scenarios and bundles.

Human-edited files are JSON with decimals as strings (``"0.85"``) and
identities as hex. Machine files are canonical records, either a single
encoded value (``.bin``) or hex lines (``.lines``).
"""

from __future__ import annotations

import json
from pathlib import Path

from vgov import codec
from vgov.fixed import as_fixed
from vgov.pipeline import PipelineConfig
from vgov.policy import PolicyWorld
from vgov.proposal import Proposal
from vgov.treasury import PortfolioState
from vgov.trust import TrustConfig


def canonical_json(obj) -> bytes:
    """Sorted keys, no whitespace, ASCII only: one byte string per value."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())


def read_value(path: str | Path):
    return codec.decode(Path(path).read_bytes())


def write_value(path: str | Path, value) -> bytes:
    data = codec.encode(value)
    Path(path).write_bytes(data)
    return data


def read_lines(path: str | Path) -> list:
    with open(path) as fh:
        return codec.load_lines(fh)


def lines_bytes(values) -> bytes:
    return "".join(codec.encode(v).hex() + "\n" for v in values).encode()


def write_lines(path: str | Path, values) -> bytes:
    data = lines_bytes(values)
    Path(path).write_bytes(data)
    return data


def _ident(v, names: dict | None = None) -> bytes:
    if names and v in names:
        return names[v]
    return bytes.fromhex(v)


def trust_config_from_json(doc: dict, names: dict | None = None) -> TrustConfig:
    kwargs = {"seeds": {_ident(k, names): as_fixed(v) for k, v in doc["seeds"].items()}}
    for key in ("damping", "convergence_epsilon"):
        if key in doc:
            kwargs[key] = as_fixed(doc[key])
    for key in ("hop_limit", "max_iterations", "score_scale"):
        if key in doc:
            kwargs[key] = int(doc[key])
    if doc.get("schemas") is not None:
        kwargs["schemas"] = tuple(doc["schemas"])
    return TrustConfig(**kwargs)


def pipeline_config_from_json(doc: dict) -> PipelineConfig:
    kwargs: dict = {}
    if "criteria" in doc:
        kwargs["criteria"] = tuple(doc["criteria"])
    if "criterion_weights" in doc:
        kwargs["criterion_weights"] = {k: as_fixed(v) for k, v in doc["criterion_weights"].items()}
    if "mix" in doc:
        kwargs["mix"] = tuple(as_fixed(v) for v in doc["mix"])
    for key in ("domain_schema", "quadratic_budget", "cluster_by_tags", "seed"):
        if key in doc:
            kwargs[key] = doc[key]
    if "contests" in doc:
        kwargs["contests"] = {k: tuple(v) for k, v in doc["contests"].items()}
    if "context" in doc:
        kwargs["context"] = {k: (v if isinstance(v, bool) else as_fixed(v)) for k, v in doc["context"].items()}
    if "funding_threshold" in doc:
        kwargs["funding_threshold"] = as_fixed(doc["funding_threshold"])
    if "themes" in doc:
        kwargs["themes"] = {k: tuple(v) for k, v in doc["themes"].items()}
    return PipelineConfig(**kwargs)


def proposals_from_file(path: str | Path) -> list[Proposal]:
    path = Path(path)
    if path.suffix == ".lines":
        return [p for p in read_lines(path)]
    return [Proposal.from_mapping(d) for d in read_json(path)]


def portfolio_from_json(doc: dict) -> PortfolioState:
    return PortfolioState(
        {k: as_fixed(v) for k, v in doc["holdings"].items()},
        {k: as_fixed(v) for k, v in doc["targets"].items()},
    )


def world_from_json(doc: dict) -> PolicyWorld:
    return PolicyWorld(
        epoch=int(doc.get("epoch", 0)),
        portfolio=portfolio_from_json(doc["portfolio"]) if doc.get("portfolio") else None,
        metrics={k: as_fixed(v) for k, v in doc.get("metrics", {}).items()},
        flags={k: bool(v) for k, v in doc.get("flags", {}).items()},
        proposals_submitted=tuple((pid, tuple(tags)) for pid, tags in doc.get("proposals_submitted", [])),
        attestation_changes=tuple(doc.get("attestation_changes", [])),
    )
