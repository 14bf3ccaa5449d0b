"""Verifiable off-chain governance computation: attestations, trust, delegation,
preference aggregation, operator settlement and policy execution."""

__version__ = "0.1.0"
