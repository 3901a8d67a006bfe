"""Cycle-approximate simulator for a DIMM-based near-memory GNN training accelerator."""

__version__ = "0.1.0"
