"""Replicated relational store with serializable snapshot isolation,
block-ordered commits and a deterministic multi-node simulator."""

from .config import ConfigError, ScenarioConfig
from .netsim import RunReport, check_consistency, find_serial_order, run
from .node import Node
from .store import MVStore, TableSchema
from .txn import Transaction, make_tx

__all__ = [
    "ConfigError",
    "ScenarioConfig",
    "RunReport",
    "check_consistency",
    "find_serial_order",
    "run",
    "Node",
    "MVStore",
    "TableSchema",
    "Transaction",
    "make_tx",
]

__version__ = "0.1.0"
