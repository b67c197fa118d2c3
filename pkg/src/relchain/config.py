"""Scenario configuration for multi-node simulation runs."""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

FLOWS = ("oe", "eo", "serial")
NETWORKS = ("lan", "wan")
FAULT_KINDS = (
    "crash_restart",
    "withhold_commit",
    "tamper_block",
    "tamper_row",
    "corrupt_checkpoint",
    "drop_forwarding",
    "duplicate_submit",
)
CRASH_POINTS = ("mid_block", "pre_status", "post_status")


class ConfigError(Exception):
    pass


@dataclass
class ScenarioConfig:
    flow: str = "oe"
    nodes: int = 4
    orgs: int = 2
    clients: int = 8
    num_txs: int = 200
    contract_mix: dict = field(
        default_factory=lambda: {"simple_insert": 40, "read_modify_write": 60}
    )
    conflict_ratio: float = 0.3
    hot_keys: int = 20
    arrival_interval_ms: float = 2.0
    block_size: int = 20
    block_timeout_ms: float = 200.0
    network: str = "lan"
    jitter_ms: float = 0.1
    checkpoint_k: int = 5
    workers: int = 8
    parallel: bool = False
    same_block_visibility: str = "exclude"
    exec_ms: dict = field(default_factory=dict)
    default_exec_ms: float = 2.0
    commit_ms: float = 0.5
    restart_delay_ms: float = 50.0
    faults: list = field(default_factory=list)
    record_blocks: bool = False

    def __post_init__(self):
        if self.flow not in FLOWS:
            raise ConfigError(f"flow must be one of {FLOWS}, got {self.flow!r}")
        if self.network not in NETWORKS:
            raise ConfigError(f"network must be one of {NETWORKS}")
        if self.nodes < 1 or self.orgs < 1 or self.clients < 1:
            raise ConfigError("nodes, orgs and clients must be positive")
        if self.num_txs < 0:
            raise ConfigError("num_txs must be non-negative")
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")
        if self.block_timeout_ms <= 0 or self.arrival_interval_ms <= 0:
            raise ConfigError("timeouts and intervals must be positive")
        if not 0.0 <= self.conflict_ratio <= 1.0:
            raise ConfigError("conflict_ratio must be in [0, 1]")
        if self.same_block_visibility not in ("exclude", "include"):
            raise ConfigError("same_block_visibility must be exclude or include")
        if not self.contract_mix or any(w < 0 for w in self.contract_mix.values()):
            raise ConfigError("contract_mix must be non-empty with weights >= 0")
        if sum(self.contract_mix.values()) <= 0:
            raise ConfigError("contract_mix weights sum to zero")
        for f in self.faults:
            self._check_fault(f)

    @staticmethod
    def _check_fault(f):
        if not isinstance(f, dict) or "kind" not in f:
            raise ConfigError(f"fault entry needs a kind: {f!r}")
        if f["kind"] not in FAULT_KINDS:
            raise ConfigError(f"unknown fault kind {f['kind']!r}")
        if f["kind"] != "duplicate_submit" and "node" not in f:
            raise ConfigError(f"fault {f['kind']} needs a target node")
        if f["kind"] == "crash_restart":
            if f.get("point") not in CRASH_POINTS:
                raise ConfigError(f"crash_restart point must be one of {CRASH_POINTS}")
            if "block" not in f:
                raise ConfigError("crash_restart needs a block")

    @property
    def latency_ms(self) -> float:
        return 0.5 if self.network == "lan" else 100.0

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_yaml(cls, path: str) -> "ScenarioConfig":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"bad yaml: {e}") from e
        return cls.from_dict(raw or {})
