"""Deterministic multi-node simulation.

Everything runs in one process on a seeded discrete-event scheduler:
client arrivals, node-to-node forwarding, the ordering service, block
delivery and checkpoint exchange are all messages with modeled latency.
Identical (config, seed) pairs replay identical runs, which is what makes
fault-injection results and cross-node consistency checkable.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field, replace
from itertools import permutations

from . import contracts, crypto
from .config import ScenarioConfig
from .contracts import CallerCtx
from .encoding import Reader
from .node import (
    COMMITTED,
    AuthError,
    Node,
    NodeStorage,
    SimulatedCrash,
    TimingModel,
)
from .ordering import Block, OrdererConfig, Sequencer
from .store import SnapshotSpec, TxContext
from .txn import NO_HEIGHT, Transaction, make_tx


class ConsistencyError(AssertionError):
    pass


class EventScheduler:
    def __init__(self):
        self.heap = []
        self.counter = 0
        self.now = 0.0

    def schedule(self, delay: float, fn):
        heapq.heappush(self.heap, (self.now + max(delay, 0.0), self.counter, fn))
        self.counter += 1

    def run(self, max_events: int = 5_000_000):
        n = 0
        while self.heap:
            t, _, fn = heapq.heappop(self.heap)
            self.now = t
            fn()
            n += 1
            if n > max_events:
                raise RuntimeError("simulation did not quiesce")


@dataclass
class BlockRecord:
    """Per-block evidence captured on one honest node for the
    serializability oracle."""

    seq: int
    txs: list
    statuses: list  # (gid, status) in block order
    pre_store: object
    post_hash: bytes


@dataclass
class RunReport:
    seed: int
    config: ScenarioConfig
    statuses: dict = field(default_factory=dict)
    state_hashes: dict = field(default_factory=dict)
    committed_heights: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    alarms: list = field(default_factory=list)
    notifications: dict = field(default_factory=dict)
    block_records: list = field(default_factory=list)
    duration_ms: float = 0.0
    faulty_nodes: tuple = ()
    certs_meta: dict = field(default_factory=dict)
    orgs: tuple = ()
    provenance: list = field(default_factory=list)

    def honest_nodes(self):
        return sorted(n for n in self.statuses if n not in self.faulty_nodes)

    def throughput(self, node_id: str) -> float:
        m = self.metrics[node_id]
        dur_s = max(self.duration_ms, 1e-9) / 1000.0
        return (m["committed"] + m["aborted"]) / dur_s


def _copy_tx(tx: Transaction) -> Transaction:
    return Transaction.decode(Reader(tx.encode()))


def _copy_msg(msg):
    kind = msg[0]
    if kind in ("client_tx", "forward_tx", "submit"):
        return (kind, _copy_tx(msg[1]))
    if kind == "block":
        return (kind, Block.decode(msg[1].encode()))
    if kind == "checkpoint":
        return (kind, replace(msg[1]))
    if kind == "blocks_response":
        return (kind, [Block.decode(b.encode()) for b in msg[1]])
    return msg


class NodeEnv:
    """Per-incarnation environment handed to a node; goes dead when the
    node crashes so stale scheduled events are dropped."""

    def __init__(self, sim: "Simulation", node_id: str):
        self.sim = sim
        self.node_id = node_id
        self.alive = True

    def now(self) -> float:
        return self.sim.sched.now

    def schedule(self, delay: float, fn):
        def fire():
            if not self.alive:
                return
            try:
                fn()
            except SimulatedCrash:
                self.sim._crash(self.node_id)

        self.sim.sched.schedule(delay, fire)

    def send_to_node(self, dst: str, msg):
        self.sim.post_to_node(dst, msg)

    def send_to_orderer(self, msg):
        self.sim.post_to_orderer(msg)

    def notify_client(self, gid: bytes, status: str, node_id: str):
        self.sim.notifications.setdefault(gid.hex(), {})[node_id] = status

    def raise_alarm(self, height: int, divergent, detected_by: str):
        self.sim.record_alarm(height, divergent, detected_by)


class OrdererSim:
    def __init__(self, sim: "Simulation", config: ScenarioConfig, key):
        self.sim = sim
        self.seq = Sequencer(
            OrdererConfig(config.block_size, config.block_timeout_ms), key
        )

    def handle(self, msg):
        kind = msg[0]
        if kind == "submit":
            was_empty = not self.seq.pending
            if not self.seq.submit(msg[1]):
                return
            cut_any = False
            while self.seq.size_reached():
                self._cut("size")
                cut_any = True
            if self.seq.pending and (was_empty or cut_any):
                self._arm_timeout()
        elif kind == "checkpoint":
            for nid in self.sim.node_ids:
                self.sim.post_to_node(nid, ("checkpoint", msg[1]))
        elif kind == "fetch":
            _, node_id, from_seq = msg
            blocks = self.seq.blocks_from(from_seq)
            self.sim.post_to_node(node_id, ("blocks_response", blocks))

    def _arm_timeout(self):
        expected = self.seq.next_seq
        self.sim.sched.schedule(
            self.sim.config.block_timeout_ms, lambda: self._timeout(expected)
        )

    def _timeout(self, expected: int):
        block = self.seq.cut_block("time-to-cut", expected)
        if block is not None:
            self._broadcast(block)
        if self.seq.pending:
            self._arm_timeout()

    def _cut(self, trigger: str):
        block = self.seq.cut_block(trigger)
        if block is not None:
            self._broadcast(block)

    def _broadcast(self, block: Block):
        for nid in self.sim.node_ids:
            self.sim.post_to_node(nid, ("block", block))


class Simulation:
    def __init__(self, config: ScenarioConfig, seed: int):
        self.config = config
        self.seed = seed
        self.sched = EventScheduler()
        self.net_rng = random.Random(f"{seed}:net")

        self.orderer_key = crypto.KeyPair.from_seed(f"{seed}:orderer")
        self.node_ids = [f"n{i}" for i in range(config.nodes)]
        self.orgs = tuple(f"org{i}" for i in range(config.orgs))
        self.node_keys = {
            nid: crypto.KeyPair.from_seed(f"{seed}:node:{nid}") for nid in self.node_ids
        }
        node_pubs = {nid: k.public_bytes for nid, k in self.node_keys.items()}

        self.user_keys = {}
        certs = {}
        self.users = []
        for i in range(config.clients):
            u = f"u{i}"
            key = crypto.KeyPair.from_seed(f"{seed}:user:{u}")
            self.user_keys[u] = key
            certs[u] = {
                "org": self.orgs[i % len(self.orgs)],
                "roles": ["client"],
                "pub": key.public_bytes,
            }
            self.users.append(u)
        for org in self.orgs:
            u = f"admin_{org}"
            key = crypto.KeyPair.from_seed(f"{seed}:user:{u}")
            self.user_keys[u] = key
            certs[u] = {"org": org, "roles": ["admin", "client"], "pub": key.public_bytes}
        self.certs = certs

        self.schemas = contracts.default_schemas()
        self.seed_rows = self._seed_rows(config)

        self.orderer = OrdererSim(self, config, self.orderer_key)
        self.storages = {nid: NodeStorage() for nid in self.node_ids}
        self.envs = {}
        self.nodes = {}
        self.down = set()
        for nid in self.node_ids:
            org = self.orgs[self.node_ids.index(nid) % len(self.orgs)]
            self.envs[nid] = NodeEnv(self, nid)
            self.nodes[nid] = self._make_node(nid, org)

        self.faulty = set()
        self.dup_fault = None
        for f in config.faults:
            if f["kind"] == "duplicate_submit":
                self.dup_fault = dict(f)
                continue
            nid = f["node"]
            params = {k: v for k, v in f.items() if k not in ("kind", "node")}
            self.nodes[nid].faults[f["kind"]] = params
            if f["kind"] in ("withhold_commit", "tamper_block", "tamper_row", "corrupt_checkpoint"):
                self.faulty.add(nid)

        self.notifications = {}
        self.alarms = {}
        self.block_records = []
        if config.record_blocks:
            oracle = next(n for n in self.node_ids if n not in self._fault_nodes())
            self.nodes[oracle].commit_observer = self._observe_commit

    def _fault_nodes(self):
        return {f.get("node") for f in self.config.faults if "node" in f}

    def _timing(self) -> TimingModel:
        t = TimingModel(
            default_exec_ms=self.config.default_exec_ms,
            commit_ms=self.config.commit_ms,
        )
        t.exec_ms.update(self.config.exec_ms)
        return t

    def _make_node(self, nid: str, org: str) -> Node:
        return Node(
            node_id=nid,
            org=org,
            flow=self.config.flow,
            env=self.envs[nid],
            key=self.node_keys[nid],
            orderer_pub=self.orderer_key.public_bytes,
            schemas=self.schemas,
            seed_rows=self.seed_rows,
            certs=self.certs,
            node_pubs={n: k.public_bytes for n, k in self.node_keys.items()},
            storage=self.storages[nid],
            checkpoint_k=self.config.checkpoint_k,
            workers=self.config.workers,
            timing=self._timing(),
            same_block_visibility=self.config.same_block_visibility,
            parallel=self.config.parallel,
        )

    @staticmethod
    def _seed_rows(config: ScenarioConfig):
        rows = []
        for k in range(config.hot_keys):
            rows.append(("kv", {"k": k, "v": 0}))
        for item in range(1, 51):
            rows.append(("prices", {"item": item, "price": (item * 7) % 13 + 1}))
        for oid in range(1, 11):
            rows.append(
                ("orders", {"oid": oid, "item": (oid * 3) % 50 + 1, "qty": oid % 5 + 1})
            )
        return rows

    # -- transport ------------------------------------------------------

    def _latency(self) -> float:
        return self.config.latency_ms + self.net_rng.random() * self.config.jitter_ms

    def post_to_node(self, dst: str, msg):
        msg = _copy_msg(msg)

        def deliver():
            if dst in self.down:
                return
            node = self.nodes[dst]
            try:
                node.receive(msg)
            except SimulatedCrash:
                self._crash(dst)
            except AuthError:
                pass

        self.sched.schedule(self._latency(), deliver)

    def post_to_orderer(self, msg):
        msg = _copy_msg(msg)
        self.sched.schedule(self._latency(), lambda: self.orderer.handle(msg))

    # -- crash / restart ------------------------------------------------

    def _crash(self, nid: str):
        self.down.add(nid)
        self.envs[nid].alive = False
        self.sched.schedule(self.config.restart_delay_ms, lambda: self._restart(nid))

    def _restart(self, nid: str):
        org = self.orgs[self.node_ids.index(nid) % len(self.orgs)]
        self.envs[nid] = NodeEnv(self, nid)
        node = self._make_node(nid, org)
        self.nodes[nid] = node
        self.down.discard(nid)
        try:
            node.recover()
        except SimulatedCrash:
            self._crash(nid)

    # -- observations ---------------------------------------------------

    def record_alarm(self, height: int, divergent, detected_by: str):
        key = (height, tuple(divergent))
        self.alarms.setdefault(key, []).append(detected_by)

    def _observe_commit(self, block: Block, pre_store, node: Node):
        statuses = [
            (e.global_id, e.status) for e in node.ledger if e.block == block.seq
        ]
        self.block_records.append(
            BlockRecord(block.seq, list(block.txs), statuses, pre_store, node.state_hash())
        )

    # -- workload -------------------------------------------------------

    def schedule_workload(self):
        rng = random.Random(f"{self.seed}:workload")
        mix = sorted(self.config.contract_mix.items())
        names = [n for n, _ in mix]
        weights = [w for _, w in mix]
        uniq = 10**6
        t = 0.0
        for i in range(self.config.num_txs):
            t += rng.expovariate(1.0 / self.config.arrival_interval_ms)
            user = self.users[rng.randrange(len(self.users))]
            contract = rng.choices(names, weights=weights)[0]
            if contract == "simple_insert":
                args = [uniq, rng.randrange(1000)]
                uniq += 1
            elif contract == "read_modify_write":
                if rng.random() < self.config.conflict_ratio and self.config.hot_keys:
                    args = [rng.randrange(self.config.hot_keys), rng.randrange(1, 10)]
                else:
                    args = [uniq, rng.randrange(1, 10)]
                    uniq += 1
            elif contract == "complex_join":
                args = [uniq]
                uniq += 1
            elif contract == "complex_group":
                lo = rng.randrange(1, 40)
                args = [uniq, lo, lo + 10]
                uniq += 1
            elif contract == "add_order":
                args = [uniq, rng.randrange(1, 51), rng.randint(1, 5)]
                uniq += 1
            else:
                args = [uniq]
                uniq += 1
            gateway = self.node_ids[rng.randrange(len(self.node_ids))]
            self.sched.schedule(
                t, self._client_event(i, user, contract, args, gateway)
            )

    def _client_event(self, i, user, contract, args, gateway):
        def fire():
            tx = self._build_tx(i, user, contract, args, gateway)
            self._submit_tx(tx, gateway)
            if self.dup_fault is not None and self.dup_fault.get("tx_index") == i:
                delay = self.dup_fault.get("delay_ms", 5.0)
                second = self.dup_fault.get(
                    "second_node",
                    self.node_ids[(self.node_ids.index(gateway) + 1) % len(self.node_ids)],
                )
                dup = _copy_tx(tx)
                if self.config.flow == "eo":
                    self.sched.schedule(
                        delay, lambda: self.post_to_node(second, ("client_tx", dup))
                    )
                else:
                    self.sched.schedule(
                        delay, lambda: self.post_to_orderer(("submit", dup))
                    )

        return fire

    def _build_tx(self, i, user, contract, args, gateway):
        if self.config.flow == "eo":
            if gateway in self.down:
                alive = [n for n in self.node_ids if n not in self.down]
                gateway = alive[0] if alive else gateway
            height = self.nodes[gateway].committed_height
            return make_tx(
                self.user_keys[user], user, contract, args, snapshot_height=height, nonce=i
            )
        return make_tx(
            self.user_keys[user], user, contract, args, snapshot_height=NO_HEIGHT, nonce=i
        )

    def _submit_tx(self, tx, gateway):
        if self.config.flow == "eo":
            if gateway in self.down:
                alive = [n for n in self.node_ids if n not in self.down]
                if not alive:
                    return
                gateway = alive[0]
            self.post_to_node(gateway, ("client_tx", tx))
        else:
            self.post_to_orderer(("submit", tx))

    # -- run ------------------------------------------------------------

    def run(self) -> RunReport:
        self.schedule_workload()
        self.sched.run()
        report = RunReport(self.seed, self.config)
        report.duration_ms = max(self.sched.now, 1e-9)
        report.faulty_nodes = tuple(sorted(self.faulty))
        report.certs_meta = {
            u: (c["org"], tuple(c["roles"])) for u, c in self.certs.items()
        }
        report.orgs = self.orgs
        for nid in self.node_ids:
            node = self.nodes[nid]
            report.statuses[nid] = [
                (e.block, e.pos, e.global_id.hex(), e.status)
                for e in sorted(node.ledger, key=lambda e: (e.block, e.pos))
            ]
            report.state_hashes[nid] = node.state_hash().hex()
            report.committed_heights[nid] = node.committed_height
            report.metrics[nid] = node.metrics.as_dict(report.duration_ms)
        report.alarms = [
            {"height": h, "divergent": list(div), "detected_by": sorted(set(by))}
            for (h, div), by in sorted(self.alarms.items())
        ]
        report.notifications = self.notifications
        report.block_records = self.block_records
        honest = report.honest_nodes() or self.node_ids
        report.provenance = self._provenance_dump(self.nodes[honest[0]])
        return report

    def _provenance_dump(self, node: Node) -> list:
        """Every committed row version on one honest node, with the block
        heights and users that created and (if any) superseded it."""
        user_of = {e.global_id: e.username for e in node.ledger}
        user_of[b"genesis"] = "genesis"
        out = []
        store = node.store
        for name in sorted(store.tables):
            tbl = store.tables[name]
            for v in store.provenance_scan(name):
                dx = store.committed_deleter(v)
                out.append(
                    {
                        "table": name,
                        "row": dict(v.row),
                        "key": list(tbl.schema.pk_of(v.row)),
                        "created_block": v.creator_block,
                        "deleted_block": v.deleter_block if dx is not None else None,
                        "created_by": user_of.get(store.gid_of.get(v.xmin), "?"),
                        "deleted_by": user_of.get(store.gid_of.get(dx), None)
                        if dx is not None
                        else None,
                    }
                )
        return out


def run(config: ScenarioConfig, seed: int) -> RunReport:
    return Simulation(config, seed).run()


# ---------------------------------------------------------------------------
# consistency checks and oracles


def check_consistency(report: RunReport):
    """Every honest node must agree on ledger statuses, commit height and
    final state; a committed id must appear exactly once."""
    honest = report.honest_nodes()
    if not honest:
        raise ConsistencyError("no honest nodes to compare")
    ref = honest[0]
    for nid in honest[1:]:
        if report.committed_heights[nid] != report.committed_heights[ref]:
            raise ConsistencyError(
                f"height mismatch {ref}={report.committed_heights[ref]} "
                f"{nid}={report.committed_heights[nid]}"
            )
        if report.statuses[nid] != report.statuses[ref]:
            raise ConsistencyError(f"status vectors differ: {ref} vs {nid}")
        if report.state_hashes[nid] != report.state_hashes[ref]:
            raise ConsistencyError(f"state hashes differ: {ref} vs {nid}")
    committed = [g for _, _, g, s in report.statuses[ref] if s == COMMITTED]
    if len(committed) != len(set(committed)):
        raise ConsistencyError("a transaction committed more than once")
    blocks = [(b, p) for b, p, _, _ in report.statuses[ref]]
    if blocks != sorted(blocks):
        raise ConsistencyError("ledger not in block order")


def replay_serial(pre_store, txs, height, certs_meta, orgs, registry=None):
    """Serially execute `txs` on a clone of the pre-block state; returns
    the resulting store or None if any transaction fails logically."""
    registry = registry or contracts.default_registry()
    store = pre_store.clone()
    lid = max(store.committed | store.aborted) + 1000
    for tx in txs:
        lid += 1
        snap = SnapshotSpec("tx-set", own_tx_id=lid, committed_tx_ids=frozenset(store.committed))
        ctx = TxContext(lid, snap)
        org, roles = certs_meta[tx.username]
        caller = CallerCtx(tx.username, org, tuple(roles), tuple(orgs))
        res = contracts.invoke(store, registry, ctx, tx.contract, tx.args, caller)
        if not res.ok:
            store.rollback(ctx.write_set, lid)
            return None
        store.stamp_block_heights(ctx.write_set, height)
        store.mark_committed(lid, tx.global_id)
    return store


def find_serial_order(record: BlockRecord, certs_meta, orgs, registry=None):
    """Brute-force a serial order of the block's committed transactions
    that reproduces the post-block state.  Returns the order or None."""
    by_gid = {tx.global_id: tx for tx in record.txs}
    committed = [by_gid[g] for g, s in record.statuses if s == COMMITTED]
    for perm in permutations(committed):
        store = replay_serial(
            record.pre_store, perm, record.seq, certs_meta, orgs, registry
        )
        if store is not None and store.state_hash() == record.post_hash:
            return perm
    return None
