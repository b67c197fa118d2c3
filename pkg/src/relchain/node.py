"""A database peer node.

Runs both transaction flows over the multi-version store: in
order-then-execute (OE) all transactions of a delivered block execute
concurrently against the last committed state and then commit serially in
block order; in execute-order-in-parallel (EO) transactions execute on
arrival at a client-specified snapshot height while ordering happens in
parallel, with missing transactions executed by the committer.  The node
also maintains the durable block store, ledger and per-transaction commit
log that recovery rebuilds from, and exchanges signed write-set
checkpoints to detect divergent peers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from . import contracts, ordering, ssi
from .contracts import CallerCtx, ContractRegistry
from .encoding import (
    Reader,
    enc_bytes,
    enc_scalar,
    enc_scalar_list,
    enc_str,
    enc_uint,
    sha256,
)
from .ordering import Block
from .ssi import ConflictTracker, Decision, TxOrder, TxSSIState
from .store import (
    MVStore,
    NO_BLOCK,
    RowVersion,
    SerializationAbort,
    SnapshotSpec,
    TxContext,
)
from .txn import Transaction
from . import crypto

OE = "oe"
EO = "eo"
SERIAL = "serial"  # order-then-execute with serial execution (baseline)

COMMITTED = "committed"
ABORTED = "aborted"


class AuthError(Exception):
    pass


class UnknownUser(AuthError):
    pass


class BadSignature(AuthError):
    pass


class DuplicateId(AuthError):
    pass


class CorruptLedger(Exception):
    pass


class SimulatedCrash(Exception):
    """Raised by fault injection; the harness rebuilds the node from its
    durable logs."""


# ---------------------------------------------------------------------------
# durable append-only logs


class DurableLog:
    """Length-prefixed records, each followed by its own hash.  The
    backing buffer is owned by the harness and survives node restarts."""

    def __init__(self, buf: bytearray):
        self.buf = buf

    def append(self, record: bytes):
        self.buf += len(record).to_bytes(4, "big") + record + sha256(record)

    def records(self) -> list[bytes]:
        out = []
        pos = 0
        buf = bytes(self.buf)
        while pos + 4 <= len(buf):
            n = int.from_bytes(buf[pos : pos + 4], "big")
            end = pos + 4 + n + 32
            if end > len(buf):
                break  # torn tail from a crash mid-append
            rec = buf[pos + 4 : pos + 4 + n]
            if sha256(rec) != buf[pos + 4 + n : end]:
                break
            out.append(rec)
            pos = end
        return out


class NodeStorage:
    """Durable media for one node: named append-only logs."""

    def __init__(self):
        self.buffers: dict[str, bytearray] = {}

    def log(self, name: str) -> DurableLog:
        return DurableLog(self.buffers.setdefault(name, bytearray()))


# ---------------------------------------------------------------------------
# ledger records


@dataclass
class LedgerEntry:
    block: int
    pos: int
    global_id: bytes
    username: str
    contract: str
    args: list
    local_id: Optional[int] = None
    status: Optional[str] = None
    commit_time: Optional[float] = None


@dataclass
class CheckpointRecord:
    node_id: str
    height: int
    ws_hash: bytes
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return sha256(enc_str(self.node_id) + enc_uint(self.height) + self.ws_hash)


@dataclass
class TxRuntime:
    tx: Transaction
    local_id: Optional[int] = None
    state: Optional[TxSSIState] = None
    ctx: Optional[TxContext] = None
    status: Optional[str] = None  # decided final status
    reason: str = ""
    exec_done_at: float = 0.0
    exec_ms: float = 0.0


@dataclass
class NodeMetrics:
    blocks_received: int = 0
    blocks_processed: int = 0
    txs_committed: int = 0
    txs_aborted: int = 0
    missing_txs: int = 0
    sum_bpt: float = 0.0
    sum_bet: float = 0.0
    sum_bct: float = 0.0
    sum_tet: float = 0.0
    txs_executed: int = 0
    busy_time: float = 0.0

    def as_dict(self, duration_ms: float) -> dict:
        dur_s = max(duration_ms, 1e-9) / 1000.0
        n = max(self.blocks_processed, 1)
        return {
            "brr": self.blocks_received / dur_s,
            "bpr": self.blocks_processed / dur_s,
            "bpt": self.sum_bpt / n,
            "bet": self.sum_bet / n,
            "bct": self.sum_bct / n,
            "tet": self.sum_tet / max(self.txs_executed, 1),
            "mt": self.missing_txs / dur_s,
            "su": (self.busy_time / max(duration_ms, 1e-9)) * 100.0,
            "committed": self.txs_committed,
            "aborted": self.txs_aborted,
        }


DEFAULT_EXEC_MS = {
    "simple_insert": 2.0,
    "read_modify_write": 2.0,
    "complex_join": 8.0,
    "complex_group": 6.0,
}


@dataclass
class TimingModel:
    exec_ms: dict = field(default_factory=lambda: dict(DEFAULT_EXEC_MS))
    default_exec_ms: float = 2.0
    commit_ms: float = 0.5

    def exec_cost(self, contract: str) -> float:
        return self.exec_ms.get(contract, self.default_exec_ms)


class Node:
    def __init__(
        self,
        node_id: str,
        org: str,
        flow: str,
        env,
        key: crypto.KeyPair,
        orderer_pub: bytes,
        schemas,
        seed_rows,
        certs: dict,
        node_pubs: dict,
        registry: ContractRegistry = None,
        storage: NodeStorage = None,
        checkpoint_k: int = 5,
        workers: int = 8,
        timing: TimingModel = None,
        same_block_visibility: str = "exclude",
        parallel: bool = False,
    ):
        self.node_id = node_id
        self.org = org
        self.flow = flow
        self.env = env
        self.key = key
        self.orderer_pub = orderer_pub
        self.schemas = list(schemas)
        self.seed_rows = [(t, dict(r)) for t, r in seed_rows]
        self.certs = {u: dict(c) for u, c in certs.items()}
        self.node_pubs = dict(node_pubs)
        self.registry = registry or contracts.default_registry()
        self.storage = storage or NodeStorage()
        self.checkpoint_k = checkpoint_k
        self.workers = max(1, workers)
        self.timing = timing or TimingModel()
        self.same_block_visibility = same_block_visibility
        self.parallel = parallel

        self.store = MVStore()
        for s in self.schemas:
            self.store.create_table(s)
        for t, r in self.seed_rows:
            self.store.seed_row(t, r)

        self.tracker = ConflictTracker()
        self.runtime: dict[bytes, TxRuntime] = {}
        self.runtime_by_local: dict[int, TxRuntime] = {}
        self.ledger: list[LedgerEntry] = []
        self.ledger_ids: dict[bytes, Optional[str]] = {}
        self.committed_height = 0
        self.next_local_id = 1
        self.deferred: list[Transaction] = []
        self.block_queue: list[Block] = []
        self.out_of_order: dict[int, Block] = {}
        self.processing = False
        self.processing_seq: Optional[int] = None
        self.halted = False
        self.fetch_inflight = False
        self._withheld_once = False
        self._ledgered_seqs: set[int] = set()

        self.checkpoints: dict[int, dict[str, bytes]] = {}
        self.alarmed_heights: set[int] = set()
        self.contract_versions: dict[str, int] = {
            n: d.version for n, d in self.registry.contracts.items()
        }

        self.metrics = NodeMetrics()
        self.faults: dict[str, dict] = {}
        # optional hook: called as (block, pre_commit_store_clone, node)
        # after each block commits; used by consistency oracles
        self.commit_observer = None

        self.block_log = self.storage.log("blocks")
        self.ledger_log = self.storage.log("ledger")
        self.tx_log = self.storage.log("txlog")

    # ------------------------------------------------------------------
    # authentication

    def authenticate(self, tx: Transaction) -> dict:
        cert = self.certs.get(tx.username)
        if cert is None:
            raise UnknownUser(tx.username)
        if tx.is_eo and tx.compute_id() != tx.global_id:
            raise BadSignature("transaction id does not recompute")
        if not tx.verify_sig(cert["pub"]):
            raise BadSignature(tx.username)
        if tx.global_id in self.ledger_ids:
            raise DuplicateId(tx.global_id.hex())
        return cert

    def caller_ctx(self, tx: Transaction, cert: dict) -> CallerCtx:
        orgs = tuple(sorted({c["org"] for c in self.certs.values()}))
        return CallerCtx(tx.username, cert["org"], tuple(cert["roles"]), orgs)

    # ------------------------------------------------------------------
    # EO client entry / forwarding

    def handle_client_tx(self, tx: Transaction):
        if self.halted:
            return
        cert = self.authenticate(tx)  # raises to the client on failure
        if tx.global_id in self.runtime:
            return  # duplicate in flight
        if "drop_forwarding" not in self.faults:
            for peer in self.node_pubs:
                if peer != self.node_id:
                    self.env.send_to_node(peer, ("forward_tx", tx))
        self.env.send_to_orderer(("submit", tx))
        self._admit(tx, cert)

    def receive_forwarded(self, tx: Transaction):
        if self.halted:
            return
        try:
            cert = self.authenticate(tx)
        except AuthError:
            return
        if tx.global_id in self.runtime:
            return
        self._admit(tx, cert)

    def _admit(self, tx: Transaction, cert: dict):
        if self.committed_height >= tx.snapshot_height:
            self._start_execution(tx, cert)
        else:
            # run once the node has committed up to the snapshot height
            self.deferred.append(tx)
            self.runtime[tx.global_id] = TxRuntime(tx)

    def _release_deferred(self):
        ready = [t for t in self.deferred if t.snapshot_height <= self.committed_height]
        self.deferred = [
            t for t in self.deferred if t.snapshot_height > self.committed_height
        ]
        for tx in ready:
            rt = self.runtime.get(tx.global_id)
            if rt is not None and rt.local_id is not None:
                continue  # already started (e.g. as a missing tx)
            cert = self.certs.get(tx.username)
            if cert is not None:
                self._start_execution(tx, cert)

    # ------------------------------------------------------------------
    # execution

    def _alloc_local(self) -> int:
        lid = self.next_local_id
        self.next_local_id += 1
        return lid

    def _start_execution(
        self, tx: Transaction, cert: dict, include_height: Optional[int] = None
    ) -> TxRuntime:
        lid = self._alloc_local()
        snap = SnapshotSpec(
            "block-height",
            own_tx_id=lid,
            snapshot_height=tx.snapshot_height,
            include_height=include_height,
        )
        return self._execute(tx, cert, lid, snap)

    def _execute(self, tx, cert, lid, snap, run=True) -> TxRuntime:
        state = TxSSIState(tx.global_id, lid)
        ctx = TxContext(lid, snap, ssi=state, tracker=self.tracker)
        rt = TxRuntime(tx, lid, state, ctx)
        rt.exec_ms = self.timing.exec_cost(tx.contract)
        rt.exec_done_at = self.env.now() + rt.exec_ms
        self.runtime[tx.global_id] = rt
        self.runtime_by_local[lid] = rt
        self.tracker.add(state)
        self.metrics.sum_tet += rt.exec_ms
        self.metrics.txs_executed += 1
        if run:
            self._run_contract(rt, cert)
        return rt

    def _run_contract(self, rt: TxRuntime, cert: dict):
        tx = rt.tx
        try:
            res = contracts.invoke(
                self.store,
                self.registry,
                rt.ctx,
                tx.contract,
                tx.args,
                self.caller_ctx(tx, cert),
            )
        except SerializationAbort as e:
            self._abort_runtime(rt, f"{type(e).__name__}: {e}")
            return
        if not res.ok:
            self._abort_runtime(rt, res.reason)
        else:
            rt.state.status = ssi.READY

    def _abort_runtime(self, rt: TxRuntime, reason: str):
        if rt.status is not None:
            return
        if rt.ctx is not None:
            self.store.rollback(rt.ctx.write_set, rt.local_id)
        if rt.state is not None:
            self.tracker.drop(rt.state)
        rt.status = ABORTED
        rt.reason = reason

    # ------------------------------------------------------------------
    # block intake

    def receive_block(self, block: Block):
        if self.halted:
            return
        expected = self._next_block_seq()
        tampered = self._maybe_tamper_block(block)
        if not tampered:
            try:
                ordering.verify_block(
                    block, expected, self._prev_hash(), self.orderer_pub
                )
            except ordering.OutOfSequence:
                if block.seq > expected:
                    self.out_of_order[block.seq] = block
                    self._request_missing(expected)
                return
            except ordering.OrderingError:
                return  # reject invalid block
        elif block.seq != expected:
            self.out_of_order[block.seq] = block
            return
        self.metrics.blocks_received += 1
        self.block_log.append(block.encode())
        self.block_queue.append(block)
        while (next_seq := self._next_block_seq()) in self.out_of_order:
            nxt = self.out_of_order.pop(next_seq)
            self.metrics.blocks_received += 1
            self.block_log.append(nxt.encode())
            self.block_queue.append(nxt)
        self._process_next()

    def _next_block_seq(self) -> int:
        hi = self.committed_height
        if self.processing_seq is not None:
            hi = max(hi, self.processing_seq)
        if self.block_queue:
            hi = max(hi, max(b.seq for b in self.block_queue))
        return hi + 1

    def _prev_hash(self) -> bytes:
        recs = self.block_log.records()
        if not recs:
            return ordering.ZERO_HASH
        return Block.decode(recs[-1]).this_hash

    def _request_missing(self, from_seq: int):
        if not self.fetch_inflight:
            self.fetch_inflight = True
            self.env.send_to_orderer(("fetch", self.node_id, from_seq))

    def receive_blocks_response(self, blocks: list):
        self.fetch_inflight = False
        for b in blocks:
            self.receive_block(b)

    # ------------------------------------------------------------------
    # block processing pipeline

    def _process_next(self):
        if self.processing or self.halted or not self.block_queue:
            return
        block = self.block_queue.pop(0)
        self.processing = True
        self.processing_seq = block.seq
        now = self.env.now()
        # atomically record the block's transactions in the ledger
        self._ledger_append_entries(block)
        bet = self._prepare_execution(block, now)
        bct = len(block.txs) * self.timing.commit_ms
        bpt = bet + bct
        self.metrics.sum_bet += bet
        self.metrics.sum_bct += bct
        self.metrics.sum_bpt += bpt
        self.metrics.busy_time += bpt
        self.env.schedule(bpt, lambda: self._commit_and_continue(block, bet, bct))

    def _commit_and_continue(self, block: Block, bet: float, bct: float):
        pre = self.store.clone() if self.commit_observer is not None else None
        try:
            self._do_commit(block)
        finally:
            self.processing = False
            self.processing_seq = None
        self.metrics.blocks_processed += 1
        if self.commit_observer is not None:
            self.commit_observer(block, pre, self)
        self._release_deferred()
        self._maybe_checkpoint()
        self._process_next()

    def _prepare_execution(self, block: Block, now: float) -> float:
        """Start (or account for) execution of the block's transactions
        and return the modeled block execution time."""
        if self.flow == SERIAL:
            total = 0.0
            for tx in block.txs:
                cost = self.timing.exec_cost(tx.contract)
                total += cost
                self.metrics.sum_tet += cost
                self.metrics.txs_executed += 1
            return total

        if self.flow == OE:
            committed = frozenset(self.store.committed)
            worker_free = [0.0] * self.workers
            batch = []
            for tx in block.txs:
                if tx.global_id in self.ledger_ids and self.ledger_ids[tx.global_id]:
                    continue
                try:
                    cert = self.authenticate_in_block(tx)
                except AuthError as e:
                    self.runtime[tx.global_id] = TxRuntime(
                        tx, status=ABORTED, reason=f"{type(e).__name__}"
                    )
                    continue
                lid = self._alloc_local()
                snap = SnapshotSpec("tx-set", own_tx_id=lid, committed_tx_ids=committed)
                rt = self._execute(tx, cert, lid, snap, run=False)
                batch.append((rt, cert))
                w = min(range(self.workers), key=lambda i: worker_free[i])
                worker_free[w] += rt.exec_ms
            if self.parallel and len(batch) > 1:
                from concurrent.futures import ThreadPoolExecutor

                with ThreadPoolExecutor(max_workers=self.workers) as pool:
                    list(pool.map(lambda rc: self._run_contract(*rc), batch))
            else:
                for rt, cert in batch:
                    self._run_contract(rt, cert)
            return max(worker_free) if worker_free else 0.0

        # EO: execute any missing transactions, wait for the rest
        worker_free = [0.0] * self.workers
        waiting = 0.0
        include = block.seq if self.same_block_visibility == "include" else None
        for tx in block.txs:
            rt = self.runtime.get(tx.global_id)
            if rt is not None and rt.local_id is not None:
                waiting = max(waiting, rt.exec_done_at - now, 0.0)
                continue
            # missing (never forwarded, or still deferred): run it now
            self.metrics.missing_txs += 1
            try:
                cert = self.authenticate_in_block(tx)
            except AuthError as e:
                self.runtime[tx.global_id] = TxRuntime(
                    tx, status=ABORTED, reason=f"{type(e).__name__}"
                )
                continue
            if tx.snapshot_height > self.committed_height:
                self.runtime[tx.global_id] = TxRuntime(
                    tx, status=ABORTED, reason="snapshot beyond chain"
                )
                continue
            nrt = self._start_execution(tx, cert, include_height=include)
            w = min(range(self.workers), key=lambda i: worker_free[i])
            worker_free[w] += nrt.exec_ms
        makespan = max(worker_free) if worker_free else 0.0
        return max(makespan, waiting)

    def authenticate_in_block(self, tx: Transaction) -> dict:
        """Like authenticate(), but a tx already recorded in the ledger
        for an earlier block is a duplicate (at-most-once commit)."""
        cert = self.certs.get(tx.username)
        if cert is None:
            raise UnknownUser(tx.username)
        if tx.is_eo and tx.compute_id() != tx.global_id:
            raise BadSignature("transaction id does not recompute")
        if not tx.verify_sig(cert["pub"]):
            raise BadSignature(tx.username)
        if self.ledger_ids.get(tx.global_id) is not None:
            raise DuplicateId(tx.global_id.hex())
        return cert

    # ------------------------------------------------------------------
    # serial commit pass

    def _do_commit(self, block: Block):
        order = TxOrder(block.seq, [tx.global_id for tx in block.txs])
        withhold = self.faults.get("withhold_commit")
        statuses: list[tuple] = []
        crash = self.faults.get("crash_restart")
        crash_here = crash is not None and crash.get("block") == block.seq
        mid_point = len(block.txs) // 2 if crash_here and crash["point"] == "mid_block" else None

        for pos, tx in enumerate(block.txs):
            if mid_point is not None and pos == mid_point:
                raise SimulatedCrash("mid_block")
            if self.flow == SERIAL:
                self._serial_execute_and_commit(block, pos, tx, statuses)
                continue
            rt = self.runtime.get(tx.global_id)
            seen_before = self.ledger_ids.get(tx.global_id) is not None
            if rt is None or seen_before:
                statuses.append((tx.global_id, None, ABORTED, "duplicate or unknown"))
                self._txlog_status(block.seq, pos, tx.global_id, ABORTED)
                continue
            if rt.status == ABORTED:
                statuses.append((tx.global_id, rt.local_id, ABORTED, rt.reason))
                self._txlog_status(block.seq, pos, tx.global_id, ABORTED)
                self._cleanup_runtime(rt)
                continue

            state = rt.state
            decision = self._decide(state, order)
            for victim in decision.victims:
                if victim is state:
                    continue
                vrt = self.runtime_by_local.get(victim.local_id)
                if vrt is not None:
                    self._abort_runtime(vrt, "ssi victim")
            committing = decision.commit and state not in decision.victims
            if committing and withhold is not None and withhold.get("block") == block.seq:
                wpos = withhold.get("pos")
                if wpos == pos or (wpos is None and not self._withheld_once):
                    committing = False
                    self._withheld_once = True
                    rt.reason = "withheld"
            if not committing:
                self._abort_runtime(rt, rt.reason or "ssi abort")
                statuses.append((tx.global_id, rt.local_id, ABORTED, rt.reason))
                self._txlog_status(block.seq, pos, tx.global_id, ABORTED)
                self._cleanup_runtime(rt)
                continue
            # lock-free ww resolution: first committer in block order wins
            for op in rt.ctx.write_set:
                if op.old is not None and len(op.old.xmax) > 1:
                    for vid in ssi.resolve_ww(op.old, state, self.store.committed):
                        vrt = self.runtime_by_local.get(vid)
                        if vrt is not None:
                            self._abort_runtime(vrt, "ww loser")
            self.store.stamp_block_heights(rt.ctx.write_set, block.seq)
            self.store.mark_committed(rt.local_id, tx.global_id)
            self.tracker.note_committed(state)
            self._txlog_commit(block.seq, pos, tx.global_id, rt.ctx.write_set)
            self._apply_system_effects(tx)
            statuses.append((tx.global_id, rt.local_id, COMMITTED, ""))
            self._cleanup_runtime(rt)

        self._apply_tamper_row(block.seq)
        if crash_here and crash["point"] == "pre_status":
            raise SimulatedCrash("pre_status")
        self._ledger_append_statuses(block.seq, statuses)
        self.committed_height = block.seq
        for gid, lid, status, _ in statuses:
            self.env.notify_client(gid, status, self.node_id)
            if status == COMMITTED:
                self.metrics.txs_committed += 1
            else:
                self.metrics.txs_aborted += 1
        if crash_here and crash["point"] == "post_status":
            raise SimulatedCrash("post_status")

    def _decide(self, state: TxSSIState, order: TxOrder) -> Decision:
        state.status = ssi.READY
        if self.flow == EO:
            return ssi.decide_block_aware(state, order)
        return ssi.decide_standard(state)

    def _serial_execute_and_commit(self, block, pos, tx, statuses):
        """Ethereum-style baseline: execute and commit one at a time."""
        try:
            cert = self.authenticate_in_block(tx)
        except AuthError as e:
            statuses.append((tx.global_id, None, ABORTED, type(e).__name__))
            self._txlog_status(block.seq, pos, tx.global_id, ABORTED)
            return
        lid = self._alloc_local()
        snap = SnapshotSpec(
            "tx-set", own_tx_id=lid, committed_tx_ids=frozenset(self.store.committed)
        )
        ctx = TxContext(lid, snap)
        res = contracts.invoke(
            self.store, self.registry, ctx, tx.contract, tx.args, self.caller_ctx(tx, cert)
        )
        if not res.ok:
            self.store.rollback(ctx.write_set, lid)
            statuses.append((tx.global_id, lid, ABORTED, res.reason))
            self._txlog_status(block.seq, pos, tx.global_id, ABORTED)
            return
        self.store.stamp_block_heights(ctx.write_set, block.seq)
        self.store.mark_committed(lid, tx.global_id)
        self._txlog_commit(block.seq, pos, tx.global_id, ctx.write_set)
        self._apply_system_effects(tx)
        statuses.append((tx.global_id, lid, COMMITTED, ""))

    def _cleanup_runtime(self, rt: TxRuntime):
        if rt.state is not None and rt.state.undecided:
            rt.state.status = ssi.ABORTED
        # keep the runtime entry (it answers duplicate checks) but free maps
        if rt.local_id is not None:
            self.runtime_by_local.pop(rt.local_id, None)

    def _apply_system_effects(self, tx: Transaction):
        """Registry / certificate changes take effect at commit so that
        every node applies them at the same height."""
        if tx.contract == "submit_deployTx":
            pid = tx.args[0]
            rows = self.store.provenance_scan(
                "sys_deployments", lambda v: v.row["pid"] == pid
            )
            live = [v for v in rows if self.store.committed_deleter(v) is None]
            if not live:
                return
            rec = json.loads(live[-1].row["record"])
            if rec.get("state") != "executed":
                return
            name = rec["contract"]
            if rec["action"] in ("replace", "drop"):
                for other in list(self.runtime.values()):
                    if (
                        other.status is None
                        and other.local_id is not None
                        and other.tx.contract == name
                        and other.local_id not in self.store.committed
                    ):
                        self._abort_runtime(other, "contract replaced")
            self.registry.apply_deployment(
                rec["action"], name, rec["library_ref"], rec["version"]
            )
            self.contract_versions[name] = rec["version"]
        elif tx.contract == "add_user":
            username, org, roles_csv, pubkey_hex = tx.args
            self.certs[username] = {
                "org": org,
                "roles": sorted(roles_csv.split(",")),
                "pub": bytes.fromhex(pubkey_hex),
            }
        elif tx.contract == "drop_user":
            self.certs.pop(tx.args[0], None)

    # ------------------------------------------------------------------
    # ledger / tx log encoding

    def _ledger_append_entries(self, block: Block):
        if block.seq not in self._ledgered_seqs:
            rec = b"E" + enc_uint(block.seq) + enc_uint(len(block.txs))
            for tx in block.txs:
                rec += enc_bytes(tx.encode())
            self.ledger_log.append(rec)
            self._ledgered_seqs.add(block.seq)
        for pos, tx in enumerate(block.txs):
            entry = LedgerEntry(
                block.seq, pos, tx.global_id, tx.username, tx.contract, list(tx.args)
            )
            self.ledger.append(entry)
            self.ledger_ids.setdefault(tx.global_id, None)

    def _ledger_append_statuses(self, seq: int, statuses: list):
        rec = b"S" + enc_uint(seq) + enc_uint(len(statuses))
        now = self.env.now()
        for gid, lid, status, _ in statuses:
            rec += enc_bytes(gid)
            rec += enc_uint(lid if lid is not None else NO_BLOCK)
            rec += enc_str(status)
        self.ledger_log.append(rec)
        by_gid = {gid: (lid, status) for gid, lid, status, _ in statuses}
        for entry in self.ledger:
            if entry.block == seq and entry.global_id in by_gid:
                lid, status = by_gid[entry.global_id]
                entry.local_id = lid if lid != NO_BLOCK else None
                entry.status = status
                entry.commit_time = now
                self.ledger_ids[entry.global_id] = status

    def _txlog_status(self, seq: int, pos: int, gid: bytes, status: str):
        rec = b"A" + enc_uint(seq) + enc_uint(pos) + enc_bytes(gid)
        self.tx_log.append(rec)

    def _txlog_commit(self, seq: int, pos: int, gid: bytes, write_set):
        rec = b"C" + enc_uint(seq) + enc_uint(pos) + enc_bytes(gid)
        rec += enc_bytes(self._encode_write_set(write_set))
        self.tx_log.append(rec)

    def _encode_write_set(self, write_set) -> bytes:
        out = enc_uint(len(write_set))
        for op in write_set:
            out += enc_str(op.kind) + enc_str(op.table)
            schema = self.store.schema(op.table)
            if op.old is not None:
                out += enc_scalar_list([op.old.row[c] for c in schema.primary_key])
                out += enc_uint(
                    op.old.creator_block if op.old.creator_block is not None else NO_BLOCK
                )
                out += enc_str(self.store.gid_of.get(op.old.xmin, b"").hex())
            if op.new is not None:
                out += enc_scalar_list(
                    [op.new.row[c] for c in schema.column_names()]
                )
        return out

    # ------------------------------------------------------------------
    # checkpointing

    def _maybe_checkpoint(self):
        h = self.committed_height
        if self.checkpoint_k < 1 or h == 0 or h % self.checkpoint_k != 0:
            return
        if h in self.checkpoints and self.node_id in self.checkpoints[h]:
            return
        ws_hash = self.write_set_hash(h - self.checkpoint_k, h)
        if "corrupt_checkpoint" in self.faults:
            ws_hash = bytes([ws_hash[0] ^ 0xFF]) + ws_hash[1:]
        rec = CheckpointRecord(self.node_id, h, ws_hash)
        rec.signature = self.key.sign(rec.signed_bytes())
        self.checkpoints.setdefault(h, {})[self.node_id] = ws_hash
        self.env.send_to_orderer(("checkpoint", rec))
        self._compare_checkpoints(h)

    def write_set_hash(self, lo: int, hi: int) -> bytes:
        """Hash of all state changes committed in blocks (lo, hi]."""
        records = []
        for name in sorted(self.store.tables):
            tbl = self.store.tables[name]
            for v in tbl.versions:
                if v.xmin not in self.store.committed:
                    continue
                c, d = v.creator_block, v.deleter_block
                if c is not None and lo < c <= hi:
                    rec = b"c" + enc_str(name)
                    rec += b"".join(
                        enc_scalar(v.row[col]) for col in tbl.schema.column_names()
                    )
                    rec += enc_uint(c)
                    rec += enc_str(self.store.gid_of.get(v.xmin, b"").hex())
                    records.append(rec)
                if d is not None and lo < d <= hi:
                    dx = self.store.committed_deleter(v)
                    rec = b"d" + enc_str(name)
                    rec += b"".join(
                        enc_scalar(v.row[col]) for col in tbl.schema.primary_key
                    )
                    rec += enc_uint(c if c is not None else NO_BLOCK)
                    rec += enc_uint(d)
                    rec += enc_str(
                        self.store.gid_of.get(dx, b"").hex() if dx is not None else ""
                    )
                    records.append(rec)
        records.sort()
        return sha256(b"writeset:" + b"".join(records))

    def receive_checkpoint(self, rec: CheckpointRecord):
        if self.halted:
            return
        pub = self.node_pubs.get(rec.node_id)
        if pub is None or not crypto.verify(pub, rec.signature, rec.signed_bytes()):
            return
        self.checkpoints.setdefault(rec.height, {})[rec.node_id] = rec.ws_hash
        self._compare_checkpoints(rec.height)

    def _compare_checkpoints(self, height: int):
        recs = self.checkpoints.get(height, {})
        if len(recs) < len(self.node_pubs) or height in self.alarmed_heights:
            return
        groups: dict[bytes, list] = {}
        for nid, h in recs.items():
            groups.setdefault(h, []).append(nid)
        if len(groups) <= 1:
            return
        majority = max(groups.values(), key=lambda g: (len(g), g))
        divergent = sorted(n for g in groups.values() if g is not majority for n in g)
        self.alarmed_heights.add(height)
        self.env.raise_alarm(height, divergent, self.node_id)
        if self.node_id in divergent:
            self.halted = True  # divergent node halts in simulation

    # ------------------------------------------------------------------
    # fault helpers

    def _maybe_tamper_block(self, block: Block) -> bool:
        spec = self.faults.get("tamper_block")
        if spec is None or spec.get("block") != block.seq or not block.txs:
            return False
        tx = block.txs[0]
        if tx.args and isinstance(tx.args[-1], int):
            tx.args[-1] += 1
        else:
            tx.args.append(1)
        return True

    def _apply_tamper_row(self, seq: int):
        spec = self.faults.get("tamper_row")
        if spec is None or spec.get("block") != seq:
            return
        for name in sorted(self.store.tables):
            tbl = self.store.tables[name]
            for v in reversed(tbl.versions):
                if v.creator_block == seq and v.xmin in self.store.committed:
                    for col, ctype in tbl.schema.columns:
                        if col not in tbl.schema.primary_key and ctype == "integer":
                            v.row[col] = v.row[col] + 1
                            return

    # ------------------------------------------------------------------
    # recovery

    def recover(self):
        """Rebuild volatile state from the durable logs after a restart.

        The last ledgered block either has statuses (nothing to do), has a
        complete per-tx commit log (backfill the statuses), or is partial
        (discard its effects and re-execute the whole block).
        """
        blocks = [Block.decode(r) for r in self.block_log.records()]
        blocks_by_seq = {b.seq: b for b in blocks}
        entry_batches, status_batches = self._parse_ledger_log()
        txlog = self._parse_tx_log()

        if entry_batches:
            last = max(entry_batches)
            if last in blocks_by_seq:
                ledger_gids = [t.global_id for t in entry_batches[last]]
                block_gids = [t.global_id for t in blocks_by_seq[last].txs]
                if ledger_gids != block_gids:
                    raise CorruptLedger(f"block {last} tx set mismatch")
        else:
            last = 0

        replay_to = 0
        if last > 0:
            if last in status_batches:
                replay_to = last
            else:
                txs = entry_batches[last]
                recs = txlog.get(last, {})
                # partial commit log: discard the block and re-execute it
                replay_to = last if all(t.global_id in recs for t in txs) else last - 1

        self._ledgered_seqs = set(entry_batches)
        self._rebuild_from_logs(entry_batches, status_batches, txlog, replay_to)
        if last > 0 and last in status_batches:
            pass  # fully recorded: nothing further for the last block
        elif last > 0 and replay_to == last:
            # committed but crashed before the status write: backfill
            statuses = self._statuses_from_txlog(entry_batches[last], txlog[last])
            self._ledger_append_statuses(last, statuses)

        # re-run any stored blocks beyond the rebuilt height (including a
        # partially committed last block), then fetch whatever was missed
        for seq in sorted(blocks_by_seq):
            if seq > self.committed_height:
                self.block_queue.append(blocks_by_seq[seq])
        self._process_next()
        self._request_missing(self._next_block_seq())

    def _parse_ledger_log(self):
        entries: dict[int, list] = {}
        statuses: dict[int, list] = {}
        for rec in self.ledger_log.records():
            r = Reader(rec[1:])
            if rec[:1] == b"E":
                seq = r.uint()
                n = r.uint()
                entries[seq] = [Transaction.decode(Reader(r.bytes_())) for _ in range(n)]
            else:
                seq = r.uint()
                n = r.uint()
                out = []
                for _ in range(n):
                    gid = r.bytes_()
                    lid = r.uint()
                    status = r.str_()
                    out.append((gid, lid, status))
                statuses[seq] = out
        return entries, statuses

    def _parse_tx_log(self):
        out: dict[int, dict[bytes, tuple]] = {}
        for rec in self.tx_log.records():
            kind = rec[:1]
            r = Reader(rec[1:])
            seq = r.uint()
            pos = r.uint()
            gid = r.bytes_()
            ws = r.bytes_() if kind == b"C" else None
            out.setdefault(seq, {})[gid] = (pos, COMMITTED if kind == b"C" else ABORTED, ws)
        return out

    def _statuses_from_txlog(self, txs, recs):
        statuses = []
        for tx in txs:
            _, status, _ = recs[tx.global_id]
            statuses.append((tx.global_id, None, status, ""))
        return statuses

    def _rebuild_from_logs(self, entry_batches, status_batches, txlog, replay_to):
        for seq in sorted(entry_batches):
            if seq > replay_to:
                break
            block_txs = entry_batches[seq]
            self._ledger_replay_entries(seq, block_txs)
            recs = txlog.get(seq, {})
            decided = []
            for tx in block_txs:
                pos, status, ws = recs.get(tx.global_id, (0, ABORTED, None))
                if status == COMMITTED and ws is not None:
                    lid = self._alloc_local()
                    # gid mapping first: a tx's own later ops may reference
                    # versions it created earlier in the same write set
                    self.store.mark_committed(lid, tx.global_id)
                    self._apply_write_set(ws, lid, seq)
                    self._apply_system_effects(tx)
                    decided.append((tx.global_id, lid, COMMITTED, ""))
                else:
                    decided.append((tx.global_id, None, ABORTED, ""))
            known = status_batches.get(seq)
            if known is not None:
                decided = [
                    (gid, lid if lid != NO_BLOCK else None, status, "")
                    for gid, lid, status in known
                ]
            for entry, (gid, lid, status, _) in zip(
                [e for e in self.ledger if e.block == seq], decided
            ):
                entry.local_id = lid
                entry.status = status
                self.ledger_ids[gid] = status
            self.committed_height = seq

    def _ledger_replay_entries(self, seq, txs):
        for pos, tx in enumerate(txs):
            self.ledger.append(
                LedgerEntry(seq, pos, tx.global_id, tx.username, tx.contract, list(tx.args))
            )
            self.ledger_ids.setdefault(tx.global_id, None)

    def _apply_write_set(self, ws_bytes: bytes, lid: int, height: int):
        r = Reader(ws_bytes)
        n = r.uint()
        for _ in range(n):
            kind = r.str_()
            table = r.str_()
            tbl = self.store.tables[table]
            schema = tbl.schema
            old = None
            if kind in ("update", "delete"):
                pk = tuple(r.scalar_list())
                creator = r.uint()
                cgid = r.str_()
                old = self._find_version(tbl, pk, creator, cgid)
                old.xmax = {lid}
                old.deleter_block = height
            if kind in ("insert", "update"):
                values = r.scalar_list()
                row = dict(zip(schema.column_names(), values))
                v = RowVersion(row, xmin=lid, creator_block=height)
                tbl.add(v)

    def _find_version(self, tbl, pk, creator, cgid_hex):
        entries = tbl.indexes[tbl.schema.primary_key].get(pk, [])
        for v in entries:
            c = v.creator_block if v.creator_block is not None else NO_BLOCK
            if c == creator and self.store.gid_of.get(v.xmin, b"").hex() == cgid_hex:
                return v
        raise CorruptLedger(f"{tbl.schema.name}: commit log references unknown version")

    # ------------------------------------------------------------------

    def state_hash(self) -> bytes:
        return self.store.state_hash()

    def receive(self, msg):
        kind = msg[0]
        if kind == "client_tx":
            self.handle_client_tx(msg[1])
        elif kind == "forward_tx":
            self.receive_forwarded(msg[1])
        elif kind == "block":
            self.receive_block(msg[1])
        elif kind == "checkpoint":
            self.receive_checkpoint(msg[1])
        elif kind == "blocks_response":
            self.receive_blocks_response(msg[1])
        else:
            raise ValueError(f"unknown message {kind!r}")
