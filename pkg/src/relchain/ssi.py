"""Conflict tracking and commit-time abort decisions.

Two decision procedures are provided: the standard abort-during-commit
heuristic used when blocks are ordered before execution, and a
block-aware variant used when execution runs in parallel with ordering.
Both operate on the same two-list bookkeeping: for a committing
transaction T, a `nearConflict` is a transaction with an rw edge into T
(it read a predecessor of something T wrote) and a `farConflict` is a
transaction with an rw edge into that nearConflict.

Write-write contention is lock-free: competing writers all land in the
target version's xmax and the first to commit in block order aborts the
rest (`resolve_ww`).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

EXECUTING = "executing"
READY = "ready"
COMMITTED = "committed"
ABORTED = "aborted"


class LostUpdate(Exception):
    """A competing writer of the same version already committed; impossible
    under serial commit and treated as an internal invariant failure."""


@dataclass
class TxSSIState:
    global_id: bytes
    local_id: int
    in_conflicts: set = field(default_factory=set)  # rw edges into this tx
    out_conflicts: set = field(default_factory=set)  # rw edges out of this tx
    read_ranges: list = field(default_factory=list)  # (table, Predicate)
    write_rows: list = field(default_factory=list)  # (table, row payload)
    committed_outconflict: bool = False
    status: str = EXECUTING

    def __hash__(self):
        return hash((self.global_id, self.local_id))

    def __eq__(self, other):
        return self is other

    @property
    def undecided(self) -> bool:
        return self.status in (EXECUTING, READY)


@dataclass
class TxOrder:
    block_number: int
    global_ids: list

    def __post_init__(self):
        if len(set(self.global_ids)) != len(self.global_ids):
            raise ValueError("duplicate tx id within block")
        self._pos = {g: i for i, g in enumerate(self.global_ids)}

    def position(self, gid: bytes):
        return self._pos.get(gid)

    def __contains__(self, gid: bytes):
        return gid in self._pos


@dataclass
class Decision:
    commit: bool
    victims: tuple = ()  # states aborted besides / including t


class ConflictTracker:
    """Per-node registry of in-flight transactions and their rw edges.

    Reads and writes may be registered concurrently by execution workers;
    the decide/resolve calls happen only on the serial committer pass.
    """

    def __init__(self):
        self.in_flight: dict[bytes, TxSSIState] = {}
        self.lock = threading.Lock()

    def add(self, state: TxSSIState):
        with self.lock:
            self.in_flight[state.global_id] = state

    def register_read(self, state: TxSSIState, table: str, pred):
        if state is None:
            return
        with self.lock:
            state.read_ranges.append((table, pred))
            for other in self.in_flight.values():
                if other is state or not other.undecided:
                    continue
                if any(
                    t == table and pred.matches(row)
                    for t, row in other.write_rows
                ):
                    self._add_edge(state, other)

    def register_write(self, state: TxSSIState, table: str, row: dict):
        if state is None:
            return
        with self.lock:
            state.write_rows.append((table, dict(row)))
            for other in self.in_flight.values():
                if other is state or not other.undecided:
                    continue
                if any(
                    t == table and p.matches(row)
                    for t, p in other.read_ranges
                ):
                    self._add_edge(other, state)

    @staticmethod
    def _add_edge(reader: TxSSIState, writer: TxSSIState):
        reader.out_conflicts.add(writer)
        writer.in_conflicts.add(reader)
        if writer.status == COMMITTED:
            reader.committed_outconflict = True

    def note_committed(self, state: TxSSIState):
        """Mark a commit and flag surviving readers whose outConflict has
        now committed (the untracked-wr safety rule)."""
        with self.lock:
            state.status = COMMITTED
            for reader in state.in_conflicts:
                if reader.undecided:
                    reader.committed_outconflict = True
            self.in_flight.pop(state.global_id, None)

    def drop(self, state: TxSSIState):
        """Remove an aborted transaction and its edges; an aborted tx can
        no longer take part in any anomaly structure."""
        with self.lock:
            state.status = ABORTED
            for w in state.out_conflicts:
                w.in_conflicts.discard(state)
            for r in state.in_conflicts:
                r.out_conflicts.discard(state)
            state.in_conflicts.clear()
            state.out_conflicts.clear()
            self.in_flight.pop(state.global_id, None)


def decide_standard(t: TxSSIState) -> Decision:
    """Abort-during-commit heuristic for the order-then-execute flow.

    A transaction whose outConflict has already committed is aborted
    outright (wr dependencies are not tracked, so their possibility is
    accounted for).  Otherwise every dangerous structure f -rw-> n -rw-> t
    with n and f undecided costs the pivot n its life and t commits.
    """
    assert t.status == READY
    if t.committed_outconflict:
        return Decision(False, (t,))
    victims = []
    for n in sorted(t.in_conflicts, key=lambda s: s.local_id):
        if not n.undecided:
            continue
        for f in n.in_conflicts:
            if f.undecided or f is t:
                victims.append(n)
                break
    return Decision(True, tuple(victims))


def decide_block_aware(t: TxSSIState, order: TxOrder) -> Decision:
    """Block-aware abort-during-commit for execute-order-in-parallel.

    Victim selection per dangerous structure (n = nearConflict of t,
    f = farConflict):

      n in block | f in block | first in order | victim
      -----------+------------+----------------+-------
         yes     |    yes     | n              | f
         yes     |    yes     | f              | n
         yes     |    no      | (n)            | f
         no      |    yes     | (f)            | n
         no      |    no      | -              | n
         no      |    none    | -              | n

    A nearConflict outside the block is always aborted, even without a
    farConflict, because on another node it may manifest as a stale read.
    """
    assert t.status == READY
    victims: list[TxSSIState] = []

    def in_block(s: TxSSIState) -> bool:
        return s.global_id in order

    for n in sorted(t.in_conflicts, key=lambda s: s.local_id):
        if not n.undecided:
            continue
        fars = [f for f in n.in_conflicts if f.undecided or f is t]
        if not fars:
            if not in_block(n):
                victims.append(n)
            continue
        for f in sorted(fars, key=lambda s: s.local_id):
            if in_block(n) and in_block(f):
                np, fp = order.position(n.global_id), order.position(f.global_id)
                victims.append(f if np < fp else n)
            elif in_block(n):
                victims.append(f)
            else:
                victims.append(n)
    uniq = []
    for v in victims:
        if v not in uniq:
            uniq.append(v)
    return Decision(t not in uniq, tuple(uniq))


def resolve_ww(version, committer: TxSSIState, committed_ids=frozenset()) -> tuple:
    """First committing writer in block order keeps the version; every
    other transaction competing in its xmax is marked for abort."""
    if committer.local_id not in version.xmax:
        raise LostUpdate("committer does not hold the version")
    victims = []
    for other in sorted(version.xmax):
        if other == committer.local_id:
            continue
        if other in committed_ids:
            raise LostUpdate(
                f"tx {other} committed a competing write of the same version"
            )
        victims.append(other)
    version.xmax = {committer.local_id}
    return tuple(victims)
