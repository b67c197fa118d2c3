"""Multi-version table storage with snapshot visibility.

Rows are never mutated in place: an update flags the old version and
appends a successor, a delete only flags.  Visibility is answered either
against a set of committed local transaction ids (order-then-execute) or
against a block height (execute-order-in-parallel).  Versions additionally
carry creator/deleter block heights stamped at commit, which drive both
the height-based snapshots and provenance queries.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .encoding import enc_scalar, enc_str, enc_uint, sha256

NO_BLOCK = 2**64 - 1  # encoding sentinel for an unset height

SCALAR_TYPES = ("integer", "decimal", "text", "boolean")


class StoreError(Exception):
    pass


class SerializationAbort(StoreError):
    """Read observed state that breaks the height-based snapshot."""


class PhantomRead(SerializationAbort):
    pass


class StaleRead(SerializationAbort):
    pass


class NoIndexForPredicate(StoreError):
    pass


class PrimaryKeyViolation(StoreError):
    pass


class TargetNotVisible(StoreError):
    pass


class AlreadyStamped(StoreError):
    pass


@dataclass(frozen=True)
class TableSchema:
    name: str
    columns: tuple  # ((name, type), ...)
    primary_key: tuple  # column names
    indexes: tuple = ()  # tuple of column-name tuples; pk is added implicitly

    def __post_init__(self):
        names = [c for c, _ in self.columns]
        if len(set(names)) != len(names):
            raise ValueError(f"{self.name}: duplicate column")
        for _, ctype in self.columns:
            if ctype not in SCALAR_TYPES:
                raise ValueError(f"{self.name}: bad column type {ctype!r}")
        if not self.primary_key:
            raise ValueError(f"{self.name}: empty primary key")
        for col in self.primary_key:
            if col not in names:
                raise ValueError(f"{self.name}: unknown pk column {col!r}")
        all_idx = [tuple(self.primary_key)]
        for idx in self.indexes:
            for col in idx:
                if col not in names:
                    raise ValueError(f"{self.name}: unknown index column {col!r}")
            if tuple(idx) not in all_idx:
                all_idx.append(tuple(idx))
        object.__setattr__(self, "indexes", tuple(all_idx))
        object.__setattr__(self, "primary_key", tuple(self.primary_key))
        object.__setattr__(
            self, "columns", tuple((c, t) for c, t in self.columns)
        )

    def column_names(self):
        return [c for c, _ in self.columns]

    def pk_of(self, row: dict) -> tuple:
        return tuple(row[c] for c in self.primary_key)


@dataclass
class RowVersion:
    row: dict
    xmin: int
    xmax: set = field(default_factory=set)
    creator_block: Optional[int] = None
    deleter_block: Optional[int] = None


@dataclass(frozen=True)
class SnapshotSpec:
    mode: str  # "tx-set" | "block-height"
    own_tx_id: int
    committed_tx_ids: frozenset = frozenset()
    snapshot_height: int = 0
    # when set, commits stamped with exactly this height are also visible
    # (config knob for same-block visibility during missing-tx execution)
    include_height: Optional[int] = None


@dataclass(frozen=True)
class Predicate:
    """Equality or closed-range conditions over the columns of one index."""

    columns: tuple
    conds: tuple  # per column: ("eq", v) | ("range", lo, hi)

    @classmethod
    def eq(cls, **kv) -> "Predicate":
        cols = tuple(sorted(kv))
        return cls(cols, tuple(("eq", kv[c]) for c in cols))

    @classmethod
    def range_(cls, column: str, lo, hi) -> "Predicate":
        return cls((column,), (("range", lo, hi),))

    def matches(self, row: dict) -> bool:
        for col, cond in zip(self.columns, self.conds):
            v = row.get(col)
            if cond[0] == "eq":
                if v != cond[1]:
                    return False
            else:
                _, lo, hi = cond
                if v is None or v < lo or v > hi:
                    return False
        return True

    def all_equality(self) -> bool:
        return all(c[0] == "eq" for c in self.conds)

    def key(self) -> tuple:
        return tuple(c[1] for c in self.conds)


@dataclass
class WriteOp:
    kind: str  # insert | update | delete
    table: str
    old: Optional[RowVersion]
    new: Optional[RowVersion]


@dataclass
class TxContext:
    """Per-transaction handle passed into store operations.

    `ssi` is the transaction's conflict-tracking state (duck-typed; may be
    None for reads that should not register, e.g. provenance).
    """

    local_id: int
    snap: SnapshotSpec
    write_set: list = field(default_factory=list)
    ssi: object = None
    tracker: object = None


class _Table:
    def __init__(self, schema: TableSchema):
        self.schema = schema
        self.versions: list[RowVersion] = []
        # index -> key tuple -> [versions]
        self.indexes: dict[tuple, dict[tuple, list[RowVersion]]] = {
            idx: {} for idx in schema.indexes
        }

    def add(self, v: RowVersion):
        self.versions.append(v)
        for idx, entries in self.indexes.items():
            key = tuple(v.row[c] for c in idx)
            entries.setdefault(key, []).append(v)


class MVStore:
    def __init__(self):
        self.tables: dict[str, _Table] = {}
        self.committed: set[int] = {0}  # id 0 = genesis seeding
        self.aborted: set[int] = set()
        self.gid_of: dict[int, bytes] = {0: b"genesis"}
        self.lock = threading.RLock()

    # -- schema / seeding ------------------------------------------------

    def create_table(self, schema: TableSchema):
        if schema.name in self.tables:
            raise StoreError(f"table exists: {schema.name}")
        self.tables[schema.name] = _Table(schema)

    def seed_row(self, table: str, row: dict):
        """Install a genesis row (committed at block 0)."""
        v = RowVersion(dict(row), xmin=0, creator_block=0)
        self.tables[table].add(v)

    def schema(self, table: str) -> TableSchema:
        return self.tables[table].schema

    # -- visibility ------------------------------------------------------

    def visible(self, v: RowVersion, snap: SnapshotSpec) -> bool:
        if snap.mode == "tx-set":
            vis = snap.committed_tx_ids | {snap.own_tx_id}
            if v.xmin not in vis:
                return False
            return not any(x in vis for x in v.xmax)
        # block-height mode
        if v.xmin == snap.own_tx_id:
            return snap.own_tx_id not in v.xmax
        if snap.own_tx_id in v.xmax:
            return False
        c = v.creator_block
        if c is None:
            return False
        h = snap.snapshot_height
        inc = snap.include_height
        if c > h and c != inc:
            return False
        d = v.deleter_block
        if d is not None and (d <= h or d == inc):
            return False
        return True

    # -- reads -----------------------------------------------------------

    def _find_index(self, table: _Table, pred: Predicate) -> tuple:
        for idx in table.schema.indexes:
            if set(idx) == set(pred.columns):
                return idx
        raise NoIndexForPredicate(
            f"{table.schema.name}: no index over {pred.columns}"
        )

    def _candidates(self, table: _Table, idx: tuple, pred: Predicate):
        entries = table.indexes[idx]
        if pred.all_equality():
            by_col = dict(zip(pred.columns, (c[1] for c in pred.conds)))
            key = tuple(by_col[c] for c in idx)
            return entries.get(key, [])
        out = []
        for key in sorted(entries):
            row = dict(zip(idx, key))
            if pred.matches(row):
                out.extend(entries[key])
        return out

    def read_checked(self, tx: TxContext, table: str, pred: Predicate):
        """Index-only predicate read with phantom/stale detection.

        In block-height mode, a matching row committed after the snapshot
        height (creator beyond it, or deleter beyond it) is a
        serializability violation against an already-committed block.
        """
        tbl = self.tables[table]
        idx = self._find_index(tbl, pred)
        if tx.tracker is not None:
            tx.tracker.register_read(tx.ssi, table, pred)
        snap = tx.snap
        height_mode = snap.mode == "block-height"
        result = []
        with self.lock:
            for v in self._candidates(tbl, idx, pred):
                if v.xmin in self.aborted:
                    continue
                if not pred.matches(v.row):
                    continue
                if height_mode and v.xmin != snap.own_tx_id:
                    c, d = v.creator_block, v.deleter_block
                    h, inc = snap.snapshot_height, snap.include_height
                    if c is not None and c > h and c != inc and d is None:
                        raise PhantomRead(
                            f"{table}: row committed at {c} > snapshot {h}"
                        )
                    if (
                        c is not None
                        and (c <= h or c == inc)
                        and d is not None
                        and d > h
                        and d != inc
                    ):
                        raise StaleRead(
                            f"{table}: row deleted at {d} > snapshot {h}"
                        )
                if self.visible(v, snap):
                    result.append(v)
        result.sort(key=lambda v: _order_key(tbl.schema, idx, v.row))
        return result

    # -- writes ----------------------------------------------------------

    def write_version(
        self,
        tx: TxContext,
        table: str,
        kind: str,
        target: Optional[RowVersion] = None,
        payload: Optional[dict] = None,
    ) -> Optional[RowVersion]:
        tbl = self.tables[table]
        schema = tbl.schema
        if kind == "insert":
            if payload is None:
                raise StoreError("insert requires a payload")
            self._check_pk_free(tx, table, schema, payload)
            v = RowVersion(dict(payload), xmin=tx.local_id)
            with self.lock:
                tbl.add(v)
            tx.write_set.append(WriteOp("insert", table, None, v))
            self._register_write(tx, table, v.row)
            return v
        if target is None:
            raise StoreError(f"{kind} requires a target version")
        if not self.visible(target, tx.snap):
            raise TargetNotVisible(f"{table}: target not visible to tx")
        if kind == "update":
            if payload is None:
                raise StoreError("update requires a payload")
            if schema.pk_of(payload) != schema.pk_of(target.row):
                self._check_pk_free(tx, table, schema, payload)
            with self.lock:
                target.xmax.add(tx.local_id)
            v = RowVersion(dict(payload), xmin=tx.local_id)
            with self.lock:
                tbl.add(v)
            tx.write_set.append(WriteOp("update", table, target, v))
            self._register_write(tx, table, v.row, target.row)
            return v
        if kind == "delete":
            with self.lock:
                target.xmax.add(tx.local_id)
            tx.write_set.append(WriteOp("delete", table, target, None))
            self._register_write(tx, table, target.row)
            return None
        raise StoreError(f"unknown write kind: {kind}")

    def _check_pk_free(self, tx, table, schema, payload):
        # the pk probe is itself a predicate read, so concurrent duplicate
        # inserts produce rw edges and one of them aborts at commit
        pred = Predicate.eq(**{c: payload[c] for c in schema.primary_key})
        if self.read_checked(tx, table, pred):
            raise PrimaryKeyViolation(
                f"{table}: duplicate key {schema.pk_of(payload)}"
            )

    def _register_write(self, tx, table, row, old_row=None):
        if tx.tracker is not None:
            tx.tracker.register_write(tx.ssi, table, row)
            if old_row is not None:
                tx.tracker.register_write(tx.ssi, table, old_row)

    # -- commit / abort --------------------------------------------------

    def stamp_block_heights(self, write_set: Iterable[WriteOp], height: int):
        for op in write_set:
            if op.new is not None:
                self._stamp(op.new, "creator_block", height)
            if op.old is not None:
                self._stamp(op.old, "deleter_block", height)

    @staticmethod
    def _stamp(v: RowVersion, attr: str, height: int):
        cur = getattr(v, attr)
        if cur is not None and cur != height:
            raise AlreadyStamped(f"{attr} already {cur}, stamping {height}")
        setattr(v, attr, height)

    def mark_committed(self, local_id: int, gid: bytes):
        with self.lock:
            self.committed.add(local_id)
            self.gid_of[local_id] = gid

    def rollback(self, write_set: Iterable[WriteOp], local_id: int):
        """Undo a transaction's writes: created versions become dead,
        xmax claims on superseded versions are withdrawn."""
        with self.lock:
            for op in write_set:
                if op.old is not None:
                    op.old.xmax.discard(local_id)
            self.aborted.add(local_id)

    # -- provenance / state ---------------------------------------------

    def provenance_scan(
        self, table: str, where: Callable[[RowVersion], bool] = lambda v: True
    ):
        """All committed versions matching `where`, active or superseded."""
        tbl = self.tables[table]
        out = [
            v
            for v in tbl.versions
            if v.xmin in self.committed and where(v)
        ]
        out.sort(
            key=lambda v: (
                _pk_key(tbl.schema, v.row),
                v.creator_block if v.creator_block is not None else NO_BLOCK,
            )
        )
        return out

    def committed_deleter(self, v: RowVersion) -> Optional[int]:
        for x in v.xmax:
            if x in self.committed:
                return x
        return None

    def snapshot_bytes(self) -> bytes:
        """Canonical encoding of all committed state; node-independent
        (local ids are translated to global transaction ids)."""
        out = b""
        for name in sorted(self.tables):
            tbl = self.tables[name]
            out += enc_str(name)
            records = []
            for v in tbl.versions:
                if v.xmin not in self.committed:
                    continue
                creator = v.creator_block if v.creator_block is not None else NO_BLOCK
                deleter = v.deleter_block if v.deleter_block is not None else NO_BLOCK
                dx = self.committed_deleter(v)
                rec = b"".join(
                    enc_scalar(v.row[col]) for col in tbl.schema.column_names()
                )
                rec += enc_uint(creator) + enc_uint(deleter)
                rec += enc_str(self.gid_of.get(v.xmin, b"").hex())
                rec += enc_str(
                    self.gid_of.get(dx, b"").hex() if dx is not None else ""
                )
                records.append(rec)
            # sorting whole records keeps the stream independent of the
            # node-local order in which versions were appended
            records.sort()
            out += b"".join(records)
        return out

    def state_hash(self) -> bytes:
        return sha256(b"state:" + self.snapshot_bytes())

    def version_count(self) -> int:
        return sum(len(t.versions) for t in self.tables.values())

    def clone(self) -> "MVStore":
        other = MVStore()
        other.committed = set(self.committed)
        other.aborted = set(self.aborted)
        other.gid_of = dict(self.gid_of)
        for name, tbl in self.tables.items():
            other.create_table(tbl.schema)
            ntbl = other.tables[name]
            for v in tbl.versions:
                ntbl.add(
                    RowVersion(
                        dict(v.row),
                        v.xmin,
                        set(v.xmax),
                        v.creator_block,
                        v.deleter_block,
                    )
                )
        return other


def _pk_key(schema: TableSchema, row: dict) -> tuple:
    return tuple(enc_scalar(row[c]) for c in schema.primary_key)


def _order_key(schema: TableSchema, idx: tuple, row: dict) -> tuple:
    return tuple(enc_scalar(row[c]) for c in idx) + _pk_key(schema, row)
