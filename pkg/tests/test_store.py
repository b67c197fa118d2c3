import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fresh_store, kv_schema
from relchain.store import (
    MVStore,
    NoIndexForPredicate,
    PhantomRead,
    Predicate,
    PrimaryKeyViolation,
    RowVersion,
    SnapshotSpec,
    StaleRead,
    TableSchema,
    TargetNotVisible,
    TxContext,
)


def ctx_txset(lid, committed):
    return TxContext(lid, SnapshotSpec("tx-set", lid, frozenset(committed)))


def ctx_height(lid, h, include=None):
    return TxContext(
        lid, SnapshotSpec("block-height", lid, snapshot_height=h, include_height=include)
    )


def test_schema_validation():
    with pytest.raises(ValueError):
        TableSchema("t", (("a", "blob"),), ("a",))
    with pytest.raises(ValueError):
        TableSchema("t", (("a", "integer"),), ())
    with pytest.raises(ValueError):
        TableSchema("t", (("a", "integer"), ("a", "text")), ("a",))
    s = TableSchema("t", (("a", "integer"), ("b", "integer")), ("a",), (("b",),))
    assert s.indexes == (("a",), ("b",))


def test_insert_update_delete_versions():
    store = fresh_store()
    tx = ctx_txset(1, {0})
    store.write_version(tx, "kv", "insert", payload={"k": 1, "v": 10})
    store.mark_committed(1, b"t1")

    tx2 = ctx_txset(2, {0, 1})
    rows = store.read_checked(tx2, "kv", Predicate.eq(k=1))
    assert [r.row["v"] for r in rows] == [10]
    store.write_version(tx2, "kv", "update", target=rows[0], payload={"k": 1, "v": 20})
    store.mark_committed(2, b"t2")

    tx3 = ctx_txset(3, {0, 1, 2})
    rows = store.read_checked(tx3, "kv", Predicate.eq(k=1))
    assert [r.row["v"] for r in rows] == [20]
    store.write_version(tx3, "kv", "delete", target=rows[0])
    store.mark_committed(3, b"t3")

    tx4 = ctx_txset(4, {0, 1, 2, 3})
    assert store.read_checked(tx4, "kv", Predicate.eq(k=1)) == []
    # all three versions are retained for provenance
    assert len(store.tables["kv"].versions) == 2


def test_own_writes_visible_before_commit():
    store = fresh_store()
    tx = ctx_txset(7, {0})
    store.write_version(tx, "kv", "insert", payload={"k": 9, "v": 1})
    assert store.read_checked(tx, "kv", Predicate.eq(k=9))
    other = ctx_txset(8, {0})
    assert store.read_checked(other, "kv", Predicate.eq(k=9)) == []


def test_primary_key_violation():
    store = fresh_store(seed_keys=[1])
    tx = ctx_txset(1, {0})
    with pytest.raises(PrimaryKeyViolation):
        store.write_version(tx, "kv", "insert", payload={"k": 1, "v": 5})


def test_no_index_rejected():
    store = fresh_store()
    tx = ctx_txset(1, {0})
    with pytest.raises(NoIndexForPredicate):
        store.read_checked(tx, "kv", Predicate.eq(v=3))


def test_update_requires_visible_target():
    store = fresh_store(seed_keys=[1])
    t1 = ctx_txset(1, {0})
    row = store.read_checked(t1, "kv", Predicate.eq(k=1))[0]
    store.write_version(t1, "kv", "delete", target=row)
    store.mark_committed(1, b"t1")
    t2 = ctx_txset(2, {0, 1})
    with pytest.raises(TargetNotVisible):
        store.write_version(t2, "kv", "update", target=row, payload={"k": 1, "v": 2})


def test_rollback_withdraws_claims():
    store = fresh_store(seed_keys=[1])
    t1 = ctx_txset(1, {0})
    row = store.read_checked(t1, "kv", Predicate.eq(k=1))[0]
    store.write_version(t1, "kv", "update", target=row, payload={"k": 1, "v": 5})
    store.rollback(t1.write_set, 1)
    assert 1 not in row.xmax
    t2 = ctx_txset(2, {0})
    assert [r.row["v"] for r in store.read_checked(t2, "kv", Predicate.eq(k=1))] == [0]


def test_phantom_and_stale_reads():
    store = fresh_store()
    t1 = ctx_txset(1, {0})
    store.write_version(t1, "kv", "insert", payload={"k": 50, "v": 1})
    store.stamp_block_heights(t1.write_set, 3)
    store.mark_committed(1, b"t1")

    # row committed at height 3 is a phantom for a snapshot at height 2
    reader = ctx_height(2, 2)
    with pytest.raises(PhantomRead):
        store.read_checked(reader, "kv", Predicate.eq(k=50))
    # and plainly visible at height 3
    ok = ctx_height(3, 3)
    assert store.read_checked(ok, "kv", Predicate.eq(k=50))

    t2 = ctx_height(4, 3)
    row = store.read_checked(t2, "kv", Predicate.eq(k=50))[0]
    store.write_version(t2, "kv", "delete", target=row)
    store.stamp_block_heights(t2.write_set, 5)
    store.mark_committed(4, b"t2")

    # deletion at height 5 makes a read at height 4 stale
    with pytest.raises(StaleRead):
        store.read_checked(ctx_height(5, 4), "kv", Predicate.eq(k=50))
    # at height 5 the row is just gone
    assert store.read_checked(ctx_height(6, 5), "kv", Predicate.eq(k=50)) == []


def test_include_height_knob():
    store = fresh_store()
    t1 = ctx_txset(1, {0})
    store.write_version(t1, "kv", "insert", payload={"k": 70, "v": 1})
    store.stamp_block_heights(t1.write_set, 4)
    store.mark_committed(1, b"t1")
    with pytest.raises(PhantomRead):
        store.read_checked(ctx_height(2, 3), "kv", Predicate.eq(k=70))
    got = store.read_checked(ctx_height(3, 3, include=4), "kv", Predicate.eq(k=70))
    assert [r.row["k"] for r in got] == [70]


def test_range_predicate_index_order():
    store = fresh_store(seed_keys=[3, 1, 2])
    tx = ctx_txset(1, {0})
    rows = store.read_checked(tx, "kv", Predicate.range_("k", 1, 3))
    assert [r.row["k"] for r in rows] == [1, 2, 3]


def test_state_hash_order_independent():
    a = fresh_store()
    b = fresh_store()
    for lid, k in ((1, 10), (2, 20)):
        tx = ctx_txset(lid, {0})
        a.write_version(tx, "kv", "insert", payload={"k": k, "v": k})
        a.stamp_block_heights(tx.write_set, 1)
        a.mark_committed(lid, b"g%d" % lid)
    for lid, k in ((1, 20), (2, 10)):
        tx = ctx_txset(lid, {0})
        b.write_version(tx, "kv", "insert", payload={"k": k, "v": k})
        b.stamp_block_heights(tx.write_set, 1)
        b.mark_committed(lid, b"g%d" % (3 - lid))
    assert a.state_hash() == b.state_hash()


def test_clone_is_deep():
    store = fresh_store(seed_keys=[1])
    c = store.clone()
    tx = ctx_txset(1, {0})
    row = store.read_checked(tx, "kv", Predicate.eq(k=1))[0]
    store.write_version(tx, "kv", "update", target=row, payload={"k": 1, "v": 9})
    store.mark_committed(1, b"t")
    assert c.state_hash() != store.state_hash()


# -- visibility property: store rule vs extensional set-membership oracle


def oracle_visible_height(v, own, h, inc):
    if v.xmin == own:
        return own not in v.xmax
    if own in v.xmax:
        return False
    if v.creator_block is None:
        return False
    snap_heights = set(range(h + 1))
    if inc is not None:
        snap_heights.add(inc)
    if v.creator_block not in snap_heights:
        return False
    return not (v.deleter_block is not None and v.deleter_block in snap_heights)


def oracle_visible_txset(v, own, committed):
    vis = set(committed) | {own}
    return v.xmin in vis and not (set(v.xmax) & vis)


@settings(max_examples=300, deadline=None)
@given(
    xmin=st.integers(0, 6),
    xmax=st.sets(st.integers(0, 6), max_size=3),
    creator=st.one_of(st.none(), st.integers(0, 8)),
    deleter=st.one_of(st.none(), st.integers(0, 8)),
    own=st.integers(0, 6),
    h=st.integers(0, 8),
    inc=st.one_of(st.none(), st.integers(0, 8)),
    committed=st.sets(st.integers(0, 6), max_size=5),
)
def test_visible_matches_oracle(xmin, xmax, creator, deleter, own, h, inc, committed):
    store = MVStore()
    store.create_table(kv_schema())
    v = RowVersion({"k": 1, "v": 1}, xmin, set(xmax), creator, deleter)
    hsnap = SnapshotSpec("block-height", own, snapshot_height=h, include_height=inc)
    assert store.visible(v, hsnap) == oracle_visible_height(v, own, h, inc)
    tsnap = SnapshotSpec("tx-set", own, frozenset(committed))
    assert store.visible(v, tsnap) == oracle_visible_txset(v, own, committed)
