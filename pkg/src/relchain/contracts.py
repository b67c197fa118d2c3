"""Deterministic contract runtime and deployment governance.

Contracts are host-registered procedures over a restricted data API:
index-only predicate reads (always returned in index order), inserts,
updates, deletes and the call arguments.  No clock, randomness or other
ambient state is reachable, so identical invocations over byte-identical
store states produce byte-identical write sets.

Deployment governance mirrors a multi-organization approval workflow:
proposals are ordinary transactions over a system table and a proposal is
executed only once an admin of every organization has approved it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .store import (
    MVStore,
    NoIndexForPredicate,
    Predicate,
    PrimaryKeyViolation,
    TableSchema,
    TargetNotVisible,
    TxContext,
)


class LogicalAbort(Exception):
    """Contract-level failure: the transaction commits nothing."""


class UnknownContract(LogicalAbort):
    pass


class AccessDenied(LogicalAbort):
    pass


class DeterminismViolation(LogicalAbort):
    pass


class NotAdmin(LogicalAbort):
    pass


class InsufficientApprovals(LogicalAbort):
    pass


class UnknownProposal(LogicalAbort):
    pass


class Row:
    """A visible row handed to a contract; keeps the version handle so the
    contract can update or delete it."""

    def __init__(self, version):
        self.version = version

    def __getitem__(self, col):
        return self.version.row[col]

    def get(self, col, default=None):
        return self.version.row.get(col, default)

    def as_dict(self):
        return dict(self.version.row)


class DataAPI:
    def __init__(self, store: MVStore, tx: TxContext):
        self._store = store
        self._tx = tx

    def select(self, table: str, where: dict = None, limit: int = None):
        """Predicate read over a declared index.  `where` maps columns to
        an equality value or a (lo, hi) closed range.  Results are always
        index-ordered, so LIMIT is deterministic."""
        if not where:
            raise DeterminismViolation(f"{table}: full table scan in contract")
        cols = tuple(sorted(where))
        conds = []
        for c in cols:
            v = where[c]
            if isinstance(v, tuple):
                conds.append(("range", v[0], v[1]))
            else:
                conds.append(("eq", v))
        pred = Predicate(cols, tuple(conds))
        versions = self._store.read_checked(self._tx, table, pred)
        rows = [Row(v) for v in versions]
        return rows[:limit] if limit is not None else rows

    def insert(self, table: str, **values):
        return self._store.write_version(self._tx, table, "insert", payload=values)

    def update(self, table: str, row: Row, **changes):
        payload = row.as_dict()
        payload.update(changes)
        return self._store.write_version(
            self._tx, table, "update", target=row.version, payload=payload
        )

    def delete(self, table: str, row: Row):
        self._store.write_version(self._tx, table, "delete", target=row.version)


@dataclass(frozen=True)
class CallerCtx:
    username: str
    org: str
    roles: tuple
    orgs: tuple  # all organizations in the network


@dataclass
class ContractDef:
    name: str
    version: int
    fn: object  # fn(api, args, ctx) -> value | raises LogicalAbort
    roles: tuple = ()  # empty = any authenticated user


@dataclass
class InvokeResult:
    ok: bool
    reason: str = ""
    value: object = None


class ContractRegistry:
    """Callable contracts of a node plus the shared procedure library that
    deployment proposals reference."""

    def __init__(self):
        self.contracts: dict[str, ContractDef] = {}
        self.library: dict[str, object] = {}

    def register(self, defn: ContractDef):
        self.contracts[defn.name] = defn

    def get(self, name: str) -> ContractDef:
        if name not in self.contracts:
            raise UnknownContract(name)
        return self.contracts[name]

    def apply_deployment(self, action: str, name: str, library_ref: str, version: int):
        if action == "drop":
            self.contracts.pop(name, None)
            return
        fn = self.library.get(library_ref)
        if fn is None:
            raise UnknownContract(f"library procedure {library_ref!r}")
        self.contracts[name] = ContractDef(name, version, fn)


def invoke(
    store: MVStore,
    registry: ContractRegistry,
    tx: TxContext,
    name: str,
    args: list,
    caller: CallerCtx,
) -> InvokeResult:
    """Run a contract body under the transaction's snapshot.

    Logical failures (including governance errors and rejected data-API
    usage) leave no writes behind; serialization aborts propagate to the
    committer.  The caller owns write-set rollback on failure.
    """
    try:
        defn = registry.get(name)
        if defn.roles and not set(defn.roles) & set(caller.roles):
            raise AccessDenied(f"{caller.username} cannot invoke {name}")
        api = DataAPI(store, tx)
        value = defn.fn(api, list(args), caller)
        return InvokeResult(True, value=value)
    except LogicalAbort as e:
        return InvokeResult(False, reason=f"{type(e).__name__}: {e}")
    except (PrimaryKeyViolation, TargetNotVisible, NoIndexForPredicate) as e:
        return InvokeResult(False, reason=f"{type(e).__name__}: {e}")


# ---------------------------------------------------------------------------
# built-in evaluation contracts


def simple_insert(api, args, ctx):
    k, v = args
    api.insert("kv", k=k, v=v)


def read_modify_write(api, args, ctx):
    k, delta = args
    rows = api.select("kv", where={"k": k})
    if rows:
        api.update("kv", rows[0], v=rows[0]["v"] + delta)
    else:
        api.insert("kv", k=k, v=delta)


def complex_join(api, args, ctx):
    """Join orders with prices, aggregate revenue, write to a third table."""
    out_id = args[0]
    total = 0
    for order in api.select("orders", where={"oid": (0, 2**62)}):
        price_rows = api.select("prices", where={"item": order["item"]})
        if price_rows:
            total += order["qty"] * price_rows[0]["price"]
    api.insert("totals", tid=out_id, total=total)


def complex_group(api, args, ctx):
    """Aggregate order quantity per item within a range and record the
    maximum subgroup (order-by + limit over the grouped sums)."""
    out_id, item_lo, item_hi = args
    sums: dict[int, int] = {}
    for order in api.select("orders", where={"item": (item_lo, item_hi)}):
        sums[order["item"]] = sums.get(order["item"], 0) + order["qty"]
    if not sums:
        raise LogicalAbort("no orders in range")
    best_item, best_total = max(sums.items(), key=lambda kv: (kv[1], kv[0]))
    api.insert("group_max", gid=out_id, item=best_item, total=best_total)


def add_order(api, args, ctx):
    oid, item, qty = args
    api.insert("orders", oid=oid, item=item, qty=qty)


# ---------------------------------------------------------------------------
# deployment governance system contracts

PENDING = "pending"
EXECUTED = "executed"
REJECTED = "rejected"


def _require_admin(ctx: CallerCtx):
    if "admin" not in ctx.roles:
        raise NotAdmin(ctx.username)


def _load_proposal(api, pid):
    rows = api.select("sys_deployments", where={"pid": pid})
    if not rows:
        raise UnknownProposal(pid)
    return rows[0], json.loads(rows[0]["record"])


def _save_proposal(api, row, rec):
    api.update("sys_deployments", row, record=json.dumps(rec, sort_keys=True))


def create_deploy_tx(api, args, ctx):
    _require_admin(ctx)
    pid, action, name, library_ref, version = args
    if action not in ("create", "replace", "drop"):
        raise LogicalAbort(f"bad deployment action {action!r}")
    rec = {
        "action": action,
        "contract": name,
        "library_ref": library_ref,
        "version": int(version),
        "approvals": [],
        "rejections": [],
        "comments": [],
        "state": PENDING,
    }
    api.insert("sys_deployments", pid=pid, record=json.dumps(rec, sort_keys=True))


def approve_deploy_tx(api, args, ctx):
    _require_admin(ctx)
    row, rec = _load_proposal(api, args[0])
    if rec["state"] != PENDING:
        raise LogicalAbort(f"proposal {args[0]} is {rec['state']}")
    entry = [ctx.org, ctx.username]
    if entry not in rec["approvals"]:
        rec["approvals"].append(entry)
        rec["approvals"].sort()
        _save_proposal(api, row, rec)


def reject_deploy_tx(api, args, ctx):
    _require_admin(ctx)
    pid, reason = args
    row, rec = _load_proposal(api, pid)
    if rec["state"] != PENDING:
        raise LogicalAbort(f"proposal {pid} is {rec['state']}")
    rec["rejections"].append([ctx.org, ctx.username, reason])
    rec["state"] = REJECTED
    _save_proposal(api, row, rec)


def comment_deploy_tx(api, args, ctx):
    _require_admin(ctx)
    pid, text = args
    row, rec = _load_proposal(api, pid)
    rec["comments"].append([ctx.org, ctx.username, text])
    _save_proposal(api, row, rec)


def submit_deploy_tx(api, args, ctx):
    _require_admin(ctx)
    row, rec = _load_proposal(api, args[0])
    if rec["state"] != PENDING:
        raise LogicalAbort(f"proposal {args[0]} is {rec['state']}")
    approved_orgs = {org for org, _ in rec["approvals"]}
    missing = [o for o in ctx.orgs if o not in approved_orgs]
    if missing:
        raise InsufficientApprovals(f"missing approvals from {missing}")
    rec["state"] = EXECUTED
    _save_proposal(api, row, rec)
    # the registry change itself is applied by the node at commit time
    return rec


def add_user(api, args, ctx):
    _require_admin(ctx)
    username, org, roles_csv, pubkey_hex = args
    rec = json.dumps(
        {"org": org, "roles": sorted(roles_csv.split(",")), "pubkey": pubkey_hex},
        sort_keys=True,
    )
    rows = api.select("sys_users", where={"username": username})
    if rows:
        api.update("sys_users", rows[0], record=rec)
    else:
        api.insert("sys_users", username=username, record=rec)


def drop_user(api, args, ctx):
    _require_admin(ctx)
    rows = api.select("sys_users", where={"username": args[0]})
    if not rows:
        raise LogicalAbort(f"unknown user {args[0]}")
    api.delete("sys_users", rows[0])


SYSTEM_CONTRACTS = {
    "create_deployTx": create_deploy_tx,
    "approve_deployTx": approve_deploy_tx,
    "reject_deployTx": reject_deploy_tx,
    "comment_deployTx": comment_deploy_tx,
    "submit_deployTx": submit_deploy_tx,
    "add_user": add_user,
    "drop_user": drop_user,
}

BUILTIN_CONTRACTS = {
    "simple_insert": simple_insert,
    "read_modify_write": read_modify_write,
    "complex_join": complex_join,
    "complex_group": complex_group,
    "add_order": add_order,
}


def default_registry() -> ContractRegistry:
    reg = ContractRegistry()
    for name, fn in BUILTIN_CONTRACTS.items():
        reg.register(ContractDef(name, 1, fn))
        reg.library[name] = fn
    for name, fn in SYSTEM_CONTRACTS.items():
        reg.register(ContractDef(name, 1, fn, roles=("admin",)))
    return reg


def default_schemas() -> list[TableSchema]:
    return [
        TableSchema("kv", (("k", "integer"), ("v", "integer")), ("k",)),
        TableSchema(
            "orders",
            (("oid", "integer"), ("item", "integer"), ("qty", "integer")),
            ("oid",),
            (("item",),),
        ),
        TableSchema("prices", (("item", "integer"), ("price", "integer")), ("item",)),
        TableSchema("totals", (("tid", "integer"), ("total", "integer")), ("tid",)),
        TableSchema(
            "group_max",
            (("gid", "integer"), ("item", "integer"), ("total", "integer")),
            ("gid",),
        ),
        TableSchema("sys_deployments", (("pid", "text"), ("record", "text")), ("pid",)),
        TableSchema("sys_users", (("username", "text"), ("record", "text")), ("username",)),
    ]
