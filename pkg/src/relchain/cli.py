"""Command line entry points: run a simulated scenario, query provenance
over its output, and summarize metrics reports."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from . import netsim
from .config import ConfigError, ScenarioConfig

METRIC_COLUMNS = [
    "brr",
    "bpr",
    "bpt",
    "bet",
    "bct",
    "tet",
    "mt",
    "su",
    "committed",
    "aborted",
    "tps",
]


def cmd_run(args) -> int:
    try:
        config = ScenarioConfig.from_yaml(args.config)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    report = netsim.run(config, args.seed)

    os.makedirs(args.out, exist_ok=True)
    _write_report(report, args.out)

    ok = True
    try:
        netsim.check_consistency(report)
    except netsim.ConsistencyError as e:
        print(f"consistency check failed: {e}", file=sys.stderr)
        ok = False
    if args.expect_alarm and not report.alarms:
        print("expected a divergence alarm but none was raised", file=sys.stderr)
        ok = False
    if not args.expect_alarm and report.alarms:
        for a in report.alarms:
            print(f"unexpected alarm: {a}", file=sys.stderr)
        ok = False

    for a in report.alarms:
        print(
            f"alarm: checkpoint {a['height']} divergent nodes {a['divergent']}"
        )
    print(
        f"run complete: seed={args.seed} flow={config.flow} "
        f"blocks={max(report.committed_heights.values(), default=0)} "
        f"consistent={'yes' if ok else 'no'}"
    )
    return 0 if ok else 1


def _write_report(report, out_dir: str):
    doc = {
        "seed": report.seed,
        "flow": report.config.flow,
        "duration_ms": report.duration_ms,
        "committed_heights": report.committed_heights,
        "state_hashes": report.state_hashes,
        "statuses": report.statuses,
        "alarms": report.alarms,
        "faulty_nodes": list(report.faulty_nodes),
        "metrics": {
            nid: {**m, "tps": report.throughput(nid)}
            for nid, m in report.metrics.items()
        },
    }
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "provenance.json"), "w") as fh:
        json.dump(report.provenance, fh, indent=2)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"] + METRIC_COLUMNS)
        for nid in sorted(report.metrics):
            m = doc["metrics"][nid]
            w.writerow([nid] + [m[c] for c in METRIC_COLUMNS])


def _parse_blocks(spec: str):
    try:
        a, b = spec.split(":")
        return int(a), int(b)
    except ValueError:
        raise SystemExit(f"bad --blocks range {spec!r}, expected A:B")


def cmd_provenance(args) -> int:
    path = os.path.join(args.store, "provenance.json")
    try:
        with open(path) as fh:
            records = json.load(fh)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    records = [r for r in records if r["table"] == args.table]
    if args.user:
        records = [
            r
            for r in records
            if r["created_by"] == args.user or r["deleted_by"] == args.user
        ]
    if args.blocks:
        lo, hi = _parse_blocks(args.blocks)

        def in_range(r):
            c, d = r["created_block"], r["deleted_block"]
            return (c is not None and lo <= c <= hi) or (
                d is not None and lo <= d <= hi
            )

        records = [r for r in records if in_range(r)]
    if args.key is not None:
        def key_match(r):
            for part in r["key"]:
                if str(part) == args.key:
                    return True
            return False

        records = [r for r in records if key_match(r)]
    for r in records:
        print(json.dumps(r, sort_keys=True))
    print(f"{len(records)} version(s)", file=sys.stderr)
    return 0


def cmd_metrics(args) -> int:
    try:
        with open(args.report) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    metrics = doc.get("metrics", {})
    header = ["node"] + METRIC_COLUMNS
    print("  ".join(f"{h:>10}" for h in header))
    for nid in sorted(metrics):
        m = metrics[nid]
        cells = [nid] + [
            f"{m[c]:.3f}" if isinstance(m[c], float) else str(m[c])
            for c in METRIC_COLUMNS
        ]
        print("  ".join(f"{c:>10}" for c in cells))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="relchain", description="replicated relational store simulator"
    )
    sub = p.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="run a scenario")
    runp.add_argument("--config", required=True)
    runp.add_argument("--seed", type=int, required=True)
    runp.add_argument("--out", required=True)
    runp.add_argument("--expect-alarm", action="store_true")
    runp.set_defaults(fn=cmd_run)

    provp = sub.add_parser("provenance", help="query row version history")
    provp.add_argument("--store", required=True)
    provp.add_argument("--table", required=True)
    provp.add_argument("--user")
    provp.add_argument("--blocks")
    provp.add_argument("--key")
    provp.set_defaults(fn=cmd_provenance)

    metp = sub.add_parser("metrics", help="summarize a run report")
    metp.add_argument("--report", required=True)
    metp.set_defaults(fn=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
