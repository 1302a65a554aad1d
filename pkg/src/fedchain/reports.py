"""File output for experiments and benchmarks.  Field order is fixed so
reruns with the same seed produce identical bytes."""
from __future__ import annotations

import csv
import json
from pathlib import Path

from .benchmark import ASSUMPTIONS, BenchStats
from .consensus import RAFT_MESSAGES

ROUNDS_HEADER = ("round", "client", "step", "true", "base", "fed")


def _num(x) -> str:
    return repr(float(x))


def write_rounds_csv(reports, path) -> None:
    """One row per inference step of every client in every round after the first."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUNDS_HEADER)
        for r in reports:
            if not r.has_inference:
                continue
            for cid, c in r.clients.items():
                for step, (t, b, f) in enumerate(zip(c.truth, c.base, c.fed), start=1):
                    w.writerow((r.round, cid, step, _num(t), _num(b), _num(f)))


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n")


def write_benchmark_csv(stats: list[BenchStats], path, assumptions=ASSUMPTIONS) -> None:
    """Assumption lines (``#`` prefixed), the header, then one row per run."""
    with open(path, "w", newline="") as fh:
        for a in assumptions:
            fh.write(f"# {a}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BenchStats.FIELDS)
        for s in stats:
            w.writerow([getattr(s, f) if isinstance(getattr(s, f), (str, int))
                        else _num(getattr(s, f)) for f in BenchStats.FIELDS])


def read_benchmark_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_raft_trace(messages, path) -> None:
    """RAFT messages as JSON lines: time, src, dst, type, term, index."""
    with open(path, "w") as fh:
        for m in messages:
            fh.write(json.dumps({"time": m.time, "src": m.src, "dst": m.dst, "type": m.kind,
                                 "term": m.term, "index": m.index}) + "\n")


def export_experiment(result, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, reports in result.reports.items():
        p = out / f"rounds_{kind.lower()}.csv"
        write_rounds_csv(reports, p)
        written.append(p)
    p = out / "summary.json"
    dump_json(result.summary, p)
    written.append(p)
    p = out / "config.json"
    dump_json(result.config.to_dict(), p)
    written.append(p)
    if result.ledgers:
        result.ledgers[0].export(out / "ledger")
        written.append(out / "ledger")
    transport = result.transport
    if getattr(transport, "net", None) is not None and transport.net.record_messages:
        names = {t.__name__ for t in RAFT_MESSAGES}
        p = out / "raft_trace.jsonl"
        write_raft_trace([m for m in transport.net.messages if m.kind in names], p)
        written.append(p)
    return written
