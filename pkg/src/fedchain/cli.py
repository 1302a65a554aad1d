"""Command line entry point: simulate, benchmark, gen-data, verify-ledger."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import chain
from .benchmark import DEFAULT_BATCH, run_benchmark
from .consensus import BatchConfig
from .experiment import ConfigError, ExperimentConfig, run_experiment
from .federation import RoundAbort
from .netsim import Topology
from .reports import export_experiment, write_benchmark_csv
from .streaming import SynthSpec, synth_generate, write_csv


def _load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_json(path) if path else ExperimentConfig()


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    try:
        result = run_experiment(cfg)
    except RoundAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    export_experiment(result, args.out)
    for kind, n in result.summary["rounds_completed"].items():
        print(f"{kind}: {n} rounds ({result.summary['stopped'][kind]})")
    for name, ok in result.invariants.items():
        print(f"invariant {name}: {'ok' if ok else 'VIOLATED'}")
    return 0 if result.ok else 1


def cmd_benchmark(args) -> int:
    cfg = _load_config(args.config)
    bench = dict(cfg.benchmark)
    batch = BatchConfig(bench.pop("batch_max_txs", DEFAULT_BATCH.max_txs),
                        bench.pop("batch_timeout", DEFAULT_BATCH.batch_timeout))
    warmup = bench.pop("warmup", 0.5)
    if bench:
        raise ConfigError(f"unknown benchmark key(s): {', '.join(sorted(bench))}")
    rates = [float(r) for r in str(args.rate).split(",")]
    stats = [run_benchmark(args.op, r, args.duration, Topology(**cfg.topology), cfg.seed,
                           warmup, batch, cfg.endorsement_threshold) for r in rates]
    out = Path(args.out) if args.out else None
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_benchmark_csv(stats, out)
    ok = True
    for s in stats:
        print(f"{s.op_type} rate={s.send_rate:g} throughput={s.achieved_throughput:.2f} "
              f"latency avg={s.latency_avg:.4f} min={s.latency_min:.4f} "
              f"max={s.latency_max:.4f} success={s.success} fail={s.fail}")
        ok &= s.achieved_throughput <= s.send_rate + 1e-9
        ok &= s.success == 0 or s.latency_min <= s.latency_avg <= s.latency_max
    return 0 if ok else 1


def cmd_gen_data(args) -> int:
    spec = json.loads(Path(args.spec).read_text()) if args.spec else {}
    n = spec.pop("n_detectors", 7)
    series = synth_generate(SynthSpec(**spec), n)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(series, args.out)
    print(f"wrote {n} series of {len(series[0]) if series else 0} points to {args.out}")
    return 0


def cmd_verify_ledger(args) -> int:
    d = Path(args.dir)
    try:
        ledger = chain.Ledger.load(d)
    except (chain.DecodeError, OSError, ValueError, KeyError) as exc:
        print(f"ledger unreadable: {exc}")
        return 1
    bad = chain.first_bad_height(ledger)
    index = json.loads((d / "index.json").read_text())["blocks"]
    for entry, block in zip(index, ledger.blocks):
        if entry["hash"] != block.block_hash.hex() and (bad is None or block.height < bad):
            bad = block.height
    if bad is not None:
        print(f"chain broken at height {bad}")
        return 1
    print(f"ok: {ledger.height + 1} blocks, tip {ledger.tip.block_hash.hex()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedchain")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a federated experiment over the simulated chain")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("benchmark", help="measure throughput and latency at a send rate")
    p.add_argument("--op", required=True, type=str.upper, choices=["READ", "WRITE"])
    p.add_argument("--rate", required=True, help="tx/s, or a comma-separated sweep")
    p.add_argument("--duration", required=True, type=float, help="simulated seconds")
    p.add_argument("--config", help="config JSON (topology, seed, benchmark section)")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(fn=cmd_benchmark)

    p = sub.add_parser("gen-data", help="write a synthetic traffic CSV")
    p.add_argument("--spec", help="JSON with synthetic-series parameters and n_detectors")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("verify-ledger", help="check an exported ledger's hash chain")
    p.add_argument("dir")
    p.set_defaults(fn=cmd_verify_ledger)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
