"""Experiment configuration and the end-to-end runner."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import chain, nn
from .consensus import BatchConfig
from .fabric import ChainTransport
from .federation import (
    METRICS,
    Federation,
    InProcessBus,
    RoundReport,
    best_model_count,
    bucket_errors,
    error_table,
)
from .netsim import Topology
from .streaming import Scaler, SynthSpec, TrafficSeries, ingest_csv, synth_generate

ALLOWED_MAX_DATA_SIZES = (24, 36, 48, 60, 72)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    federated_id: str = "traffic"
    model_kinds: list[str] = field(default_factory=lambda: ["GRU"])
    max_data_size: int = 24
    allow_any_max_data_size: bool = False
    rounds: int | None = None
    seed: int = 0
    data_csv: str | None = None
    synth: dict = field(default_factory=dict)
    n_detectors: int = 7
    train_fraction: float | None = None
    topology: dict = field(default_factory=dict)
    batch_max_txs: int | None = None  # None: one block per round
    batch_timeout: float = 2.0
    endorsement_threshold: int = 3
    epochs: int = 5
    input_shape: int = 12
    hidden_layers: int = 2
    hidden_units: int | None = None  # None: per-kind default
    learning_rate: float = 1e-3
    volume_cap: float = 1000.0
    transport: str = "chain"
    record_raft_trace: bool = False
    bucket: int = 100
    error_window: int = 24
    benchmark: dict = field(default_factory=dict)  # batch_max_txs, batch_timeout, warmup

    def __post_init__(self):
        if isinstance(self.model_kinds, str):
            self.model_kinds = [self.model_kinds]
        self.model_kinds = [k.upper() for k in self.model_kinds]
        for k in self.model_kinds:
            if k not in nn.GATES:
                raise ConfigError(f"unknown model kind {k!r}")
        if not self.model_kinds or len(set(self.model_kinds)) != len(self.model_kinds):
            raise ConfigError("model_kinds must be non-empty and distinct")
        if not self.allow_any_max_data_size and self.max_data_size not in ALLOWED_MAX_DATA_SIZES:
            raise ConfigError(f"max_data_size must be one of {ALLOWED_MAX_DATA_SIZES} "
                              "(set allow_any_max_data_size to override)")
        if self.max_data_size < self.input_shape + 1:
            raise ConfigError("max_data_size must exceed input_shape")
        if self.rounds is not None and self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.transport not in ("chain", "bus"):
            raise ConfigError("transport must be 'chain' or 'bus'")
        if self.train_fraction is not None and not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must be in (0, 1]")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        try:
            SynthSpec(**self.synth)
            Topology(**self.topology)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def arch(self, kind: str) -> nn.ModelArch:
        return nn.ModelArch.for_kind(kind, self.input_shape, self.hidden_layers, self.hidden_units)

    def load_series(self) -> list[TrafficSeries]:
        if self.data_csv:
            series = ingest_csv(self.data_csv)
        else:
            series = synth_generate(SynthSpec(**self.synth), self.n_detectors)
        if self.train_fraction is not None:
            series = [s.head(self.train_fraction) for s in series]
        return series


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: dict[str, list[RoundReport]]
    ledgers: list[chain.Ledger]
    summary: dict
    invariants: dict[str, bool]
    transport: object = None

    @property
    def ok(self) -> bool:
        return all(self.invariants.values())


def _clean(x):
    """JSON-safe floats: NaN and infinities become None."""
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _federation_id(cfg: ExperimentConfig, kind: str) -> str:
    return cfg.federated_id if len(cfg.model_kinds) == 1 else f"{cfg.federated_id}-{kind}"


def run_experiment(cfg: ExperimentConfig, on_round=None) -> ExperimentResult:
    series = cfg.load_series()
    ids = sorted(s.detector_id for s in series)
    if len(set(ids)) != len(ids):
        raise ConfigError("detector ids must be unique")
    if cfg.transport == "chain":
        batch = BatchConfig(cfg.batch_max_txs or len(ids), cfg.batch_timeout)
        transport = ChainTransport(ids, Topology(**cfg.topology), cfg.seed, batch,
                                   cfg.endorsement_threshold,
                                   record_messages=cfg.record_raft_trace)
    else:
        transport = InProcessBus()

    reports: dict[str, list[RoundReport]] = {}
    stopped = {}
    for kind in cfg.model_kinds:
        fed = Federation(series, cfg.arch(kind), cfg.max_data_size, transport,
                         _federation_id(cfg, kind), cfg.seed, cfg.epochs,
                         nn.AdamConfig(lr=cfg.learning_rate), Scaler(cfg.volume_cap))
        reports[kind] = fed.run(cfg.rounds, on_round)
        stopped[kind] = "round-limit" if cfg.rounds is not None and fed.round >= cfg.rounds \
            else "data-exhausted"

    ledgers = transport.ledgers if cfg.transport == "chain" else []
    invariants = check_invariants(cfg, reports, ledgers, len(ids))
    summary = summarize(cfg, reports, ledgers, stopped, invariants)
    return ExperimentResult(cfg, reports, ledgers, summary, invariants, transport)


def check_invariants(cfg, reports, ledgers, n_clients) -> dict[str, bool]:
    S = cfg.input_shape
    inv = {}
    inv["window_within_cap"] = all(c.window_size <= cfg.max_data_size
                                   for rs in reports.values() for r in rs
                                   for c in r.clients.values())
    inv["inference_lengths"] = all(len(c.truth) == len(c.base) == len(c.fed) == S
                                   for rs in reports.values() for r in rs if r.has_inference
                                   for c in r.clients.values())
    if ledgers:
        prints = {led.fingerprint() for led in ledgers}
        inv["peer_ledgers_identical"] = len(prints) == 1
        inv["chain_verifies"] = all(chain.verify_chain(led) for led in ledgers)
        led = ledgers[0]
        full = True
        for kind, rs in reports.items():
            fid = _federation_id(cfg, kind)
            for r in rs:
                full &= len(chain.get_round_updates(led, fid, r.round)) == n_clients
        inv["rounds_fully_committed"] = full
        if cfg.batch_max_txs is None:
            inv["one_full_block_per_round"] = (
                led.height == sum(len(rs) for rs in reports.values())
                and all(len(_committed_keys(led, b)) == n_clients for b in led.blocks[1:]))
        triples = [key for b in led.blocks[1:] for key in _committed_keys(led, b)]
        inv["unique_round_triples"] = len(triples) == len(set(triples))
    return inv


def _committed_keys(ledger: chain.Ledger, block) -> list:
    codes = ledger.codes[block.height]
    return [tx.update.key for tx, code in zip(block.txs, codes) if code == chain.VALID]


def summarize(cfg, reports, ledgers, stopped, invariants) -> dict:
    errors_by_det: dict[str, dict] = {}
    buckets = {}
    window = None
    for kind, rs in reports.items():
        table = error_table(rs, cfg.error_window)
        for det, row in table.items():
            for model, summ in row.items():
                errors_by_det.setdefault(det, {})[f"{kind}-{model}"] = summ
                window = summ.window
        if any(r.has_inference for r in rs):
            curve = bucket_errors(rs, cfg.bucket)
            buckets[kind] = {
                "ranges": [list(rng) for rng in curve.ranges],
                "Base": [_clean(v) for v in curve.values["Base"]],
                "Fed": [_clean(v) for v in curve.values["Fed"]],
                "fed_better_share": _clean(float(np.mean(curve.fed_better()))),
            }
    error_tables = {
        det: {label: {m: _clean(getattr(s, m)) for m in METRICS} for label, s in row.items()}
        for det, row in sorted(errors_by_det.items())
    }
    improvement = {}
    for det, row in sorted(errors_by_det.items()):
        for kind in reports:
            base, fed = row.get(f"{kind}-Base"), row.get(f"{kind}-Fed")
            if base is None:
                continue
            improvement.setdefault(det, {})[kind] = {
                m: _clean(100.0 * (getattr(base, m) - getattr(fed, m)) / getattr(base, m))
                if getattr(base, m) else None for m in METRICS}
    summary = {
        "federated_id": cfg.federated_id,
        "model_kinds": list(cfg.model_kinds),
        "max_data_size": cfg.max_data_size,
        "seed": cfg.seed,
        "rounds_completed": {k: len(rs) for k, rs in reports.items()},
        "stopped": stopped,
        "error_window": window,
        "error_tables": error_tables,
        "fed_improvement_pct": improvement,
        "best_model_counts": best_model_count(errors_by_det) if errors_by_det else {},
        "bucket_size": cfg.bucket,
        "bucket_curves": buckets,
        "notes": {
            "normalized_mae": "bucket MAE divided by bucket mean true volume",
            "mape": "points with zero true volume are skipped",
        },
        "mape_skipped_points": sum(s.mape_skipped for row in errors_by_det.values()
                                   for s in row.values()),
        "invariants": dict(invariants),
    }
    if ledgers:
        led = ledgers[0]
        summary["ledger"] = {
            "height": led.height,
            "tip_hash": led.tip.block_hash.hex(),
            "committed_updates": sum(c == chain.VALID for codes in led.codes for c in codes),
        }
        summary["sim_time"] = sum(r.sim_time for rs in reports.values() for r in rs)
    return summary
