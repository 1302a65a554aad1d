"""Open-loop throughput/latency benchmark over the simulated network."""
from __future__ import annotations

import random
from dataclasses import asdict, dataclass

from .consensus import BatchConfig, SubmitReply
from .fabric import (
    BenchTx,
    BlockEvent,
    CommitNotice,
    EndorsementReply,
    PeerProcess,
    ProposalMsg,
    Query,
    QueryResult,
    SubmitterMixin,
    _build_ordering,
    leader_of,
    make_token_block,
)
from .netsim import EventLoop, Network, Process, Topology, derive_seed

READ, WRITE = "READ", "WRITE"
DEFAULT_BATCH = BatchConfig(max_txs=50, batch_timeout=0.1)

# Workload details the harness has to assume; written at the top of reports.
ASSUMPTIONS = (
    "single load generator, open-loop arrivals at exactly send_rate",
    "READ queries served by one gateway peer (peer0)",
    "WRITE latency measured from construction to commit notice at peer0",
    "WRITE transactions endorsed by all peers, policy threshold applies",
    "transactions still unresolved at the drain horizon count as failures",
)


@dataclass(frozen=True)
class BenchStats:
    op_type: str
    send_rate: float
    duration: float
    achieved_throughput: float
    latency_avg: float
    latency_max: float
    latency_min: float
    success: int
    fail: int

    FIELDS = ("op_type", "send_rate", "duration", "achieved_throughput", "latency_avg",
              "latency_max", "latency_min", "success", "fail")

    def as_dict(self) -> dict:
        return asdict(self)


class LoadGenerator(SubmitterMixin, Process):
    def __init__(self, net: Network, op: str, peers: list[str], orderers: list[str],
                 gateway: str, threshold: int):
        super().__init__("loadgen", net)
        self._init_submitter(orderers)
        self.op = op
        self.peers = peers
        self.gateway = gateway
        self.threshold = threshold
        self.created: dict[int, float] = {}
        self.done: dict[int, float] = {}
        self.failed: set[int] = set()
        self.endorsed: dict[int, list[int]] = {}
        self.pending: dict[int, BenchTx] = {}

    def schedule(self, start: float, rate: float, count: int):
        for k in range(count):
            self.loop.schedule(start + k / rate, self.node_id, _Send(k))

    def deliver(self, payload):
        if isinstance(payload, _Send):
            self._send(payload.k)
        else:
            super().deliver(payload)

    def _send(self, k: int):
        self.created[k] = self.loop.now
        if self.op == READ:
            self.send(self.gateway, Query(k, self.node_id))
            return
        tx = BenchTx(k, self.loop.now)
        self.endorsed[k] = [0, 0]
        for p in self.peers:
            self.send(p, ProposalMsg(tx, self.node_id))

    def handle(self, msg):
        if isinstance(msg, QueryResult):
            self._resolve(msg.ref, msg.ok)
        elif isinstance(msg, EndorsementReply):
            tx = msg.ref
            tally = self.endorsed[tx.txid]
            tally[0] += msg.endorsement is True
            tally[1] += 1
            if tally[1] == len(self.peers):
                del self.endorsed[tx.txid]
                if tally[0] >= self.threshold:
                    self.pending[tx.txid] = tx
                    self.submit_to_orderer(tx)
                else:
                    self._resolve(tx.txid, False)
        elif isinstance(msg, SubmitReply):
            tx = self.pending.get(msg.ref)
            if tx is not None:
                self.on_submit_reply(msg, tx)
        elif isinstance(msg, BlockEvent):
            for txid in msg.txids:
                self.pending.pop(txid, None)
                self._resolve(txid, True)
        elif isinstance(msg, CommitNotice):
            pass

    def _resolve(self, k: int, ok: bool):
        if k in self.done or k in self.failed:
            return
        if ok:
            self.done[k] = self.loop.now
        else:
            self.failed.add(k)


@dataclass(frozen=True)
class _Send:
    k: int


def run_benchmark(op_type: str, send_rate: float, duration: float,
                  topology: Topology | None = None, seed: int = 0, warmup: float = 0.5,
                  batch: BatchConfig | None = None, threshold: int = 3,
                  drain: float | None = None) -> BenchStats:
    """Offer ``send_rate`` tx/s for ``duration`` simulated seconds and measure.

    Only transactions created inside the measurement window (after
    ``warmup``) are scored.  Throughput is successes divided by the time from
    window start to the last success, but never less than ``duration``.
    """
    op = op_type.upper()
    if op not in (READ, WRITE):
        raise ValueError(f"unknown op {op_type!r}")
    if send_rate <= 0 or duration <= 0:
        raise ValueError("send_rate and duration must be positive")
    topo = topology or Topology()
    batch = batch or DEFAULT_BATCH
    loop = EventLoop()
    net = Network(loop, topo, random.Random(derive_seed(seed, "bench-links")))
    peers = [PeerProcess(p, net) for p in topo.peers]
    orderers = _build_ordering(net, topo, seed, batch, make_token_block, b"")
    gen = LoadGenerator(net, op, list(topo.peers), list(topo.orderers), topo.peers[0],
                        threshold)
    peers[0].subscribers.append(gen.node_id)

    loop.run(stop=lambda: leader_of(orderers) is not None, until=10.0)
    leader = leader_of(orderers)
    if leader is not None:
        gen.leader_guess = leader.node_id
    n_warm = int(round(send_rate * warmup))
    n_meas = int(round(send_rate * duration))
    start = loop.now
    window_start = start + n_warm / send_rate
    gen.schedule(start, send_rate, n_warm + n_meas)
    measured = range(n_warm, n_warm + n_meas)

    horizon = window_start + duration + (drain if drain is not None else max(30.0, 5 * duration))
    loop.run(until=horizon,
             stop=lambda: all(k in gen.done or k in gen.failed for k in measured)
             if len(gen.created) == n_warm + n_meas else False)

    lat = [gen.done[k] - gen.created[k] for k in measured if k in gen.done]
    success = len(lat)
    if lat:
        last = max(gen.done[k] for k in measured if k in gen.done)
        span = max(duration, last - window_start)
        return BenchStats(op, float(send_rate), float(duration), success / span,
                          sum(lat) / success, max(lat), min(lat), success, n_meas - success)
    return BenchStats(op, float(send_rate), float(duration), 0.0, 0.0, 0.0, 0.0, 0, n_meas)


def unloaded_latency(op_type: str, topology: Topology | None = None, seed: int = 0,
                     batch: BatchConfig | None = None) -> float:
    """Average latency with transactions far apart (5 tx/s)."""
    return run_benchmark(op_type, 5.0, 4.0, topology, seed, batch=batch).latency_avg


def sweep(op_type: str, rates, duration: float, topology: Topology | None = None,
          seed: int = 0, batch: BatchConfig | None = None) -> list[BenchStats]:
    return [run_benchmark(op_type, r, duration, topology, seed, batch=batch) for r in rates]
