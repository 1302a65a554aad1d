"""Crash/restart fault injection for the ordering service, with recorders
for election safety, log matching, committed-prefix agreement and commit
latency."""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from .consensus import LEADER, BatchConfig, BlockAssembler, RaftNode, SubmitReply
from .fabric import BenchTx, CommitNotice, OrdererProcess, SubmitterMixin, make_token_block
from .netsim import EventLoop, Network, Process, Topology, derive_seed


@dataclass(frozen=True)
class FaultEvent:
    time: float
    node: str
    action: str  # "crash" | "restart"


def random_fault_schedule(seed: int, nodes: list[str], start: float = 0.5,
                          end: float = 8.0, events: int = 8,
                          max_down: int = 2) -> list[FaultEvent]:
    """Random crash/restart times with never more than ``max_down`` nodes down."""
    rng = random.Random(derive_seed(seed, "faults"))
    times = sorted(rng.uniform(start, end) for _ in range(events))
    down: list[str] = []
    out = []
    for t in times:
        up = [n for n in nodes if n not in down]
        if down and (len(down) >= max_down or rng.random() < 0.5):
            node = rng.choice(down)
            down.remove(node)
            out.append(FaultEvent(t, node, "restart"))
        else:
            node = rng.choice(up)
            down.append(node)
            out.append(FaultEvent(t, node, "crash"))
    return out


class RetryingClient(SubmitterMixin, Process):
    """Submits tokens and resubmits any not yet acknowledged as committed."""

    def __init__(self, node_id: str, net: Network, orderers: list[str],
                 retry_after: float = 0.3):
        super().__init__(node_id, net)
        self._init_submitter(orderers)
        self.retry_after = retry_after
        self.unacked: dict[int, BenchTx] = {}
        self.last_try: dict[int, float] = {}

    def submit(self, tx: BenchTx):
        self.unacked[tx.txid] = tx
        self._try(tx)

    def _try(self, tx):
        self.last_try[tx.txid] = self.loop.now
        self.submit_to_orderer(tx)

    def start_retries(self):
        def check():
            for txid, tx in list(self.unacked.items()):
                if self.loop.now - self.last_try[txid] >= self.retry_after:
                    k = self.orderers.index(self.leader_guess)
                    self.leader_guess = self.orderers[(k + 1) % len(self.orderers)]
                    self._try(tx)
            self.after(self.retry_after / 3, check)
        self.after(self.retry_after / 3, check)

    def handle(self, msg):
        if isinstance(msg, CommitNotice):
            self.unacked.pop(msg.txid, None)
        elif isinstance(msg, SubmitReply):
            if msg.accepted:
                return
            tx = self.unacked.get(msg.ref)
            if tx is not None and msg.leader_hint and msg.leader_hint != msg.src:
                self.leader_guess = msg.leader_hint
                self._try(tx)


@dataclass
class SafetyReport:
    election_violations: list = field(default_factory=list)
    prefix_violations: list = field(default_factory=list)
    log_matching_violations: list = field(default_factory=list)
    commit_latency: dict = field(default_factory=dict)  # txid -> seconds
    uncommitted: list = field(default_factory=list)
    liveness_bound: float = 0.0

    @property
    def safe(self) -> bool:
        return not (self.election_violations or self.prefix_violations
                    or self.log_matching_violations)

    @property
    def live(self) -> bool:
        return not self.uncommitted and all(v <= self.liveness_bound
                                            for v in self.commit_latency.values())


def _entry_id(entry):
    p = entry.payload
    return (entry.term, type(p).__name__, getattr(p, "txid", getattr(p, "height", None)))


class SafetyRecorder:
    def __init__(self, report: SafetyReport, loop: EventLoop):
        self.report = report
        self.loop = loop
        self.leaders: dict[int, str] = {}
        self.committed: list = []  # agreed committed prefix, as entry ids
        self.checked: dict[str, int] = {}
        self.first_commit: dict[int, float] = {}

    def __call__(self, proc: OrdererProcess):
        raft = proc.raft
        if proc.alive and raft.role == LEADER:
            holder = self.leaders.setdefault(raft.current_term, raft.node_id)
            if holder != raft.node_id:
                self.report.election_violations.append(
                    (self.loop.now, raft.current_term, holder, raft.node_id))
        # entries up to commit_index must agree with every other node's
        start = 0 if self.checked.get(raft.node_id, 0) > raft.commit_index else \
            self.checked.get(raft.node_id, 0)
        for idx in range(start, raft.commit_index):
            eid = _entry_id(raft.log[idx])
            if idx < len(self.committed):
                if self.committed[idx] != eid:
                    self.report.prefix_violations.append((self.loop.now, raft.node_id, idx + 1))
            else:
                self.committed.append(eid)
                txid = getattr(raft.log[idx].payload, "txid", None)
                if txid is not None and txid not in self.first_commit:
                    self.first_commit[txid] = self.loop.now
        self.checked[raft.node_id] = raft.commit_index


def log_matching_violations(nodes: list[RaftNode]) -> list:
    """Pairs whose logs share an (index, term) but differ at or before it."""
    out = []
    for a_i, a in enumerate(nodes):
        for b in nodes[a_i + 1:]:
            n = min(a.last_index, b.last_index)
            last_match = 0
            for idx in range(n, 0, -1):
                if a.term_at(idx) == b.term_at(idx):
                    last_match = idx
                    break
            for idx in range(1, last_match + 1):
                if _entry_id(a.log[idx - 1]) != _entry_id(b.log[idx - 1]):
                    out.append((a.node_id, b.node_id, idx))
                    break
    return out


@dataclass
class ClusterRun:
    report: SafetyReport
    orderers: list[OrdererProcess]
    net: Network


def run_fault_schedule(seed: int, schedule: list[FaultEvent], topology: Topology | None = None,
                       n_txs: int = 60, submit_interval: float = 0.1,
                       liveness_bound: float = 5.0, settle: float = 15.0) -> ClusterRun:
    """Drive a 5-orderer cluster through ``schedule`` while a client submits tokens."""
    topo = topology or Topology()
    loop = EventLoop()
    net = Network(loop, topo, random.Random(derive_seed(seed, "links")), record_messages=True)
    report = SafetyReport(liveness_bound=liveness_bound)
    recorder = SafetyRecorder(report, loop)
    batch = BatchConfig(max_txs=5, batch_timeout=0.05)
    orderers = []
    for oid in topo.orderers:
        raft = RaftNode(oid, topo.orderers, random.Random(derive_seed(seed, "raft", oid)),
                        topo.election_timeout, topo.heartbeat)
        proc = OrdererProcess(oid, net, raft, BlockAssembler(batch, make_token_block, b""), [])
        proc.observer = recorder
        orderers.append(proc)
    for o in orderers:
        o.start()
    client = RetryingClient("client", net, list(topo.orderers))
    client.start_retries()
    by_id = {o.node_id: o for o in orderers}

    submitted: dict[int, float] = {}
    for k in range(n_txs):
        def send(k=k):
            submitted[k] = loop.now
            client.submit(BenchTx(k, loop.now))
        client.after(0.4 + k * submit_interval, send)
    for ev in schedule:
        proc = by_id[ev.node]
        loop.schedule(ev.time, "fault-injector", (proc, ev.action))
    loop.register("fault-injector",
                  lambda p: p[0].crash() if p[1] == "crash" else p[0].restart())

    last_fault = max([e.time for e in schedule], default=0.0)
    end = max(0.4 + n_txs * submit_interval, last_fault) + settle
    loop.run(until=end, stop=lambda: len(submitted) == n_txs and loop.now > last_fault
             and all(k in recorder.first_commit for k in submitted))

    report.log_matching_violations = log_matching_violations([o.raft for o in orderers])
    for o in orderers:
        for idx in range(o.raft.commit_index):
            if _entry_id(o.raft.log[idx]) != recorder.committed[idx]:
                report.prefix_violations.append((loop.now, o.node_id, idx + 1))
                break
    for k, t in submitted.items():
        if k in recorder.first_commit:
            report.commit_latency[k] = recorder.first_commit[k] - t
        else:
            report.uncommitted.append(k)
    return ClusterRun(report, orderers, net)
