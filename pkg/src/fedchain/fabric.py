"""Peers, orderers and clients as processes on the simulated network.

The same processes serve two purposes.  With a ``chain.Peer`` attached,
peers run the full endorsement and validation contract (federated rounds).
Without one, they only charge service time for opaque transactions, which
is what the throughput benchmark needs.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Any

from . import chain
from .consensus import (
    LEADER,
    RAFT_MESSAGES,
    AppendEntries,
    BatchConfig,
    BlockAssembler,
    ClientSubmit,
    CutEntry,
    RaftNode,
    SubmitReply,
    TxEntry,
)
from .federation import RoundAbort, RoundCommit
from .netsim import EventLoop, Network, Process, Station, Topology, derive_seed


# -- wire messages --------------------------------------------------------------

@dataclass(frozen=True)
class ProposalMsg:
    proposal: Any
    reply_to: str


@dataclass(frozen=True)
class EndorsementReply:
    peer_id: str
    ref: Any
    endorsement: Any  # chain.Endorsement | chain.EndorsementRefused | True | None


@dataclass(frozen=True)
class Deliver:
    block: Any


@dataclass(frozen=True)
class BlockEvent:
    peer_id: str
    height: int
    txids: tuple
    codes: tuple


@dataclass(frozen=True)
class CommitNotice:
    txid: Any


@dataclass(frozen=True)
class Query:
    ref: Any
    reply_to: str


@dataclass(frozen=True)
class QueryResult:
    ref: Any
    ok: bool


@dataclass(frozen=True)
class BenchTx:
    txid: int
    created: float


@dataclass(frozen=True)
class TokenBlock:
    height: int
    prev_hash: bytes
    txs: tuple
    timestamp: float
    block_hash: bytes = b""


def make_token_block(height, prev_hash, txs, timestamp) -> TokenBlock:
    return TokenBlock(height, prev_hash, tuple(txs), timestamp)


def _txid(tx):
    return tx.txid


# -- processes ------------------------------------------------------------------

class PeerProcess(Process):
    def __init__(self, node_id: str, net: Network, peer: chain.Peer | None = None):
        super().__init__(node_id, net)
        self.peer = peer
        self.topo = net.topology
        self.exec = Station(self, limit=self.topo.exec_queue_limit)
        self.commit = Station(self)
        self.subscribers: list[str] = []
        self.expected = 1
        self.buffer: dict[int, Any] = {}
        self.committed_height = 0

    def handle(self, msg):
        if isinstance(msg, ProposalMsg):
            if not self.exec.submit(self.topo.endorse_time, lambda: self._endorse(msg)):
                self.send(msg.reply_to, EndorsementReply(self.node_id, msg.proposal, None))
        elif isinstance(msg, Query):
            if not self.exec.submit(self.topo.read_time,
                                    lambda: self.send(msg.reply_to, QueryResult(msg.ref, True))):
                self.send(msg.reply_to, QueryResult(msg.ref, False))
        elif isinstance(msg, Deliver):
            self._on_deliver(msg.block)

    def _endorse(self, msg: ProposalMsg):
        if self.peer is None:
            result = True
        else:
            try:
                result = self.peer.endorse(msg.proposal)
            except chain.EndorsementRefused as refused:
                result = refused
        self.send(msg.reply_to, EndorsementReply(self.node_id, msg.proposal, result))

    def _on_deliver(self, block):
        h = block.height
        if h < self.expected or h in self.buffer:
            return
        self.buffer[h] = block
        while self.expected in self.buffer:
            b = self.buffer.pop(self.expected)
            self.expected += 1
            self.commit.submit(self.topo.validate_time * len(b.txs),
                               lambda b=b: self._commit(b))

    def _commit(self, block):
        if self.peer is not None:
            codes = self.peer.validate_and_commit(block)
        else:
            codes = (chain.VALID,) * len(block.txs)
        self.committed_height = block.height
        event = BlockEvent(self.node_id, block.height,
                           tuple(_txid(tx) for tx in block.txs), codes)
        for sub in self.subscribers:
            self.send(sub, event)


class OrdererProcess(Process):
    def __init__(self, node_id: str, net: Network, raft: RaftNode,
                 assembler: BlockAssembler, peers: list[str]):
        super().__init__(node_id, net)
        self.raft = raft
        self.assembler = assembler
        self.peers = peers
        self.topo = net.topology
        self.station = Station(self)
        self.leader_terms: list[int] = []
        self._cut_armed: int | None = None
        self.observer = None  # called with this process after every state change

    def start(self):
        self.raft.start(self.loop.now)
        self.after(self.topo.tick_interval, self._tick)

    def crash(self):
        super().crash()
        self.raft.crash()
        self._observe()

    def restart(self):
        super().restart()
        self.raft.restart(self.loop.now)
        self.assembler.reset()
        self.station.reset()
        self._cut_armed = None
        self.after(self.topo.tick_interval, self._tick)
        self._observe()

    def _observe(self):
        if self.observer is not None:
            self.observer(self)

    def _tick(self):
        self._emit(self.raft.tick(self.loop.now))
        self.after(self.topo.tick_interval, self._tick)

    def handle(self, msg):
        if isinstance(msg, ClientSubmit):
            if self.raft.role != LEADER:
                self.send(msg.src, SubmitReply(self.node_id, msg.src, self.raft.current_term,
                                               False, self.raft.leader_id,
                                               ref=_txid(msg.payload)))
                return
            self.station.submit(self.topo.order_time, lambda: self._order(msg))
        elif isinstance(msg, RAFT_MESSAGES):
            self._emit(self.raft.step(msg, self.loop.now))

    def _order(self, msg: ClientSubmit):
        txid = _txid(msg.payload)
        now = self.loop.now
        if self.raft.role != LEADER:
            self.send(msg.src, SubmitReply(self.node_id, msg.src, self.raft.current_term,
                                           False, self.raft.leader_id, ref=txid))
            return
        index = self.raft.propose(TxEntry(msg.payload, txid, msg.src, now), now)
        self.send(msg.src, SubmitReply(self.node_id, msg.src, self.raft.current_term, True,
                                       self.node_id, index, ref=txid))
        self._emit(self.raft.replicate(now))

    def _emit(self, out):
        was_leader_term = self.leader_terms[-1] if self.leader_terms else None
        for m in out:
            self.send(m.dst, m)
        if self.raft.role == LEADER and was_leader_term != self.raft.current_term:
            self.leader_terms.append(self.raft.current_term)
            self._cut_armed = None
        self._apply()
        self._observe()

    def _apply(self):
        leader = self.raft.role == LEADER
        for _, entry in self.raft.take_committed():
            payload = entry.payload
            for block in self.assembler.apply(payload):
                for p in self.peers:
                    self.send(p, Deliver(block))
            if leader and isinstance(payload, TxEntry):
                self.send(payload.client, CommitNotice(payload.txid))
        if leader and self.assembler.pending and self._cut_armed != self.assembler.next_height:
            height = self.assembler.next_height
            self._cut_armed = height
            first = self.assembler.cutter.first_time
            delay = max(0.0, first + self.assembler.cfg.batch_timeout - self.loop.now)
            self.after(delay, lambda: self._cut_due(height))

    def _cut_due(self, height: int):
        if (self.raft.role == LEADER and self.assembler.next_height == height
                and self.assembler.pending):
            self.raft.propose(CutEntry(height, self.loop.now), self.loop.now)
            self._emit(self.raft.replicate(self.loop.now))


class SubmitterMixin:
    """Leader discovery for anything that submits to the ordering service."""

    retry_delay = 0.05

    def _init_submitter(self, orderers: list[str]):
        self.orderers = orderers
        self.leader_guess = orderers[0]

    def submit_to_orderer(self, tx):
        self.send(self.leader_guess, ClientSubmit(self.node_id, self.leader_guess, tx))

    def on_submit_reply(self, msg: SubmitReply, tx):
        if msg.accepted:
            return
        if msg.leader_hint and msg.leader_hint != msg.src:
            self.leader_guess = msg.leader_hint
            self.submit_to_orderer(tx)
        else:
            k = self.orderers.index(self.leader_guess)
            self.leader_guess = self.orderers[(k + 1) % len(self.orderers)]
            self.after(self.retry_delay, lambda: self.submit_to_orderer(tx))


class FLClientProcess(SubmitterMixin, Process):
    """Submits one model update per round and waits for it to commit.

    A transaction not seen in a block within ``resubmit_after`` is sent to the
    next orderer; orderers drop repeated txids, so resubmission is harmless.
    """

    resubmit_after = 1.0

    def __init__(self, node_id: str, net: Network, key: chain.KeyPair,
                 registry: chain.Registry, peers: list[str], orderers: list[str],
                 threshold: int):
        super().__init__(node_id, net)
        self._init_submitter(orderers)
        self.key = key
        self.registry = registry
        self.peers = peers
        self.threshold = threshold
        self.reset_round()

    def reset_round(self):
        self.proposal = None
        self.replies: dict[str, Any] = {}
        self.tx = None
        self.error: Exception | None = None
        self.committed: tuple[int, str] | None = None

    @property
    def done(self) -> bool:
        return self.error is not None or self.committed is not None

    def begin(self, update: chain.ModelUpdate, delay: float):
        self.reset_round()
        self.after(delay, lambda: self._propose(update))

    def _propose(self, update):
        try:
            self.proposal = chain.build_proposal(self.node_id, update, self.key)
        except chain.MalformedUpdateError as exc:
            self.error = exc
            return
        for p in self.peers:
            self.send(p, ProposalMsg(self.proposal, self.node_id))

    def handle(self, msg):
        if isinstance(msg, EndorsementReply):
            if msg.ref is not self.proposal:
                return
            self.replies[msg.peer_id] = msg.endorsement
            if len(self.replies) == len(self.peers):
                self._assemble()
        elif isinstance(msg, SubmitReply):
            if self.tx is not None:
                self.on_submit_reply(msg, self.tx)
        elif isinstance(msg, BlockEvent):
            if self.tx is not None and self.committed is None and self.tx.txid in msg.txids:
                self.committed = (msg.height, msg.codes[msg.txids.index(self.tx.txid)])

    def _assemble(self):
        ends = [self.replies[p] for p in self.peers
                if isinstance(self.replies[p], (chain.Endorsement, chain.EndorsementRefused))]
        try:
            self.tx = chain.assemble_tx(self.proposal, ends, self.threshold, self.key,
                                        self.registry)
        except chain.PolicyUnsatisfied as exc:
            self.error = exc
            return
        self._submit(self.tx)

    def _submit(self, tx):
        self.submit_to_orderer(tx)

        def check():
            if self.tx is tx and self.committed is None:
                k = self.orderers.index(self.leader_guess)
                self.leader_guess = self.orderers[(k + 1) % len(self.orderers)]
                self._submit(tx)
        self.after(self.resubmit_after, check)


def _build_ordering(net: Network, topo: Topology, seed: int, batch: BatchConfig,
                    make_block, genesis_hash: bytes) -> list[OrdererProcess]:
    orderers = []
    for oid in topo.orderers:
        raft = RaftNode(oid, topo.orderers, random.Random(derive_seed(seed, "raft", oid)),
                        topo.election_timeout, topo.heartbeat)
        asm = BlockAssembler(batch, make_block, genesis_hash)
        orderers.append(OrdererProcess(oid, net, raft, asm, list(topo.peers)))
    for o in orderers:
        o.start()
    return orderers


def leader_of(orderers) -> OrdererProcess | None:
    for o in orderers:
        if o.alive and o.raft.role == LEADER:
            return o
    return None


class ChainTransport:
    """Runs each federated round through endorsement, RAFT ordering and commit."""

    def __init__(self, client_ids: list[str], topology: Topology | None = None, seed: int = 0,
                 batch: BatchConfig | None = None, threshold: int = 3,
                 round_timeout: float = 120.0, record_messages: bool = False):
        base = topology or Topology()
        self.topology = Topology(**{**base.__dict__, "clients": list(client_ids)})
        topo = self.topology
        self.batch = batch or BatchConfig(max_txs=len(client_ids), batch_timeout=2.0)
        self.threshold = threshold
        self.round_timeout = round_timeout
        self.loop = EventLoop()
        self.net = Network(self.loop, topo, random.Random(derive_seed(seed, "links")),
                           record_messages=record_messages)
        self.registry = chain.Registry()
        peer_keys = [chain.KeyPair(p, seed) for p in topo.peers]
        client_keys = [chain.KeyPair(c, seed) for c in topo.clients]
        for k in peer_keys:
            self.registry.add_peer(k)
        for k in client_keys:
            self.registry.add_client(k)
        self.peers = [PeerProcess(k.node_id, self.net, chain.Peer(k, self.registry, threshold))
                      for k in peer_keys]
        genesis = self.peers[0].peer.ledger.tip.block_hash
        self.orderers = _build_ordering(self.net, topo, seed, self.batch, chain.make_block,
                                        genesis)
        self.clients = {}
        for n, k in enumerate(client_keys):
            c = FLClientProcess(k.node_id, self.net, k, self.registry, list(topo.peers),
                                list(topo.orderers), threshold)
            home = self.peers[n % len(self.peers)]
            home.subscribers.append(c.node_id)
            c.home = home
            self.clients[k.node_id] = c
        self.loop.run(stop=lambda: leader_of(self.orderers) is not None,
                      until=self.round_timeout)
        self.round_heights: dict[int, list[int]] = {}

    @property
    def ledgers(self) -> list[chain.Ledger]:
        return [p.peer.ledger for p in self.peers]

    def commit_round(self, round_number: int, updates: list[chain.ModelUpdate]) -> RoundCommit:
        start = self.loop.now
        fed = updates[0].federated_id
        for u in updates:
            self.clients[u.detector_id].begin(u, self.topology.train_time)
        active = [self.clients[u.detector_id] for u in updates]

        def finished():
            if not all(c.done for c in active):
                return False
            if any(c.error for c in active):
                return True
            top = max(c.committed[0] for c in active)
            return all(p.committed_height >= top for p in self.peers)

        self.loop.run(stop=finished, until=start + self.round_timeout)
        for c in active:
            if c.error is not None:
                raise RoundAbort(round_number, f"{c.node_id}: {c.error}")
        if not finished():
            raise RoundAbort(round_number, "block retrieval timed out")
        for c in active:
            if c.committed[1] != chain.VALID:
                raise RoundAbort(round_number, f"{c.node_id}: transaction invalid "
                                               f"({c.committed[1]})")
        heights = sorted({c.committed[0] for c in active})
        self.round_heights[round_number] = heights
        retrieved = {c.node_id: chain.get_round_updates(c.home.peer.ledger, fed, round_number)
                     for c in active}
        return RoundCommit(heights, retrieved, self.loop.now - start)

    def peers_consistent(self) -> bool:
        prints = {led.fingerprint() for led in self.ledgers}
        return len(prints) == 1
