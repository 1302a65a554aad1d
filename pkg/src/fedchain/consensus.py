"""RAFT ordering service and block cutting.

``RaftNode`` is a deterministic state machine: every input (a message or a
clock tick) returns the list of messages to send.  It never touches the
network or a clock itself, which keeps replays exact.  Times are seconds.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any

FOLLOWER, CANDIDATE, LEADER = "follower", "candidate", "leader"


@dataclass(frozen=True)
class Entry:
    term: int
    payload: Any


@dataclass(frozen=True)
class RequestVote:
    src: str
    dst: str
    term: int
    last_log_index: int
    last_log_term: int


@dataclass(frozen=True)
class VoteReply:
    src: str
    dst: str
    term: int
    granted: bool


@dataclass(frozen=True)
class AppendEntries:
    src: str
    dst: str
    term: int
    prev_log_index: int
    prev_log_term: int
    entries: tuple[Entry, ...]
    leader_commit: int


@dataclass(frozen=True)
class AppendReply:
    src: str
    dst: str
    term: int
    success: bool
    match_index: int


@dataclass(frozen=True)
class ClientSubmit:
    src: str
    dst: str
    payload: Any
    term: int = 0


@dataclass(frozen=True)
class SubmitReply:
    src: str
    dst: str
    term: int
    accepted: bool
    leader_hint: str | None
    index: int = 0
    ref: Any = None  # caller-supplied id of the submitted payload


RAFT_MESSAGES = (RequestVote, VoteReply, AppendEntries, AppendReply)


def message_index(msg) -> int:
    """Log index carried by a message, for traces."""
    if isinstance(msg, RequestVote):
        return msg.last_log_index
    if isinstance(msg, AppendEntries):
        return msg.prev_log_index
    if isinstance(msg, (AppendReply,)):
        return msg.match_index
    if isinstance(msg, SubmitReply):
        return msg.index
    return 0


class RaftNode:
    """One orderer.  Log indices are 1-based; index 0 is the empty prefix."""

    def __init__(self, node_id: str, peers, rng: random.Random,
                 election_timeout=(0.150, 0.300), heartbeat=0.050):
        self.node_id = node_id
        self.peers = [p for p in peers if p != node_id]
        self.rng = rng
        self.election_timeout = election_timeout
        self.heartbeat = heartbeat
        # persistent
        self.current_term = 0
        self.voted_for: str | None = None
        self.log: list[Entry] = []
        self._reset_volatile()

    def _reset_volatile(self):
        self.role = FOLLOWER
        self.commit_index = 0
        self.last_applied = 0
        self.leader_id: str | None = None
        self.votes: set[str] = set()
        self.next_index: dict[str, int] = {}
        self.match_index: dict[str, int] = {}
        self.inflight: dict[str, bool] = {}
        self.election_deadline = float("inf")
        self.next_heartbeat = float("inf")

    # -- helpers --------------------------------------------------------
    @property
    def cluster_size(self) -> int:
        return len(self.peers) + 1

    @property
    def last_index(self) -> int:
        return len(self.log)

    def term_at(self, index: int) -> int:
        return self.log[index - 1].term if index > 0 else 0

    def _majority(self, count: int) -> bool:
        return 2 * count > self.cluster_size

    def _reset_election_timer(self, now: float):
        lo, hi = self.election_timeout
        self.election_deadline = now + self.rng.uniform(lo, hi)

    def start(self, now: float):
        self._reset_election_timer(now)

    def crash(self):
        """Drop volatile state; the persistent term, vote and log survive."""
        self._reset_volatile()

    def restart(self, now: float):
        self._reset_volatile()
        self._reset_election_timer(now)

    def _become_follower(self, term: int, now: float, leader: str | None = None):
        if term > self.current_term:
            self.current_term = term
            self.voted_for = None
        self.role = FOLLOWER
        self.leader_id = leader
        self.votes = set()
        self.next_heartbeat = float("inf")
        self._reset_election_timer(now)

    def _start_election(self, now: float) -> list:
        self.role = CANDIDATE
        self.current_term += 1
        self.voted_for = self.node_id
        self.votes = {self.node_id}
        self.leader_id = None
        self._reset_election_timer(now)
        if self._majority(len(self.votes)):
            return self._become_leader(now)
        return [RequestVote(self.node_id, p, self.current_term, self.last_index,
                            self.term_at(self.last_index)) for p in self.peers]

    def _become_leader(self, now: float) -> list:
        self.role = LEADER
        self.leader_id = self.node_id
        self.next_index = {p: self.last_index + 1 for p in self.peers}
        self.match_index = {p: 0 for p in self.peers}
        self.inflight = {p: False for p in self.peers}
        self.election_deadline = float("inf")
        # a no-op from the new term lets earlier entries commit
        self.log.append(Entry(self.current_term, None))
        self._advance_commit()
        return self._broadcast(now, force=True)

    def _append_for(self, peer: str) -> AppendEntries:
        nxt = self.next_index[peer]
        prev = nxt - 1
        self.inflight[peer] = True
        return AppendEntries(self.node_id, peer, self.current_term, prev, self.term_at(prev),
                             tuple(self.log[prev:]), self.commit_index)

    def _broadcast(self, now: float, force: bool) -> list:
        self.next_heartbeat = now + self.heartbeat
        return [self._append_for(p) for p in self.peers if force or not self.inflight[p]]

    def _advance_commit(self):
        for n in range(self.last_index, self.commit_index, -1):
            if self.term_at(n) != self.current_term:
                break
            count = 1 + sum(1 for m in self.match_index.values() if m >= n)
            if self._majority(count):
                self.commit_index = n
                break

    # -- inputs ---------------------------------------------------------
    def tick(self, now: float) -> list:
        if self.role == LEADER:
            if now >= self.next_heartbeat:
                return self._broadcast(now, force=True)
            return []
        if now >= self.election_deadline:
            return self._start_election(now)
        return []

    def propose(self, payload, now: float) -> int:
        """Leader-only append; returns the new entry's index."""
        if self.role != LEADER:
            raise RuntimeError(f"{self.node_id} is not leader")
        self.log.append(Entry(self.current_term, payload))
        self._advance_commit()
        return self.last_index

    def replicate(self, now: float) -> list:
        """Ship pending entries to followers without an outstanding append."""
        if self.role != LEADER:
            return []
        return [self._append_for(p) for p in self.peers
                if not self.inflight[p] and self.next_index[p] <= self.last_index]

    def step(self, msg, now: float) -> list:
        if isinstance(msg, ClientSubmit):
            if self.role != LEADER:
                return [SubmitReply(self.node_id, msg.src, self.current_term, False,
                                    self.leader_id)]
            index = self.propose(msg.payload, now)
            return [SubmitReply(self.node_id, msg.src, self.current_term, True,
                                self.node_id, index)] + self.replicate(now)

        if msg.term > self.current_term:
            leader = msg.src if isinstance(msg, AppendEntries) else None
            self._become_follower(msg.term, now, leader)

        if isinstance(msg, RequestVote):
            return [self._on_request_vote(msg, now)]
        if isinstance(msg, VoteReply):
            if (self.role == CANDIDATE and msg.term == self.current_term and msg.granted):
                self.votes.add(msg.src)
                if self._majority(len(self.votes)):
                    return self._become_leader(now)
            return []
        if isinstance(msg, AppendEntries):
            return [self._on_append(msg, now)]
        if isinstance(msg, AppendReply):
            return self._on_append_reply(msg, now)
        raise TypeError(f"unexpected message {type(msg).__name__}")

    def _on_request_vote(self, msg: RequestVote, now: float) -> VoteReply:
        my_last_term = self.term_at(self.last_index)
        up_to_date = (msg.last_log_term, msg.last_log_index) >= (my_last_term, self.last_index)
        grant = (msg.term == self.current_term
                 and self.voted_for in (None, msg.src)
                 and up_to_date)
        if grant:
            self.voted_for = msg.src
            self._reset_election_timer(now)
        return VoteReply(self.node_id, msg.src, self.current_term, grant)

    def _on_append(self, msg: AppendEntries, now: float) -> AppendReply:
        if msg.term < self.current_term:
            return AppendReply(self.node_id, msg.src, self.current_term, False, 0)
        if self.role != FOLLOWER or self.leader_id != msg.src:
            self._become_follower(msg.term, now, msg.src)
        self._reset_election_timer(now)
        prev = msg.prev_log_index
        if prev > self.last_index or self.term_at(prev) != msg.prev_log_term:
            # hint: the leader may skip back to our log end
            return AppendReply(self.node_id, msg.src, self.current_term, False,
                               min(self.last_index, prev - 1))
        for k, entry in enumerate(msg.entries):
            idx = prev + 1 + k
            if idx <= self.last_index:
                if self.log[idx - 1].term == entry.term:
                    continue
                del self.log[idx - 1:]
            self.log.extend(msg.entries[k:])
            break
        last_new = prev + len(msg.entries)
        if msg.leader_commit > self.commit_index:
            self.commit_index = min(msg.leader_commit, last_new)
        return AppendReply(self.node_id, msg.src, self.current_term, True, last_new)

    def _on_append_reply(self, msg: AppendReply, now: float) -> list:
        if self.role != LEADER or msg.term != self.current_term:
            return []
        peer = msg.src
        self.inflight[peer] = False
        if msg.success:
            if msg.match_index > self.match_index[peer]:
                self.match_index[peer] = msg.match_index
            self.next_index[peer] = self.match_index[peer] + 1
            self._advance_commit()
        else:
            self.next_index[peer] = max(1, min(self.next_index[peer] - 1, msg.match_index + 1))
        if self.next_index[peer] <= self.last_index:
            return [self._append_for(peer)]
        return []

    def take_committed(self) -> list[tuple[int, Entry]]:
        """Entries committed since the last call, in log order."""
        out = [(i, self.log[i - 1]) for i in range(self.last_applied + 1, self.commit_index + 1)]
        self.last_applied = self.commit_index
        return out


# -- block cutting ------------------------------------------------------------

@dataclass
class BatchConfig:
    max_txs: int = 10
    batch_timeout: float = 0.02

    def __post_init__(self):
        if self.max_txs < 1:
            raise ValueError("max_txs must be >= 1")
        if self.batch_timeout <= 0:
            raise ValueError("batch_timeout must be > 0")


class BlockCutter:
    """Groups ordered transactions into batches by count or by age."""

    def __init__(self, cfg: BatchConfig):
        self.cfg = cfg
        self.pending: list = []
        self.first_time: float | None = None

    def expired(self, now: float) -> bool:
        return bool(self.pending) and now - self.first_time >= self.cfg.batch_timeout

    def ordered(self, tx, now: float) -> list[list]:
        batches = []
        if self.expired(now):
            batches.append(self.cut())
        if not self.pending:
            self.first_time = now
        self.pending.append(tx)
        if len(self.pending) >= self.cfg.max_txs:
            batches.append(self.cut())
        return batches

    def cut(self) -> list:
        batch, self.pending, self.first_time = self.pending, [], None
        return batch


def cut_blocks(ordered, cfg: BatchConfig, until: float | None = None) -> list[list]:
    """Batch a time-stamped, consensus-ordered stream of ``(time, tx)``.

    Pending transactions still waiting at ``until`` are cut if their
    timeout has elapsed by then.
    """
    cutter = BlockCutter(cfg)
    batches = []
    for now, tx in ordered:
        batches.extend(cutter.ordered(tx, now))
    if until is not None and cutter.expired(until):
        batches.append(cutter.cut())
    return batches


@dataclass(frozen=True)
class TxEntry:
    """Log payload: one endorsed transaction, stamped by the leader."""
    tx: Any
    txid: Any
    client: str
    stamp: float


@dataclass(frozen=True)
class CutEntry:
    """Log payload asking every orderer to cut the pending batch."""
    height: int
    stamp: float


class BlockAssembler:
    """Turns the committed log into blocks, identically on every orderer.

    Count-based cuts follow the log directly; time-based cuts are decided by
    the leader and recorded in the log as ``CutEntry`` so followers cut at
    the same position.
    """

    def __init__(self, cfg: BatchConfig, make_block, genesis_hash: bytes,
                 first_height: int = 1):
        self.cfg = cfg
        self.make_block = make_block
        self.genesis_hash = genesis_hash
        self.first_height = first_height
        self.reset()

    def reset(self):
        self.cutter = BlockCutter(self.cfg)
        self.next_height = self.first_height
        self.tip_hash = self.genesis_hash
        self.seen: set = set()
        self.blocks: list = []
        self._last_stamp = 0.0

    @property
    def pending(self) -> list:
        return self.cutter.pending

    def _emit(self, txs) -> Any:
        block = self.make_block(self.next_height, self.tip_hash, txs, self._last_stamp)
        self.next_height += 1
        self.tip_hash = block.block_hash
        self.blocks.append(block)
        return block

    def apply(self, payload) -> list:
        out = []
        if isinstance(payload, TxEntry):
            if payload.txid in self.seen:
                return out
            self.seen.add(payload.txid)
            self._last_stamp = payload.stamp
            for batch in self.cutter.ordered(payload.tx, payload.stamp):
                out.append(self._emit(batch))
        elif isinstance(payload, CutEntry):
            if payload.height == self.next_height and self.pending:
                self._last_stamp = max(self._last_stamp, payload.stamp)
                out.append(self._emit(self.cutter.cut()))
        return out
