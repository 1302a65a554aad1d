import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedchain import consensus as cs
from fedchain.consensus import (
    AppendEntries,
    BatchConfig,
    BlockAssembler,
    ClientSubmit,
    CutEntry,
    Entry,
    RaftNode,
    TxEntry,
    cut_blocks,
)


class Cluster:
    """Synchronous harness: messages wait in a list until delivered by hand."""

    def __init__(self, n, seed=0):
        self.ids = [f"o{i}" for i in range(n)]
        self.nodes = {i: RaftNode(i, self.ids, random.Random(f"{seed}/{i}")) for i in self.ids}
        self.inbox: list = []
        self.now = 0.0
        self.down: set = set()
        for node in self.nodes.values():
            node.start(0.0)

    def send(self, msgs):
        self.inbox.extend(m for m in msgs if m.dst not in self.down)

    def deliver(self, k=0):
        msg = self.inbox.pop(k)
        if msg.dst in self.down:
            return []
        out = self.nodes[msg.dst].step(msg, self.now)
        self.send(out)
        return out

    def drain(self, limit=10_000):
        for _ in range(limit):
            if not self.inbox:
                return
            self.deliver()
        raise AssertionError("messages never settled")

    def elect(self, node_id):
        node = self.nodes[node_id]
        self.now = max(self.now, node.election_deadline)
        self.send(node.tick(self.now))
        self.drain()
        assert node.role == cs.LEADER
        return node

    def leaders(self):
        return [n for n in self.nodes.values() if n.role == cs.LEADER]


def _log_matching_ok(nodes):
    for a in nodes:
        for b in nodes:
            for i in range(1, min(a.last_index, b.last_index) + 1):
                if a.term_at(i) == b.term_at(i) and a.log[:i] != b.log[:i]:
                    return False
    return True


class TestElection:
    def test_single_node_leads_and_commits_alone(self):
        c = Cluster(1)
        leader = c.elect("o0")
        out = leader.step(ClientSubmit("cli", "o0", "x"), c.now)
        assert out[0].accepted and out[0].index == 2
        assert leader.commit_index == 2
        assert [e.payload for _, e in leader.take_committed()] == [None, "x"]

    def test_majority_elects_and_others_follow(self):
        c = Cluster(3)
        leader = c.elect("o1")
        assert leader.current_term == 1
        for nid in ("o0", "o2"):
            assert c.nodes[nid].leader_id == "o1"
            assert c.nodes[nid].role == cs.FOLLOWER

    def test_one_vote_per_term(self):
        c = Cluster(3)
        voter = c.nodes["o2"]
        a = voter.step(cs.RequestVote("o0", "o2", 1, 0, 0), 0.0)[0]
        b = voter.step(cs.RequestVote("o1", "o2", 1, 0, 0), 0.0)[0]
        assert a.granted and not b.granted

    def test_stale_log_loses_vote(self):
        c = Cluster(3)
        voter = c.nodes["o2"]
        voter.log = [Entry(1, "a"), Entry(2, "b")]
        voter.current_term = 2
        reply = voter.step(cs.RequestVote("o0", "o2", 3, 5, 1), 0.0)[0]
        assert reply.term == 3 and not reply.granted

    def test_split_vote_then_recovery(self):
        c = Cluster(4)
        a, b = c.nodes["o0"], c.nodes["o1"]
        votes_a = a.tick(a.election_deadline)
        votes_b = b.tick(b.election_deadline)
        assert a.current_term == b.current_term == 1
        # o2 hears o0 first, o3 hears o1 first: two votes each, three needed
        order = [m for m in votes_a if m.dst == "o2"] + [m for m in votes_b if m.dst == "o3"]
        order += [m for m in votes_a + votes_b if m not in order]
        c.send(order)
        c.drain()
        assert not c.leaders()
        assert a.role == b.role == cs.CANDIDATE
        winner = min((a, b), key=lambda n: n.election_deadline)
        c.elect(winner.node_id)
        assert winner.current_term == 2
        assert c.leaders() == [winner]

    def test_healthy_leader_never_challenged(self):
        c = Cluster(3, seed=5)
        leader = c.elect("o0")
        for _ in range(10_000):
            c.now += 0.01
            for node in c.nodes.values():
                c.send(node.tick(c.now))
            c.drain()
        assert leader.role == cs.LEADER
        assert all(n.current_term == 1 for n in c.nodes.values())

    def test_higher_term_deposes_leader(self):
        c = Cluster(3)
        leader = c.elect("o0")
        leader.step(cs.AppendReply("o1", "o0", 7, False, 0), c.now)
        assert leader.role == cs.FOLLOWER and leader.current_term == 7


class TestReplication:
    def test_commit_needs_quorum_of_acks(self):
        c = Cluster(5)
        leader = c.elect("o0")
        base = leader.commit_index
        leader.propose("tx", c.now)
        sends = leader.replicate(c.now) or [leader._append_for(p) for p in leader.peers]
        by_dst = {m.dst: m for m in sends}
        replies = [c.nodes[d].step(by_dst[d], c.now)[0] for d in ("o1", "o2")]
        leader.step(replies[0], c.now)
        assert leader.commit_index == base
        leader.step(replies[1], c.now)
        assert leader.commit_index == base + 1

    def test_follower_rejects_missing_prefix(self):
        c = Cluster(3)
        f = c.nodes["o1"]
        reply = f.step(AppendEntries("o0", "o1", 1, 4, 1, (Entry(1, "x"),), 0), 0.0)[0]
        assert not reply.success and reply.match_index == 0

    def test_conflicting_suffix_truncated(self):
        c = Cluster(3)
        f = c.nodes["o1"]
        f.log = [Entry(1, "a"), Entry(1, "b"), Entry(1, "stale")]
        f.current_term = 1
        msg = AppendEntries("o0", "o1", 2, 2, 1, (Entry(2, "c"),), 0)
        assert f.step(msg, 0.0)[0].success
        assert [e.payload for e in f.log] == ["a", "b", "c"]

    def test_duplicate_append_is_idempotent(self):
        c = Cluster(3)
        f = c.nodes["o1"]
        msg = AppendEntries("o0", "o1", 1, 0, 0, (Entry(1, "a"), Entry(1, "b")), 0)
        f.step(msg, 0.0)
        f.step(AppendEntries("o0", "o1", 1, 0, 0, (Entry(1, "a"),), 0), 0.0)
        assert [e.payload for e in f.log] == ["a", "b"]

    def test_non_leader_redirects(self):
        c = Cluster(3)
        c.elect("o2")
        reply = c.nodes["o0"].step(ClientSubmit("cli", "o0", "x"), c.now)[0]
        assert not reply.accepted and reply.leader_hint == "o2"

    def test_leader_only_commits_current_term_by_count(self):
        c = Cluster(3)
        leader = c.elect("o0")
        # an old-term entry replicated to a majority is not committed on its own
        leader.log.insert(0, Entry(0, "old"))
        leader.commit_index = 0
        leader.match_index = {p: 1 for p in leader.peers}
        leader._advance_commit()
        assert leader.commit_index == 0

    def test_crash_keeps_persistent_state(self):
        c = Cluster(3)
        leader = c.elect("o0")
        leader.propose("x", c.now)
        term, log = leader.current_term, list(leader.log)
        leader.crash()
        assert leader.role == cs.FOLLOWER and leader.commit_index == 0
        assert leader.current_term == term and leader.log == log


@given(data=st.data())
@settings(max_examples=300, deadline=None)
def test_random_schedules_keep_raft_safe(data):
    """Random delivery order, drops, crashes and proposals never break safety."""
    c = Cluster(data.draw(st.sampled_from([3, 5])), seed=data.draw(st.integers(0, 99)))
    leaders_by_term: dict[int, str] = {}
    committed: dict[int, Entry] = {}
    serial = 0
    for _ in range(data.draw(st.integers(20, 150))):
        action = data.draw(st.sampled_from(["tick", "deliver", "deliver", "drop",
                                            "propose", "crash", "restart"]))
        if action == "tick":
            c.now += data.draw(st.floats(0.005, 0.4))
            for nid, node in c.nodes.items():
                if nid not in c.down:
                    c.send(node.tick(c.now))
        elif action in ("deliver", "drop") and c.inbox:
            k = data.draw(st.integers(0, len(c.inbox) - 1))
            if action == "drop":
                c.inbox.pop(k)
            else:
                c.deliver(k)
        elif action == "propose":
            for leader in c.leaders():
                if leader.node_id not in c.down:
                    serial += 1
                    leader.propose(serial, c.now)
                    c.send(leader.replicate(c.now))
        elif action == "crash" and len(c.down) < (len(c.ids) - 1) // 2:
            nid = data.draw(st.sampled_from(c.ids))
            c.nodes[nid].crash()
            c.down.add(nid)
        elif action == "restart" and c.down:
            nid = data.draw(st.sampled_from(sorted(c.down)))
            c.down.discard(nid)
            c.nodes[nid].restart(c.now)

        for node in c.nodes.values():
            if node.role == cs.LEADER:
                assert leaders_by_term.setdefault(node.current_term, node.node_id) == node.node_id
            for i in range(1, node.commit_index + 1):
                entry = node.log[i - 1]
                assert committed.setdefault(i, entry) == entry
        assert _log_matching_ok(c.nodes.values())


class TestBatchConfig:
    @pytest.mark.parametrize("kwargs", [{"max_txs": 0}, {"batch_timeout": 0}])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            BatchConfig(**kwargs)


class TestCutBlocks:
    def test_full_block(self):
        stream = [(0.001 * i, i) for i in range(7)]
        assert cut_blocks(stream, BatchConfig(7, 2.0)) == [list(range(7))]

    def test_partial_block_cut_by_timeout(self):
        stream = [(0.0, "a"), (0.1, "b"), (0.2, "c")]
        assert cut_blocks(stream, BatchConfig(7, 2.0), until=1.9) == []
        assert cut_blocks(stream, BatchConfig(7, 2.0), until=2.0) == [["a", "b", "c"]]

    def test_overflow_splits(self):
        stream = [(0.0, i) for i in range(10)]
        assert cut_blocks(stream, BatchConfig(7, 2.0), until=5.0) == [
            list(range(7)), [7, 8, 9]]

    def test_late_arrival_starts_new_batch(self):
        stream = [(0.0, "a"), (3.0, "b")]
        assert cut_blocks(stream, BatchConfig(7, 2.0)) == [["a"]]

    @given(times=st.lists(st.floats(0, 10), max_size=40), size=st.integers(1, 8))
    @settings(max_examples=100, deadline=None)
    def test_order_preserved_and_sizes_bounded(self, times, size):
        stream = [(t, i) for i, t in enumerate(sorted(times))]
        batches = cut_blocks(stream, BatchConfig(size, 1.0), until=100.0)
        assert [tx for b in batches for tx in b] == [tx for _, tx in stream]
        assert all(1 <= len(b) <= size for b in batches)


class _Block:
    def __init__(self, height, prev, txs, stamp):
        self.height, self.prev, self.txs, self.stamp = height, prev, tuple(txs), stamp
        self.block_hash = f"{height}:{prev}:{self.txs}".encode()


class TestAssembler:
    def _log(self):
        return [TxEntry(f"t{i}", f"t{i}", "c", 0.1 * i) for i in range(5)] + [
            TxEntry("t2", "t2", "c", 0.6),  # retried duplicate
            CutEntry(2, 0.7),
            CutEntry(2, 0.8),  # stale cut for an already emitted height
            TxEntry("t5", "t5", "c", 0.9)]

    def _run(self, log):
        asm = BlockAssembler(BatchConfig(3, 2.0), _Block, b"genesis")
        for payload in log:
            asm.apply(payload)
        return asm

    def test_blocks_from_log(self):
        asm = self._run(self._log())
        assert [b.txs for b in asm.blocks] == [("t0", "t1", "t2"), ("t3", "t4")]
        assert asm.pending == ["t5"]
        assert asm.blocks[1].prev == asm.blocks[0].block_hash

    def test_identical_on_every_replica(self):
        a, b = self._run(self._log()), self._run(self._log())
        assert [x.block_hash for x in a.blocks] == [x.block_hash for x in b.blocks]

    def test_reset_replays(self):
        asm = self._run(self._log())
        hashes = [x.block_hash for x in asm.blocks]
        asm.reset()
        for payload in self._log():
            asm.apply(payload)
        assert [x.block_hash for x in asm.blocks] == hashes
