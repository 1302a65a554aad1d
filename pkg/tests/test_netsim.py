import random

import pytest

from fedchain.netsim import (
    EventLoop,
    Network,
    Process,
    SchedulingError,
    Station,
    Topology,
    derive_seed,
)


def _loop_with_log():
    loop = EventLoop(record_trace=True)
    seen = []
    loop.register("a", lambda p: seen.append(("a", loop.now, p)))
    loop.register("b", lambda p: seen.append(("b", loop.now, p)))
    return loop, seen


class Echo(Process):
    def __init__(self, node_id, net):
        super().__init__(node_id, net)
        self.got = []

    def handle(self, msg):
        self.got.append((self.loop.now, msg))


def _net(seed=0, **topo):
    loop = EventLoop()
    net = Network(loop, Topology(**topo), random.Random(seed))
    return loop, net


class TestEventLoop:
    def test_equal_times_run_in_insertion_order(self):
        loop, seen = _loop_with_log()
        for k in range(5):
            loop.schedule(1.0, "ab"[k % 2], k)
        loop.run()
        assert [p for _, _, p in seen] == [0, 1, 2, 3, 4]

    def test_time_order(self):
        loop, seen = _loop_with_log()
        loop.schedule(2.0, "a", "late")
        loop.schedule(1.0, "b", "early")
        loop.run()
        assert [(t, p) for _, t, p in seen] == [(1.0, "early"), (2.0, "late")]

    def test_empty_queue_returns_immediately(self):
        loop = EventLoop()
        assert loop.run() == []
        assert loop.now == 0.0 and loop.processed == 0

    def test_past_event_rejected(self):
        loop, _ = _loop_with_log()
        loop.schedule(1.0, "a")
        loop.run()
        with pytest.raises(SchedulingError):
            loop.schedule(0.5, "a")

    def test_until_stops_and_advances_clock(self):
        loop, seen = _loop_with_log()
        loop.schedule(1.0, "a", 1)
        loop.schedule(3.0, "a", 3)
        loop.run(until=2.0)
        assert [p for _, _, p in seen] == [1] and loop.now == 2.0
        loop.run()
        assert [p for _, _, p in seen] == [1, 3]

    def test_stop_predicate_and_max_events(self):
        loop, seen = _loop_with_log()
        for k in range(10):
            loop.schedule(float(k), "a", k)
        loop.run(stop=lambda: len(seen) == 4)
        assert len(seen) == 4
        loop.run(max_events=2)
        assert len(seen) == 6

    def test_trace_records_targets(self):
        loop, _ = _loop_with_log()
        loop.schedule(0.5, "b", 1)
        trace = loop.run()
        assert [(r.time, r.target, r.kind) for r in trace] == [(0.5, "b", "int")]


def test_derive_seed_is_stable_and_label_sensitive():
    assert derive_seed(1, "net") == derive_seed(1, "net")
    assert derive_seed(1, "net") != derive_seed(2, "net")
    assert derive_seed(1, "net") != derive_seed(1, "raft")


class TestNetwork:
    def test_latency_respects_floor(self):
        _, net = _net(latency_mean=0.0002, latency_std=0.01, latency_floor=0.0001)
        assert min(net.latency() for _ in range(1000)) >= 0.0001

    def test_same_seed_same_delivery_times(self):
        def run(seed):
            loop, net = _net(seed)
            a, b = Echo("x", net), Echo("y", net)
            for k in range(20):
                a.send("y", k)
            loop.run()
            return b.got
        assert run(3) == run(3)
        assert run(3) != run(4)

    def test_crashed_process_drops_messages_and_timers(self):
        loop, net = _net()
        a, b = Echo("x", net), Echo("y", net)
        fired = []
        b.after(0.5, lambda: fired.append("old"))
        a.send("y", "lost")
        b.crash()
        loop.run(until=1.0)
        b.restart()
        a.send("y", "kept")
        loop.run()
        assert [m for _, m in b.got] == ["kept"] and fired == []

    def test_topology_validation(self):
        with pytest.raises(ValueError):
            Topology(latency_mean=0)
        with pytest.raises(ValueError):
            Topology(validate_time=0)
        with pytest.raises(ValueError):
            Topology(clients=["n1"], peers=["n1"])

    def test_capacities(self):
        t = Topology()
        assert t.write_capacity == pytest.approx(400.0)
        assert t.read_capacity == pytest.approx(2000.0)


class TestStation:
    def test_fifo_service(self):
        loop, net = _net()
        proc = Echo("s", net)
        st = Station(proc)
        done = []
        for k in range(3):
            st.submit(1.0, lambda k=k: done.append((loop.now, k)))
        loop.run()
        assert done == [(1.0, 0), (2.0, 1), (3.0, 2)]

    def test_limit_rejects_when_full(self):
        loop, net = _net()
        st = Station(Echo("s", net), limit=2)
        results = [st.submit(1.0, lambda: None) for _ in range(4)]
        assert results == [True, True, False, False] and st.rejected == 2
        loop.run()
        assert st.in_system == 0
        assert st.submit(1.0, lambda: None)
