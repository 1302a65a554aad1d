"""Deterministic discrete-event loop and simulated network links."""
from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Callable

from .consensus import message_index


class SchedulingError(RuntimeError):
    pass


def derive_seed(seed: int, *labels) -> int:
    """Stable 64-bit sub-seed for one named component of a run."""
    text = "/".join([str(seed), *map(str, labels)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


@dataclass(frozen=True)
class TraceRecord:
    time: float
    seq: int
    target: str
    kind: str


class EventLoop:
    """Events run in (time, insertion sequence) order; time never decreases."""

    def __init__(self, record_trace: bool = False):
        self.now = 0.0
        self._queue: list = []
        self._seq = 0
        self.handlers: dict[str, Callable[[Any], None]] = {}
        self.record_trace = record_trace
        self.trace: list[TraceRecord] = []
        self.processed = 0

    def register(self, target: str, handler: Callable[[Any], None]):
        self.handlers[target] = handler

    def schedule(self, time: float, target: str, payload: Any = None):
        if time < self.now:
            raise SchedulingError(f"event for {target} at {time} is before now={self.now}")
        heapq.heappush(self._queue, (time, self._seq, target, payload))
        self._seq += 1

    def call_later(self, delay: float, target: str, payload: Any = None):
        self.schedule(self.now + delay, target, payload)

    def __len__(self):
        return len(self._queue)

    def peek_time(self) -> float | None:
        return self._queue[0][0] if self._queue else None

    def run(self, until: float | None = None, stop: Callable[[], bool] | None = None,
            max_events: int | None = None) -> list[TraceRecord]:
        """Process events until the queue empties, ``until`` passes, or ``stop()``.

        Returns the trace records produced by this call.
        """
        start = len(self.trace)
        count = 0
        while self._queue:
            if stop is not None and stop():
                break
            if until is not None and self._queue[0][0] > until:
                self.now = until
                break
            if max_events is not None and count >= max_events:
                break
            time, seq, target, payload = heapq.heappop(self._queue)
            self.now = time
            if self.record_trace:
                self.trace.append(TraceRecord(time, seq, target, type(payload).__name__))
            self.handlers[target](payload)
            count += 1
        self.processed += count
        return self.trace[start:]


@dataclass
class Topology:
    """Node roles, link latency model and per-node service times (seconds)."""
    clients: list[str] = field(default_factory=lambda: [f"client{k}" for k in range(7)])
    peers: list[str] = field(default_factory=lambda: [f"peer{k}" for k in range(4)])
    orderers: list[str] = field(default_factory=lambda: [f"orderer{k}" for k in range(5)])
    latency_mean: float = 0.002
    latency_std: float = 0.0005
    latency_floor: float = 0.0001
    endorse_time: float = 0.0005
    validate_time: float = 0.0025
    order_time: float = 0.0005
    read_time: float = 0.0005
    exec_queue_limit: int = 64
    train_time: float = 1.0
    election_timeout: tuple[float, float] = (0.150, 0.300)
    heartbeat: float = 0.050
    tick_interval: float = 0.010

    def __post_init__(self):
        self.election_timeout = tuple(self.election_timeout)
        if self.latency_mean <= 0 or self.latency_floor <= 0:
            raise ValueError("latencies must be positive")
        for name in ("endorse_time", "validate_time", "order_time", "read_time"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if len(set(self.clients + self.peers + self.orderers)) != \
                len(self.clients) + len(self.peers) + len(self.orderers):
            raise ValueError("node ids must be unique")

    @property
    def write_capacity(self) -> float:
        """Commit-stage bottleneck in tx/s."""
        return min(1.0 / self.validate_time, 1.0 / self.order_time,
                   1.0 / self.endorse_time)

    @property
    def read_capacity(self) -> float:
        return 1.0 / self.read_time

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["election_timeout"] = list(self.election_timeout)
        return d


@dataclass(frozen=True)
class MessageRecord:
    time: float
    src: str
    dst: str
    kind: str
    term: int
    index: int


class Process:
    """A node on the network.  Crashed processes drop everything they receive."""

    def __init__(self, node_id: str, net: "Network"):
        self.node_id = node_id
        self.net = net
        self.loop = net.loop
        self.alive = True
        self.epoch = 0
        net.attach(self)

    def deliver(self, payload):
        if not self.alive:
            return
        if isinstance(payload, _Callback):
            if payload.epoch == self.epoch:
                payload.fn()
            return
        self.handle(payload)

    def handle(self, msg):
        raise NotImplementedError

    def after(self, delay: float, fn: Callable[[], None]):
        self.loop.call_later(delay, self.node_id, _Callback(self.epoch, fn))

    def send(self, dst: str, msg):
        self.net.send(self.node_id, dst, msg)

    def crash(self):
        self.alive = False
        self.epoch += 1

    def restart(self):
        self.alive = True
        self.epoch += 1


@dataclass(frozen=True)
class _Callback:
    epoch: int
    fn: Callable[[], None]


class Station:
    """FIFO single server; ``limit`` bounds jobs in system (queued + serving)."""

    def __init__(self, proc: Process, limit: int | None = None):
        self.proc = proc
        self.limit = limit
        self.busy_until = 0.0
        self.in_system = 0
        self.rejected = 0

    def submit(self, service_time: float, done: Callable[[], None]) -> bool:
        if self.limit is not None and self.in_system >= self.limit:
            self.rejected += 1
            return False
        now = self.proc.loop.now
        start = max(now, self.busy_until)
        self.busy_until = start + service_time
        self.in_system += 1

        def finish():
            self.in_system -= 1
            done()

        self.proc.after(self.busy_until - now, finish)
        return True

    def reset(self):
        self.busy_until = 0.0
        self.in_system = 0


class Network:
    def __init__(self, loop: EventLoop, topology: Topology, rng: random.Random,
                 record_messages: bool = False):
        self.loop = loop
        self.topology = topology
        self.rng = rng
        self.procs: dict[str, Process] = {}
        self.record_messages = record_messages
        self.messages: list[MessageRecord] = []
        self.sent = 0

    def attach(self, proc: Process):
        self.procs[proc.node_id] = proc
        self.loop.register(proc.node_id, proc.deliver)

    def latency(self) -> float:
        t = self.topology
        return max(t.latency_floor, self.rng.gauss(t.latency_mean, t.latency_std))

    def send(self, src: str, dst: str, msg):
        self.sent += 1
        if self.record_messages:
            self.messages.append(MessageRecord(self.loop.now, src, dst, type(msg).__name__,
                                               getattr(msg, "term", 0), message_index(msg)))
        self.loop.call_later(self.latency(), dst, msg)
