"""Deterministic seed-driven network simulator.

Hosts the same acceptor/proposer actors as the real daemons behind a
virtual-time event loop.  All nondeterminism (drops, duplication, delays)
flows from a single seeded RNG consumed in event order, so a given
(topology, fault profile, workload, seed, horizon) tuple always produces
the identical event sequence, trace and history: (virtual_time,
sequence_no) is a total order over events.

Crash fidelity: a node's storage backend survives its crash; restart
rebuilds the actor from it, which is exactly what the durability contract
promises across real process crashes.
"""

from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass, field

from .core import ClientChange, ClientDelete, ClientReply
from .storage import MemoryBackend
from .trace import TraceEvent

#: Client traffic rides a stream transport in the real deployment, so the
#: channel may lose or delay it but never duplicates a submission.
_STREAM_MESSAGES = (ClientChange, ClientDelete, ClientReply)

DELIVER = "deliver"
TIMER_FIRE = "timer_fire"
CRASH = "crash"
RESTART = "restart"
PARTITION = "partition"
HEAL = "heal"
CLIENT_OP = "client_op"
GC_TICK = "gc_tick"
PLAN_STEP = "plan_step"


@dataclass(frozen=True)
class PartitionSpec:
    start: int
    end: int
    left: tuple[str, ...]
    right: tuple[str, ...]


@dataclass(frozen=True)
class CrashSpec:
    node: str
    at: int
    restart_at: int | None


@dataclass
class FaultProfile:
    drop: float = 0.0
    duplicate: float = 0.0
    delay_min: int = 1
    delay_max: int = 1
    partitions: tuple[PartitionSpec, ...] = ()
    crashes: tuple[CrashSpec, ...] = ()
    seed: int = 0


@dataclass(frozen=True)
class SimEvent:
    time: int
    seq: int
    kind: str
    detail: str


def _timer_kind(token) -> str:
    name = token[0] if isinstance(token, tuple) and token else None
    if name == "gc":
        return GC_TICK
    if name in ("op", "op_timeout"):
        return CLIENT_OP
    if name == "plan":
        return PLAN_STEP
    return TIMER_FIRE


class _Node:
    __slots__ = ("factory", "backend", "actor", "up", "generation")

    def __init__(self, factory, backend):
        self.factory = factory
        self.backend = backend
        self.actor = None
        self.up = False
        self.generation = 0


class SimContext:
    __slots__ = ("net", "node")

    def __init__(self, net: "SimNet", node: str):
        self.net = net
        self.node = node

    def send(self, to: str, msg) -> None:
        self.net._send(self.node, to, msg)

    def set_timer(self, delay: int, token) -> None:
        self.net._set_timer(self.node, delay, token)

    def now(self) -> int:
        return self.net.now

    def power(self, node_id: str, on: bool) -> None:
        self.net._power(node_id, on)


class _ReplayRule:
    __slots__ = ("predicate", "deliver_at", "captured")

    def __init__(self, predicate, deliver_at: int):
        self.predicate = predicate
        self.deliver_at = deliver_at
        self.captured = None


class SimNet:
    def __init__(self, profile: FaultProfile | None = None, *, record_events: bool = False):
        self.profile = profile or FaultProfile()
        self.rng = random.Random(self.profile.seed)
        self.now = 0
        self._seq = itertools.count()
        self._heap: list[tuple[int, int, tuple]] = []
        self.nodes: dict[str, _Node] = {}
        self.trace: list[TraceEvent] = []
        self._node_ts: dict[str, int] = {}
        self.counters: dict[str, int] = {}
        self.record_events = record_events
        self.events: list[SimEvent] = []
        self._partitions: dict[int, tuple[frozenset, frozenset]] = {}
        self._partition_ids = itertools.count()
        self._replays: list[_ReplayRule] = []
        self.message_filter = None  # callable(src, dst, msg) -> bool, False drops
        self.delay_fn = None  # callable(src, dst) -> ticks, overrides profile delays
        self.horizon_exhausted = False
        for spec in self.profile.partitions:
            self.schedule_partition(spec)
        for spec in self.profile.crashes:
            self.schedule_crash(spec.node, spec.at, spec.restart_at)

    # -- topology -----------------------------------------------------------

    def add_node(self, node_id: str, factory, *, up: bool = True, backend=None) -> None:
        if node_id in self.nodes:
            raise ValueError(f"duplicate node {node_id}")
        node = _Node(factory, backend if backend is not None else MemoryBackend())
        self.nodes[node_id] = node
        if up:
            node.up = True
            node.actor = factory(node.backend, self.trace_sink)
            self._push(0, ("start", node_id, node.generation))

    def trace_sink(self, **fields) -> None:
        node = fields["node"]
        ts = self._node_ts.get(node, 0) + 1
        self._node_ts[node] = ts
        self.trace.append(TraceEvent(ts=ts, **fields))

    def actor_of(self, node_id: str):
        return self.nodes[node_id].actor

    def backend_of(self, node_id: str):
        return self.nodes[node_id].backend

    # -- scheduling ------------------------------------------------------------

    def _push(self, at: int, item: tuple) -> None:
        heapq.heappush(self._heap, (at, next(self._seq), item))

    def schedule_crash(self, node: str, at: int, restart_at: int | None = None) -> None:
        self._push(at, ("crash", node))
        if restart_at is not None:
            self._push(restart_at, ("restart", node))

    def schedule_partition(self, spec: PartitionSpec) -> None:
        pid = next(self._partition_ids)
        self._push(spec.start, ("partition", pid, frozenset(spec.left), frozenset(spec.right)))
        self._push(spec.end, ("heal", pid))

    def isolate(self, node: str, start: int, end: int) -> None:
        others = tuple(n for n in sorted(self.nodes) if n != node)
        self.schedule_partition(PartitionSpec(start, end, (node,), others))

    def add_replay(self, predicate, deliver_at: int) -> None:
        """Deliver an extra copy of the first message matching *predicate*
        at tick *deliver_at* (models an arbitrarily delayed duplicate)."""
        self._replays.append(_ReplayRule(predicate, deliver_at))

    def _set_timer(self, node_id: str, delay: int, token) -> None:
        node = self.nodes[node_id]
        self._push(self.now + delay, ("timer", node_id, node.generation, token))

    def _power(self, node_id: str, on: bool) -> None:
        self._push(self.now, ("restart" if on else "crash", node_id))

    # -- message plumbing ---------------------------------------------------------

    def _count(self, name: str) -> None:
        self.counters[name] = self.counters.get(name, 0) + 1

    def _log(self, kind: str, detail: str) -> None:
        if self.record_events:
            self.events.append(SimEvent(self.now, next(self._seq), kind, detail))

    def _send(self, src: str, dst: str, msg) -> None:
        kind = type(msg).__name__
        self._count(f"sent:{kind}")
        self._count(f"sent:{src}:{kind}")
        for rule in self._replays:
            if rule.captured is None and rule.predicate(src, dst, msg):
                rule.captured = (src, dst, msg)
                self._push(rule.deliver_at, ("deliver", src, dst, msg))
        if isinstance(msg, _STREAM_MESSAGES):
            copies = 1
        else:
            copies = 2 if self.rng.random() < self.profile.duplicate else 1
        for _ in range(copies):
            if self.rng.random() < self.profile.drop:
                self._count("dropped:profile")
                continue
            if self.delay_fn is not None:
                delay = self.delay_fn(src, dst)
            else:
                delay = self.rng.randint(self.profile.delay_min, self.profile.delay_max)
            self._push(self.now + delay, ("deliver", src, dst, msg))

    def _blocked(self, src: str, dst: str) -> bool:
        for left, right in self._partitions.values():
            if (src in left and dst in right) or (src in right and dst in left):
                return True
        return False

    # -- event loop ------------------------------------------------------------------

    def run(self, horizon: int) -> None:
        while self._heap and self._heap[0][0] <= horizon:
            at, _seq, item = heapq.heappop(self._heap)
            self.now = at
            self._dispatch(item)
        self.horizon_exhausted = bool(self._heap)
        self.now = horizon

    def _dispatch(self, item: tuple) -> None:
        kind = item[0]
        if kind == "deliver":
            _, src, dst, msg = item
            node = self.nodes[dst]
            if not node.up:
                self._count("dropped:node_down")
                return
            if self._blocked(src, dst):
                self._count("dropped:partition")
                return
            if self.message_filter is not None and not self.message_filter(src, dst, msg):
                self._count("dropped:filter")
                return
            self._count("delivered")
            self._log(DELIVER, f"{src}->{dst} {msg!r}")
            node.actor.handle(src, msg, SimContext(self, dst))
        elif kind == "timer":
            _, node_id, generation, token = item
            node = self.nodes[node_id]
            if not node.up or node.generation != generation:
                return
            self._log(_timer_kind(token), f"{node_id} {token!r}")
            node.actor.on_timer(token, SimContext(self, node_id))
        elif kind == "crash":
            _, node_id = item
            node = self.nodes[node_id]
            if node.up:
                self._log(CRASH, node_id)
                node.up = False
                node.actor = None
        elif kind == "restart":
            _, node_id = item
            node = self.nodes[node_id]
            if not node.up:
                self._log(RESTART, node_id)
                node.up = True
                node.generation += 1
                node.actor = node.factory(node.backend, self.trace_sink)
                node.actor.on_start(SimContext(self, node_id))
        elif kind == "partition":
            _, pid, left, right = item
            self._log(PARTITION, f"{sorted(left)}|{sorted(right)}")
            self._partitions[pid] = (left, right)
        elif kind == "heal":
            _, pid = item
            if pid in self._partitions:
                self._log(HEAL, str(pid))
                del self._partitions[pid]
        elif kind == "start":
            _, node_id, generation = item
            node = self.nodes[node_id]
            if node.up and node.generation == generation:
                node.actor.on_start(SimContext(self, node_id))

    # -- reporting --------------------------------------------------------------------

    def events_bytes(self) -> bytes:
        lines = [f"{e.time}\t{e.seq}\t{e.kind}\t{e.detail}" for e in self.events]
        return ("\n".join(lines) + "\n").encode()
