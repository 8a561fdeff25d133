"""Key-value layer: command constructors and deletion garbage collection.

The store is an array of independent replicated registers, one per key,
so the whole layer is thin wrappers over the proposer plus the multi-step
deletion protocol.

Deleting a key writes a tombstone with the regular accept quorum, durably
enqueues a GC task, and only then confirms to the client.  The background
collector then walks four idempotent steps per task:

1. replicate the current value (normally the tombstone) to the full
   roster by running the identity change with an all-acceptors quorum,
2. invalidate every proposer's cache for the key, fast-forward their
   counters past the tombstone ballot and bump their ages,
3. raise the per-proposer minimum ages on every acceptor,
4. erase the register wherever it still holds this task's tombstone.

Any unreachable node reschedules the task; a restart resumes from the
persisted step.  Skipping steps loses safety in documented ways (the
mutation knobs below exist so tests can demonstrate exactly that).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import codec
from .core import (
    Ballot,
    CasVersion,
    EraseKey,
    EraseReply,
    Identity,
    Init,
    InvalidateAck,
    InvalidateCache,
    MinAgeAck,
    SetMinAge,
    Write,
)
from .proposer import OK, Proposer

REPLICATE_TOMBSTONE = 0
INVALIDATE_PROPOSERS = 1
RAISE_AGES = 2
ERASE_REGISTERS = 3
DONE = 4

STEP_NAMES = ("replicate", "invalidate", "raise_ages", "erase", "done")


def read_command() -> Identity:
    return Identity()


def write_command(payload: bytes) -> Write:
    return Write(payload)


def init_command(payload: bytes) -> Init:
    return Init(payload)


def cas_command(expected_version: int, payload: bytes) -> CasVersion:
    return CasVersion(expected_version, payload)


@dataclass
class GcTask:
    key: str
    tombstone_ballot: Ballot
    gc_epoch: int
    step: int
    roster: tuple[str, ...]

    def encode(self) -> bytes:
        w = codec.Writer()
        w.str_(self.key)
        codec.write_ballot(w, self.tombstone_ballot)
        w.u64(self.gc_epoch).u8(self.step)
        w.u32(len(self.roster))
        for pid in self.roster:
            w.str_(pid)
        return w.getvalue()

    @staticmethod
    def decode(data: bytes) -> "GcTask":
        r = codec.Reader(data)
        key = r.str_()
        ballot = codec.read_ballot(r)
        epoch, step = r.u64(), r.u8()
        roster = tuple(r.str_() for _ in range(r.u32()))
        return GcTask(key, ballot, epoch, step, roster)

    @property
    def control_name(self) -> str:
        return f"gc:{self.gc_epoch}:{self.key}"


@dataclass
class GcOptions:
    interval: int = 20
    #: erase immediately, skipping steps 1-3 (reproduces the stale-read anomaly).
    naive: bool = False
    #: skip step 2 (reproduces the lost-update anomaly).
    skip_invalidate: bool = False
    #: skip step 3 (reproduces the lost-delete anomaly).
    skip_age_raise: bool = False


class GcScheduler:
    """Per-key FIFO of GC tasks driven by periodic ticks.

    Only progress markers are persisted; in-flight fan-out bookkeeping is
    rebuilt by resending, which every step tolerates by being idempotent.
    """

    def __init__(self, proposer: Proposer, backend, options: GcOptions, roster_fn):
        self.proposer = proposer
        self.backend = backend
        self.options = options
        self.roster_fn = roster_fn
        self.tasks: dict[str, list[GcTask]] = {}
        self._armed = False
        self._replicating: set[str] = set()
        self._await_invalidate: dict[str, set[str]] = {}
        self._await_ages: dict[str, set[tuple[str, str]]] = {}
        self._await_erase: dict[str, set[str]] = {}
        for name, data in sorted(backend.load().control.items()):
            if name.startswith("gc:"):
                task = GcTask.decode(data)
                self.tasks.setdefault(task.key, []).append(task)

    @property
    def pending(self) -> int:
        return sum(len(queue) for queue in self.tasks.values())

    def enqueue(self, key: str, tombstone_ballot: Ballot, ctx) -> None:
        step = ERASE_REGISTERS if self.options.naive else REPLICATE_TOMBSTONE
        task = GcTask(key, tombstone_ballot, tombstone_ballot.counter, step, self.roster_fn())
        self.backend.put_control(task.control_name, task.encode())
        self.tasks.setdefault(key, []).append(task)
        self.arm(ctx)

    def arm(self, ctx) -> None:
        if not self._armed and self.tasks:
            self._armed = True
            ctx.set_timer(self.options.interval, ("gc",))

    def on_tick(self, ctx) -> None:
        self._armed = False
        for key in list(self.tasks):
            queue = self.tasks.get(key)
            if queue:
                self._attempt(queue[0], ctx)
        self.arm(ctx)

    # -- step execution ----------------------------------------------------

    def _attempt(self, task: GcTask, ctx) -> None:
        task.roster = self.roster_fn()
        if task.step == REPLICATE_TOMBSTONE:
            if task.key in self._replicating:
                return
            self._replicating.add(task.key)
            full = lambda cfg: cfg.replace(
                accept_targets=cfg.acceptors, accept_quorum=len(cfg.acceptors)
            )
            self.proposer.submit(
                task.key,
                Identity(),
                lambda outcome, cb_ctx: self._replicated(task, outcome, cb_ctx),
                ctx,
                cfg_override=full,
                allow_cache=False,
            )
        elif task.step == INVALIDATE_PROPOSERS:
            missing = self._await_invalidate.setdefault(task.key, set(task.roster))
            for pid in sorted(missing):
                if pid == self.proposer.node_id:
                    self.proposer.invalidate(task.key, task.tombstone_ballot, task.gc_epoch)
                    missing.discard(pid)
                else:
                    ctx.send(pid, InvalidateCache(task.key, task.tombstone_ballot, task.gc_epoch))
            if not missing:
                self._advance(task, ctx)
        elif task.step == RAISE_AGES:
            missing = self._await_ages.setdefault(
                task.key,
                {(a, p) for a in self.proposer.config.acceptors for p in task.roster},
            )
            for acceptor, pid in sorted(missing):
                ctx.send(acceptor, SetMinAge(pid, task.gc_epoch))
        elif task.step == ERASE_REGISTERS:
            missing = self._await_erase.setdefault(
                task.key, set(self.proposer.config.acceptors)
            )
            for acceptor in sorted(missing):
                ctx.send(acceptor, EraseKey(task.key, task.gc_epoch))

    def _replicated(self, task: GcTask, outcome, ctx) -> None:
        self._replicating.discard(task.key)
        if outcome.kind == OK:
            self._advance(task, ctx)

    def _advance(self, task: GcTask, ctx) -> None:
        step = task.step + 1
        if step == INVALIDATE_PROPOSERS and self.options.skip_invalidate:
            step += 1
        if step == RAISE_AGES and self.options.skip_age_raise:
            step += 1
        task.step = step
        self._await_invalidate.pop(task.key, None)
        self._await_ages.pop(task.key, None)
        self._await_erase.pop(task.key, None)
        if step >= DONE:
            self.backend.put_control(task.control_name, None)
            queue = self.tasks.get(task.key, [])
            if task in queue:
                queue.remove(task)
            if not queue:
                self.tasks.pop(task.key, None)
            return
        self.backend.put_control(task.control_name, task.encode())
        self._attempt(task, ctx)

    # -- fan-out acknowledgements -------------------------------------------

    def _head(self, key: str) -> GcTask | None:
        queue = self.tasks.get(key)
        return queue[0] if queue else None

    def on_invalidate_ack(self, frm: str, msg: InvalidateAck, ctx) -> None:
        task = self._head(msg.key)
        if task is None or task.step != INVALIDATE_PROPOSERS or msg.new_age != task.gc_epoch:
            return
        missing = self._await_invalidate.get(msg.key)
        if missing is None:
            return
        missing.discard(frm)
        if not missing:
            self._advance(task, ctx)

    def on_min_age_ack(self, frm: str, msg: MinAgeAck, ctx) -> None:
        for key in list(self.tasks):
            task = self._head(key)
            if task is None or task.step != RAISE_AGES or msg.age != task.gc_epoch:
                continue
            missing = self._await_ages.get(key)
            if missing is None:
                continue
            missing.discard((frm, msg.proposer_id))
            if not missing:
                self._advance(task, ctx)

    def on_erase_reply(self, frm: str, msg: EraseReply, ctx) -> None:
        task = self._head(msg.key)
        if task is None or task.step != ERASE_REGISTERS or msg.epoch != task.gc_epoch:
            return
        missing = self._await_erase.get(msg.key)
        if missing is None:
            return
        missing.discard(frm)
        if not missing:
            self._advance(task, ctx)
