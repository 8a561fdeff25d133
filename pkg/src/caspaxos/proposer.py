"""Proposer state machine.

Orchestrates the two-phase change round: mint a ballot, gather a prepare
quorum of promises, apply the change function to the value carried by the
highest-ballot promise, then gather an accept quorum of confirmations.
Conflicts fast-forward the counter and surface to the caller; there is no
silent retry inside a round.

With the one-round-trip mode enabled, each accept piggybacks the next
ballot as a hint, pre-authorizing this proposer's next round for the key
so steady same-key traffic skips its prepare phase entirely.  A stale
cache shows up as an ordinary accept conflict and falls back to the full
round, never as a wrong result.

Changes for the same key on one proposer are serialized (keeps the cache
coherent); different keys proceed independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import codec, trace
from .core import (
    Accept,
    AcceptConflict,
    Accepted,
    AgeRejected,
    Ballot,
    Command,
    Configuration,
    ConfigUpdate,
    EMPTY,
    Message,
    Prepare,
    PrepareConflict,
    Promise,
    Value,
    WriteTombstone,
    ZERO_BALLOT,
    apply_change,
    ballot_next,
)
from .storage import Backend, StorageError

OK = "ok"
PREPARE_CONFLICT = "prepare_conflict"
ACCEPT_CONFLICT = "accept_conflict"
UNAVAILABLE = "unavailable"


@dataclass
class ProposerMutations:
    """Deliberately seeded protocol bugs for checker calibration."""

    sub_quorum_ack: bool = False
    pick_lowest_ballot: bool = False


@dataclass
class ChangeOutcome:
    kind: str
    value: Value | None = None
    seen: Ballot | None = None
    ballot: Ballot | None = None
    #: value-payload transfers this round cost (prepare quorum + accept quorum).
    moves: int = 0


@dataclass
class _CacheEntry:
    next_ballot: Ballot  # pre-promised by the piggybacked hint
    value_ballot: Ballot  # ballot at which `value` was accepted
    value: Value


@dataclass
class _Submission:
    key: str
    command: Command | None
    reply: object  # callable(ChangeOutcome, ctx)
    is_delete: bool = False
    cfg_override: object = None  # callable(Configuration) -> Configuration
    allow_cache: bool = True


class _Round:
    __slots__ = (
        "sub",
        "cfg",
        "ballot",
        "phase",
        "promises",
        "accepts",
        "command_used",
        "new_value",
        "parent",
        "hint",
        "via_cache",
        "done",
    )

    def __init__(self, sub: _Submission, cfg: Configuration, ballot: Ballot, via_cache: bool):
        self.sub = sub
        self.cfg = cfg
        self.ballot = ballot
        self.phase = "prepare"
        self.promises: dict[str, tuple[Ballot, Value] | None] = {}
        self.accepts: set[str] = set()
        self.command_used: Command | None = None
        self.new_value: Value | None = None
        self.parent: Ballot | None = None
        self.hint: Ballot | None = None
        self.via_cache = via_cache
        self.done = False


_CONTROL_STATE = "proposer"
_CONTROL_CONFIG = "config"


class Proposer:
    def __init__(
        self,
        node_id: str,
        config: Configuration,
        backend: Backend,
        *,
        one_rtt: bool = False,
        phase_timeout: int = 50,
        mutations: ProposerMutations | None = None,
        trace_sink=None,
    ):
        config.validate()
        self.node_id = node_id
        self.backend = backend
        self.one_rtt = one_rtt
        self.phase_timeout = phase_timeout
        self.mutations = mutations or ProposerMutations()
        self.trace_sink = trace_sink
        self.cache: dict[str, _CacheEntry] = {}
        self.counters: dict[str, int] = {}
        self._rounds: dict[tuple[str, Ballot], _Round] = {}
        self._active: dict[str, _Round] = {}
        self._waiting: dict[str, list[_Submission]] = {}
        snap = backend.load()
        self._counter = 0
        self.age = 0
        if _CONTROL_STATE in snap.control:
            r = codec.Reader(snap.control[_CONTROL_STATE])
            self._counter, self.age = r.u64(), r.u64()
        self.config = config
        if _CONTROL_CONFIG in snap.control:
            update = codec.decode_message(snap.control[_CONTROL_CONFIG])
            self.config = update.apply_to(config)

    # -- durable counter/age/config --------------------------------------

    def _sync_state(self) -> None:
        w = codec.Writer()
        w.u64(self._counter).u64(self.age)
        self.backend.put_control(_CONTROL_STATE, w.getvalue())

    @property
    def counter(self) -> int:
        return self._counter

    def next_ballot(self) -> Ballot:
        ballot = ballot_next(self._counter, ZERO_BALLOT, self.node_id)
        self._counter = ballot.counter
        self._sync_state()
        return ballot

    def observe(self, seen: Ballot) -> None:
        if seen.counter > self._counter:
            self._counter = seen.counter
            self._sync_state()

    def update_config(self, update: ConfigUpdate) -> Configuration:
        new_cfg = update.apply_to(self.config)
        new_cfg.validate()
        self.config = new_cfg
        full = ConfigUpdate(
            new_cfg.acceptors,
            new_cfg.prepare_targets,
            new_cfg.accept_targets,
            new_cfg.prepare_quorum,
            new_cfg.accept_quorum,
        )
        self.backend.put_control(_CONTROL_CONFIG, codec.encode_message(full))
        return new_cfg

    def invalidate(self, key: str, tombstone_ballot: Ballot, new_age: int) -> None:
        """Cache drop + counter fast-forward + age bump, idempotently.

        After this, any ballot the proposer mints outranks the tombstone, so
        a write racing the deletion can never be shadowed by it.
        """
        self.cache.pop(key, None)
        floor = tombstone_ballot.counter + 1
        if floor > self._counter:
            self._counter = floor
        if new_age > self.age:
            self.age = new_age
        self._sync_state()

    def refresh_age(self, min_age: int) -> None:
        if min_age > self.age:
            self.age = min_age
            self._sync_state()

    # -- submission and scheduling ----------------------------------------

    def submit(
        self,
        key: str,
        command: Command | None,
        reply,
        ctx,
        *,
        is_delete: bool = False,
        cfg_override=None,
        allow_cache: bool = True,
    ) -> None:
        sub = _Submission(key, command, reply, is_delete, cfg_override, allow_cache)
        if key in self._active:
            self._waiting.setdefault(key, []).append(sub)
            return
        self._start(sub, ctx)

    def _start(self, sub: _Submission, ctx) -> None:
        cfg = self.config if sub.cfg_override is None else sub.cfg_override(self.config)
        entry = self.cache.get(sub.key) if (self.one_rtt and sub.allow_cache) else None
        try:
            if entry is not None:
                rnd = _Round(sub, cfg, entry.next_ballot, via_cache=True)
                self._register_round(rnd)
                self._begin_accept(rnd, entry.value, entry.value_ballot, ctx)
            else:
                rnd = _Round(sub, cfg, self.next_ballot(), via_cache=False)
                self._register_round(rnd)
                self._send_prepares(rnd, ctx)
        except StorageError:
            sub.reply(ChangeOutcome(UNAVAILABLE), ctx)

    def _register_round(self, rnd: _Round) -> None:
        self._active[rnd.sub.key] = rnd
        self._rounds[(rnd.sub.key, rnd.ballot)] = rnd

    def _send_prepares(self, rnd: _Round, ctx) -> None:
        msg = Prepare(rnd.sub.key, rnd.ballot, self.age)
        for target in rnd.cfg.prepare_targets:
            self._count("prepare_sent")
            ctx.send(target, msg)
        ctx.set_timer(self.phase_timeout, ("phase", rnd.sub.key, rnd.ballot))

    def _begin_accept(self, rnd: _Round, current: Value, parent: Ballot | None, ctx) -> None:
        command = rnd.sub.command
        if rnd.sub.is_delete:
            # The tombstone's epoch is the ballot counter of the round that
            # writes it, making the GC's final erase guard exact.
            command = WriteTombstone(rnd.ballot.counter)
        rnd.command_used = command
        rnd.new_value = apply_change(command, current)
        rnd.parent = parent
        rnd.phase = "accept"
        rnd.hint = self.next_ballot() if self.one_rtt else None
        self._trace(
            kind=trace.ACCEPT_SENT,
            key=rnd.sub.key,
            ballot=rnd.ballot,
            value=rnd.new_value,
            parent=parent,
            via_cache=rnd.via_cache,
        )
        msg = Accept(rnd.sub.key, rnd.ballot, rnd.new_value, rnd.hint, self.age)
        for target in rnd.cfg.accept_targets:
            self._count("accept_sent")
            ctx.send(target, msg)
        ctx.set_timer(self.phase_timeout, ("phase", rnd.sub.key, rnd.ballot))

    def _finish(self, rnd: _Round, outcome: ChangeOutcome, ctx) -> None:
        rnd.done = True
        self._rounds.pop((rnd.sub.key, rnd.ballot), None)
        self._active.pop(rnd.sub.key, None)
        rnd.sub.reply(outcome, ctx)
        queue = self._waiting.get(rnd.sub.key)
        if queue:
            nxt = queue.pop(0)
            if not queue:
                del self._waiting[rnd.sub.key]
            self._start(nxt, ctx)

    def _restart_without_cache(self, rnd: _Round, ctx) -> None:
        """1RTT fallback: drop the cache entry and rerun as a full round."""
        self.cache.pop(rnd.sub.key, None)
        self._rounds.pop((rnd.sub.key, rnd.ballot), None)
        try:
            fresh = _Round(rnd.sub, rnd.cfg, self.next_ballot(), via_cache=False)
        except StorageError:
            self._active.pop(rnd.sub.key, None)
            rnd.sub.reply(ChangeOutcome(UNAVAILABLE), ctx)
            return
        self._register_round(fresh)
        self._send_prepares(fresh, ctx)

    # -- reply handling ------------------------------------------------------

    def handle_message(self, frm: str, msg: Message, ctx) -> bool:
        if isinstance(msg, Promise):
            self._on_promise(frm, msg, ctx)
        elif isinstance(msg, Accepted):
            self._on_accepted(frm, msg, ctx)
        elif isinstance(msg, PrepareConflict):
            self._on_conflict(msg, "prepare", PREPARE_CONFLICT, ctx)
        elif isinstance(msg, AcceptConflict):
            self._on_conflict(msg, "accept", ACCEPT_CONFLICT, ctx)
        elif isinstance(msg, AgeRejected):
            self._on_age_rejected(msg, ctx)
        else:
            return False
        return True

    def _on_promise(self, frm: str, msg: Promise, ctx) -> None:
        rnd = self._rounds.get((msg.key, msg.ballot))
        if rnd is None or rnd.done or rnd.phase != "prepare":
            return
        if frm in rnd.promises:
            return
        rnd.promises[frm] = msg.accepted
        if len(rnd.promises) < rnd.cfg.prepare_quorum:
            return
        carried = [acc for acc in rnd.promises.values() if acc is not None]
        if carried:
            choose = min if self.mutations.pick_lowest_ballot else max
            pick = choose(carried, key=lambda acc: acc[0])
            parent, current = pick[0], pick[1]
        else:
            parent, current = None, EMPTY
        self._begin_accept(rnd, current, parent, ctx)

    def _on_accepted(self, frm: str, msg: Accepted, ctx) -> None:
        rnd = self._rounds.get((msg.key, msg.ballot))
        if rnd is None or rnd.done or rnd.phase != "accept":
            return
        rnd.accepts.add(frm)
        need = rnd.cfg.accept_quorum
        if self.mutations.sub_quorum_ack:
            need = max(1, need - 1)
        if len(rnd.accepts) < need:
            return
        if rnd.hint is not None:
            self.cache[rnd.sub.key] = _CacheEntry(rnd.hint, rnd.ballot, rnd.new_value)
        self._trace(
            kind=trace.ACKNOWLEDGED,
            key=rnd.sub.key,
            ballot=rnd.ballot,
            value=rnd.new_value,
        )
        self._count("rounds_ok")
        moves = rnd.cfg.prepare_quorum + rnd.cfg.accept_quorum
        self._finish(
            rnd,
            ChangeOutcome(OK, value=rnd.new_value, ballot=rnd.ballot, moves=moves),
            ctx,
        )

    def _on_conflict(self, msg, phase: str, kind: str, ctx) -> None:
        rnd = self._rounds.get((msg.key, msg.ballot))
        self.observe(msg.seen)
        if rnd is None or rnd.done:
            return
        if rnd.phase != phase:
            # A duplicated prepare produced a stale conflict after the round
            # already reached its accept phase; the accepts may still commit.
            return
        if rnd.via_cache:
            self._restart_without_cache(rnd, ctx)
            return
        self._count("conflicts")
        self._finish(rnd, ChangeOutcome(kind, seen=msg.seen), ctx)

    def _on_age_rejected(self, msg: AgeRejected, ctx) -> None:
        self.refresh_age(msg.min_age)
        self.cache.pop(msg.key, None)
        rnd = self._rounds.get((msg.key, msg.ballot))
        if rnd is None or rnd.done:
            return
        if rnd.via_cache:
            self._restart_without_cache(rnd, ctx)
            return
        kind = PREPARE_CONFLICT if rnd.phase == "prepare" else ACCEPT_CONFLICT
        self._finish(rnd, ChangeOutcome(kind), ctx)

    def on_timer(self, token, ctx) -> bool:
        if not (isinstance(token, tuple) and token and token[0] == "phase"):
            return False
        _, key, ballot = token
        rnd = self._rounds.get((key, ballot))
        if rnd is not None and not rnd.done:
            # Unknown outcome: the change may still commit on a quorum we
            # never heard from.  Drop the cache entry so the next round does
            # not build on an unconfirmed hint.
            self.cache.pop(key, None)
            self._count("timeouts")
            self._finish(rnd, ChangeOutcome(UNAVAILABLE), ctx)
        return True

    # -- misc ------------------------------------------------------------------

    def _count(self, name: str) -> None:
        self.counters[name] = self.counters.get(name, 0) + 1

    def _trace(self, **fields) -> None:
        if self.trace_sink is not None:
            self.trace_sink(node=self.node_id, **fields)
