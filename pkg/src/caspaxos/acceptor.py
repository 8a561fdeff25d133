"""Acceptor state machine.

Per-key promise/accepted storage with conflict detection and per-proposer
minimum-age enforcement.  Every mutation is persisted before the reply is
emitted; a failed write produces no reply at all, which the rest of the
protocol already tolerates as message loss.

Operations on one acceptor are serialized by the hosting layer (simulator
event loop or daemon dispatcher); this class itself holds no locks.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import core, trace
from .core import (
    Accept,
    AcceptConflict,
    Accepted,
    AgeRejected,
    Ballot,
    DumpRegisters,
    EraseKey,
    EraseReply,
    LoadAck,
    LoadRegister,
    Message,
    MinAgeAck,
    Prepare,
    PrepareConflict,
    Promise,
    RegisterDump,
    SetMinAge,
    StatusReply,
    StatusRequest,
    ZERO_BALLOT,
)
from .storage import Backend, RegisterState, StorageError


@dataclass
class AcceptorMutations:
    """Deliberately seeded protocol bugs for checker calibration.

    Production code never sets these; the mutation-detection suite does.
    """

    accept_below_promise: bool = False
    volatile_promise: bool = False


class Acceptor:
    def __init__(self, node_id: str, backend: Backend, *, mutations: AcceptorMutations | None = None, trace_sink=None):
        self.node_id = node_id
        self.backend = backend
        self.mutations = mutations or AcceptorMutations()
        self.trace_sink = trace_sink
        snap = backend.load()
        self.registers: dict[str, RegisterState] = snap.registers
        self.min_ages: dict[str, int] = snap.min_ages
        self.counters: dict[str, int] = {}

    # -- helpers ----------------------------------------------------------

    def _register(self, key: str) -> RegisterState:
        state = self.registers.get(key)
        return state if state is not None else RegisterState()

    @staticmethod
    def _top_ballot(state: RegisterState) -> Ballot:
        top = state.promise or ZERO_BALLOT
        if state.accepted is not None and state.accepted[0] > top:
            top = state.accepted[0]
        return top

    def _age_rejects(self, proposer_id: str, age: int) -> int | None:
        floor = self.min_ages.get(proposer_id, 0)
        return floor if age < floor else None

    def _persist(self, key: str, state: RegisterState) -> bool:
        self.registers[key] = state
        try:
            self.backend.put_register(key, state)
        except StorageError:
            return False
        return True

    def _trace(self, **fields) -> None:
        if self.trace_sink is not None:
            self.trace_sink(node=self.node_id, **fields)

    def _count(self, name: str) -> None:
        self.counters[name] = self.counters.get(name, 0) + 1

    # -- protocol ----------------------------------------------------------

    def on_prepare(self, msg: Prepare) -> Message | None:
        self._count("prepare_recv")
        floor = self._age_rejects(msg.ballot.proposer_id, msg.proposer_age)
        if floor is not None:
            return AgeRejected(msg.key, msg.ballot, floor)
        state = self._register(msg.key)
        top = self._top_ballot(state)
        if msg.ballot <= top:
            return PrepareConflict(msg.key, msg.ballot, top)
        new_state = RegisterState(msg.ballot, state.accepted)
        if self.mutations.volatile_promise:
            self.registers[msg.key] = new_state  # deliberately unpersisted
        elif not self._persist(msg.key, new_state):
            return None
        self._trace(
            kind=trace.PROMISED,
            key=msg.key,
            ballot=msg.ballot,
            ret_ballot=state.accepted[0] if state.accepted else None,
            ret_value=state.accepted[1] if state.accepted else None,
        )
        return Promise(msg.key, msg.ballot, state.accepted)

    def on_accept(self, msg: Accept) -> Message | None:
        self._count("accept_recv")
        floor = self._age_rejects(msg.ballot.proposer_id, msg.proposer_age)
        if floor is not None:
            return AgeRejected(msg.key, msg.ballot, floor)
        state = self._register(msg.key)
        top = self._top_ballot(state)
        if msg.ballot < top and not self.mutations.accept_below_promise:
            return AcceptConflict(msg.key, msg.ballot, top)
        # The promise is consumed by the accept; a piggybacked hint installs
        # the proposer's next ballot as a fresh promise in the same write.
        next_promise = None
        if msg.next_hint is not None and msg.next_hint > msg.ballot:
            next_promise = msg.next_hint
        if not self._persist(msg.key, RegisterState(next_promise, (msg.ballot, msg.value))):
            return None
        self._trace(kind=trace.ACCEPTED, key=msg.key, ballot=msg.ballot, value=msg.value)
        return Accepted(msg.key, msg.ballot)

    # -- garbage collection ------------------------------------------------

    def on_set_min_age(self, msg: SetMinAge) -> Message | None:
        new_age = max(self.min_ages.get(msg.proposer_id, 0), msg.age)
        self.min_ages[msg.proposer_id] = new_age
        try:
            self.backend.put_min_age(msg.proposer_id, new_age)
        except StorageError:
            return None
        return MinAgeAck(msg.proposer_id, msg.age)

    def on_erase(self, msg: EraseKey) -> Message:
        state = self.registers.get(msg.key)
        if (
            state is not None
            and state.accepted is not None
            and isinstance(state.accepted[1], core.Tombstone)
            and state.accepted[1].epoch == msg.epoch
        ):
            tombstone_ballot = state.accepted[0]
            try:
                self.backend.erase_register(msg.key)
            except StorageError:
                return EraseReply(msg.key, msg.epoch, False)
            del self.registers[msg.key]
            self._trace(kind=trace.ERASED, key=msg.key, ballot=tombstone_ballot)
            return EraseReply(msg.key, msg.epoch, True)
        return EraseReply(msg.key, msg.epoch, False)

    # -- state transfer and admin -------------------------------------------

    def on_dump(self, keys: tuple[str, ...] | None = None) -> RegisterDump:
        items = tuple(
            (key, state.accepted[0], state.accepted[1])
            for key, state in sorted(self.registers.items())
            if state.accepted is not None and (keys is None or key in keys)
        )
        return RegisterDump(items)

    def on_digest(self) -> core.DigestReply:
        return core.DigestReply(
            tuple(
                (key, state.accepted[0])
                for key, state in sorted(self.registers.items())
                if state.accepted is not None
            )
        )

    def on_load(self, msg: LoadRegister) -> Message | None:
        state = self._register(msg.key)
        if state.accepted is None or state.accepted[0] < msg.ballot:
            if not self._persist(msg.key, RegisterState(state.promise, (msg.ballot, msg.value))):
                return None
            # State transfer materializes an acceptance this node missed.
            self._trace(kind=trace.ACCEPTED, key=msg.key, ballot=msg.ballot, value=msg.value)
        return LoadAck(msg.key)

    def on_status(self) -> StatusReply:
        return StatusReply(
            register_count=len(self.registers),
            min_ages=tuple(sorted(self.min_ages.items())),
            counters=tuple(sorted(self.counters.items())),
        )

    # -- dispatch ------------------------------------------------------------

    def process(self, msg: Message) -> Message | None:
        if isinstance(msg, Prepare):
            return self.on_prepare(msg)
        if isinstance(msg, Accept):
            return self.on_accept(msg)
        if isinstance(msg, SetMinAge):
            return self.on_set_min_age(msg)
        if isinstance(msg, EraseKey):
            return self.on_erase(msg)
        if isinstance(msg, DumpRegisters):
            return self.on_dump()
        if isinstance(msg, core.DumpDigest):
            return self.on_digest()
        if isinstance(msg, core.FetchRegisters):
            return self.on_dump(msg.keys)
        if isinstance(msg, LoadRegister):
            return self.on_load(msg)
        if isinstance(msg, StatusRequest):
            return self.on_status()
        return core.ErrorReply("unexpected-message", type(msg).__name__)

    # Actor interface used by the simulator.

    def handle(self, frm: str, msg: Message, ctx) -> None:
        reply = self.process(msg)
        if reply is not None:
            ctx.send(frm, reply)

    def on_timer(self, token, ctx) -> None:
        pass

    def on_start(self, ctx) -> None:
        pass
