"""Proposer-side node: client API, GC scheduler, membership admin.

One dispatch surface shared verbatim by the simulated network and the
real daemons; only the context (transport, timers, storage) differs.
"""

from __future__ import annotations

from . import codec, core
from .core import (
    ClientChange,
    ClientDelete,
    ClientReply,
    ConfigAck,
    ConfigUpdate,
    Configuration,
    ErrorReply,
    Identity,
    InvalidateAck,
    InvalidateCache,
    Message,
    RescanReport,
    RescanRequest,
    RosterAck,
    RosterUpdate,
    StatusReply,
    StatusRequest,
)
from .kvstore import GcOptions, GcScheduler
from .proposer import ACCEPT_CONFLICT, OK, PREPARE_CONFLICT, ChangeOutcome, Proposer

_CONTROL_ROSTER = "proposer_roster"


class _Rescan:
    __slots__ = ("requester", "keys", "next_index", "in_flight", "moves", "unfinished", "retries")

    def __init__(self, requester: str, keys: tuple[str, ...]):
        self.requester = requester
        self.keys = list(keys)
        self.next_index = 0
        self.in_flight = 0
        self.moves = 0
        self.unfinished: list[str] = []
        self.retries: dict[str, int] = {}


class ProposerNode:
    def __init__(
        self,
        node_id: str,
        config: Configuration,
        backend,
        *,
        one_rtt: bool = False,
        phase_timeout: int = 50,
        proposer_roster: tuple[str, ...] = (),
        gc_options: GcOptions | None = None,
        mutations=None,
        trace_sink=None,
        rescan_batch: int = 1,
        rescan_retries: int = 8,
    ):
        self.node_id = node_id
        self.backend = backend
        self.proposer = Proposer(
            node_id,
            config,
            backend,
            one_rtt=one_rtt,
            phase_timeout=phase_timeout,
            mutations=mutations,
            trace_sink=trace_sink,
        )
        self.roster = tuple(sorted(proposer_roster or (node_id,)))
        snap = backend.load()
        if _CONTROL_ROSTER in snap.control:
            r = codec.Reader(snap.control[_CONTROL_ROSTER])
            self.roster = tuple(r.str_() for _ in range(r.u32()))
        self.gc = GcScheduler(self.proposer, backend, gc_options or GcOptions(), lambda: self.roster)
        self.rescan_batch = max(1, rescan_batch)
        self.rescan_retries = rescan_retries
        self._rescan: _Rescan | None = None

    # -- client operations ---------------------------------------------------

    @staticmethod
    def _client_reply(op_id: int, outcome: ChangeOutcome) -> ClientReply:
        return ClientReply(op_id, outcome.kind, outcome.value, outcome.seen)

    def _submit_client(self, frm: str, msg: ClientChange, ctx) -> None:
        def done(outcome: ChangeOutcome, cb_ctx) -> None:
            cb_ctx.send(frm, self._client_reply(msg.op_id, outcome))

        self.proposer.submit(msg.key, msg.command, done, ctx)

    def _submit_delete(self, frm: str, msg: ClientDelete, ctx) -> None:
        def done(outcome: ChangeOutcome, cb_ctx) -> None:
            if outcome.kind == OK:
                # Durably schedule collection before confirming the delete.
                self.gc.enqueue(msg.key, outcome.ballot, cb_ctx)
            cb_ctx.send(frm, self._client_reply(msg.op_id, outcome))

        self.proposer.submit(msg.key, None, done, ctx, is_delete=True)

    # -- rescan ----------------------------------------------------------------

    def _start_rescan(self, frm: str, msg: RescanRequest, ctx) -> None:
        if self._rescan is not None:
            ctx.send(frm, ErrorReply("rescan-busy", "a rescan is already running"))
            return
        self._rescan = _Rescan(frm, msg.keys)
        self._pump_rescan(ctx)

    def _pump_rescan(self, ctx) -> None:
        scan = self._rescan
        if scan is None:
            return
        while scan.in_flight < self.rescan_batch and scan.next_index < len(scan.keys):
            key = scan.keys[scan.next_index]
            scan.next_index += 1
            self._rescan_key(key, ctx)
        if scan.in_flight == 0 and scan.next_index >= len(scan.keys):
            self._rescan = None
            ctx.send(scan.requester, RescanReport(scan.moves, tuple(scan.unfinished)))

    def _rescan_key(self, key: str, ctx) -> None:
        scan = self._rescan
        scan.in_flight += 1

        def done(outcome: ChangeOutcome, cb_ctx) -> None:
            scan.in_flight -= 1
            if outcome.kind == OK:
                scan.moves += outcome.moves
            else:
                attempts = scan.retries.get(key, 0) + 1
                scan.retries[key] = attempts
                if attempts <= self.rescan_retries:
                    self._rescan_key(key, cb_ctx)
                    return
                scan.unfinished.append(key)
            self._pump_rescan(cb_ctx)

        self.proposer.submit(key, Identity(), done, ctx, allow_cache=False)

    # -- admin -------------------------------------------------------------------

    def _set_roster(self, roster: tuple[str, ...]) -> None:
        self.roster = tuple(sorted(roster))
        w = codec.Writer()
        w.u32(len(self.roster))
        for pid in self.roster:
            w.str_(pid)
        self.backend.put_control(_CONTROL_ROSTER, w.getvalue())

    def _status(self) -> StatusReply:
        counters = dict(self.proposer.counters)
        counters["cache_entries"] = len(self.proposer.cache)
        counters["gc_pending"] = self.gc.pending
        counters["age"] = self.proposer.age
        return StatusReply(0, (), tuple(sorted(counters.items())))

    # -- dispatch -------------------------------------------------------------------

    def handle(self, frm: str, msg: Message, ctx) -> None:
        if self.proposer.handle_message(frm, msg, ctx):
            return
        if isinstance(msg, ClientChange):
            self._submit_client(frm, msg, ctx)
        elif isinstance(msg, ClientDelete):
            self._submit_delete(frm, msg, ctx)
        elif isinstance(msg, InvalidateCache):
            self.proposer.invalidate(msg.key, msg.tombstone_ballot, msg.new_age)
            ctx.send(frm, InvalidateAck(msg.key, msg.new_age))
        elif isinstance(msg, core.InvalidateAck):
            self.gc.on_invalidate_ack(frm, msg, ctx)
        elif isinstance(msg, core.MinAgeAck):
            self.gc.on_min_age_ack(frm, msg, ctx)
        elif isinstance(msg, core.EraseReply):
            self.gc.on_erase_reply(frm, msg, ctx)
        elif isinstance(msg, ConfigUpdate):
            try:
                self.proposer.update_config(msg)
            except core.ConfigError as exc:
                ctx.send(frm, ErrorReply("bad-config", str(exc)))
                return
            ctx.send(frm, ConfigAck())
        elif isinstance(msg, RosterUpdate):
            self._set_roster(msg.proposers)
            ctx.send(frm, RosterAck())
        elif isinstance(msg, RescanRequest):
            self._start_rescan(frm, msg, ctx)
        elif isinstance(msg, StatusRequest):
            ctx.send(frm, self._status())
        elif isinstance(msg, ClientReply):
            pass  # stray reply after a client-side timeout
        else:
            ctx.send(frm, ErrorReply("unexpected-message", type(msg).__name__))

    def on_timer(self, token, ctx) -> None:
        if isinstance(token, tuple) and token and token[0] == "gc":
            self.gc.on_tick(ctx)
            return
        self.proposer.on_timer(token, ctx)

    def on_start(self, ctx) -> None:
        self.gc.arm(ctx)
