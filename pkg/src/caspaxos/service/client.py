"""Synchronous client library for the framed protocol.

One connection, one outstanding request at a time; replies are matched by
the echoed request id.  Works against proposer daemons (client API and
admin) and acceptor daemons (admin/introspection).
"""

from __future__ import annotations

import itertools
import socket

from .. import core
from ..core import CasVersion, Identity, Init, Message, Write
from . import frames


class ClientError(Exception):
    pass


class Unavailable(ClientError):
    pass


class Conflict(ClientError):
    def __init__(self, kind: str):
        super().__init__(kind)
        self.kind = kind


class Connection:
    def __init__(self, address: str, *, timeout: float = 10.0):
        host, port = address.rsplit(":", 1)
        self._sock = socket.create_connection((host, int(port)), timeout=timeout)
        self._sock.settimeout(timeout)
        self._ids = itertools.count(1)
        self._ops = itertools.count(1)

    def close(self) -> None:
        self._sock.close()

    def __enter__(self) -> "Connection":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def call(self, msg: Message) -> Message:
        request_id = next(self._ids)
        try:
            self._sock.sendall(frames.encode_frame(msg, request_id))
            while True:
                frame = frames.read_frame(self._sock)
                if frame is None:
                    raise Unavailable("connection closed")
                if frame.request_id == request_id:
                    return frame.message()
        except (OSError, frames.FrameError) as exc:
            raise Unavailable(str(exc)) from exc

    # -- key-value API -------------------------------------------------------

    def _change(self, key: str, command) -> core.ClientReply:
        reply = self.call(core.ClientChange(next(self._ops), key, command))
        return self._expect_reply(reply)

    @staticmethod
    def _expect_reply(reply: Message) -> core.ClientReply:
        if isinstance(reply, core.ErrorReply):
            raise ClientError(f"{reply.code}: {reply.detail}")
        if not isinstance(reply, core.ClientReply):
            raise ClientError(f"unexpected reply {type(reply).__name__}")
        if reply.kind == "unavailable":
            raise Unavailable("quorum not reached before timeout")
        if reply.kind in ("prepare_conflict", "accept_conflict"):
            raise Conflict(reply.kind)
        return reply

    def get(self, key: str) -> tuple[int, bytes] | None:
        """(version, payload) or None when the register is empty/deleted."""
        reply = self._change(key, Identity())
        return core.unpack_versioned(reply.value)

    def set(self, key: str, payload: bytes) -> tuple[int, bytes]:
        reply = self._change(key, Write(payload))
        return core.unpack_versioned(reply.value)

    def init(self, key: str, payload: bytes) -> tuple[int, bytes]:
        reply = self._change(key, Init(payload))
        return core.unpack_versioned(reply.value)

    def cas(self, key: str, expected_version: int, payload: bytes) -> tuple[bool, tuple | None]:
        """(matched, (version, payload) after the change)."""
        reply = self._change(key, CasVersion(expected_version, payload))
        after = core.unpack_versioned(reply.value)
        matched = after is not None and after == (expected_version + 1, payload)
        return matched, after

    def delete(self, key: str) -> None:
        reply = self.call(core.ClientDelete(next(self._ops), key))
        self._expect_reply(reply)

    # -- admin ------------------------------------------------------------------

    def status(self) -> core.StatusReply:
        reply = self.call(core.StatusRequest())
        if not isinstance(reply, core.StatusReply):
            raise ClientError(f"unexpected reply {type(reply).__name__}")
        return reply

    def config_update(self, update: core.ConfigUpdate) -> None:
        reply = self.call(update)
        if isinstance(reply, core.ErrorReply):
            raise ClientError(f"{reply.code}: {reply.detail}")
        if not isinstance(reply, core.ConfigAck):
            raise ClientError(f"unexpected reply {type(reply).__name__}")

    def rescan(self, keys: tuple[str, ...]) -> core.RescanReport:
        reply = self.call(core.RescanRequest(keys))
        if not isinstance(reply, core.RescanReport):
            raise ClientError(f"unexpected reply {type(reply).__name__}")
        return reply

    def update_roster(self, proposers: tuple[str, ...]) -> None:
        reply = self.call(core.RosterUpdate(proposers))
        if not isinstance(reply, core.RosterAck):
            raise ClientError(f"unexpected reply {type(reply).__name__}")

    def dump_registers(self) -> core.RegisterDump:
        reply = self.call(core.DumpRegisters())
        if not isinstance(reply, core.RegisterDump):
            raise ClientError(f"unexpected reply {type(reply).__name__}")
        return reply
