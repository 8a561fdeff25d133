"""Length-prefixed TCP framing.

One framed protocol carries client, peer and admin traffic, distinguished
by the message kind.  Layout (all integers big-endian, documented
byte-exactly in docs/wire.md):

    frame  := u32 length | body          (length = len(body))
    body   := u8 version | u8 kind | u64 request_id | u64 proposer_age
              | message
    message := canonical message encoding (its first byte repeats `kind`)

Unknown protocol versions and undecodable messages produce a typed
ErrorReply on the same connection; only a corrupt length prefix kills it.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

from .. import codec
from ..core import ErrorReply, Message

PROTOCOL_VERSION = 1
MAX_FRAME = 4 << 20

_LEN = struct.Struct(">I")
_HEADER = struct.Struct(">BBQQ")


class FrameError(Exception):
    """Unrecoverable framing problem; the connection must close."""


@dataclass
class Frame:
    version: int
    kind: int
    request_id: int
    proposer_age: int
    payload: bytes

    def message(self) -> Message:
        msg = codec.decode_message(self.payload)
        if codec.message_tag(msg) != self.kind:
            raise codec.DecodeError("header kind does not match message tag")
        return msg


def encode_frame(msg: Message, request_id: int, proposer_age: int = 0) -> bytes:
    payload = codec.encode_message(msg)
    body = _HEADER.pack(PROTOCOL_VERSION, payload[0], request_id, proposer_age) + payload
    return _LEN.pack(len(body)) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Frame | None:
    """Next frame from the socket, or None on a clean EOF."""
    header = _recv_exact(sock, _LEN.size)
    if header is None:
        return None
    (length,) = _LEN.unpack(header)
    if not _HEADER.size <= length <= MAX_FRAME:
        raise FrameError(f"frame length {length} out of bounds")
    body = _recv_exact(sock, length)
    if body is None:
        raise FrameError("connection closed mid-frame")
    version, kind, request_id, age = _HEADER.unpack_from(body)
    return Frame(version, kind, request_id, age, body[_HEADER.size :])


def decode_or_error(frame: Frame) -> Message:
    """Message from a frame, or the typed ErrorReply to send back."""
    if frame.version != PROTOCOL_VERSION:
        return ErrorReply("bad-version", f"unsupported protocol version {frame.version}")
    try:
        return frame.message()
    except codec.DecodeError as exc:
        return ErrorReply("bad-message", str(exc))
