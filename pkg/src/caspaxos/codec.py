"""Canonical binary encoding.

One encoding serves both the TCP wire protocol and the acceptors' durable
journals, so there is exactly one codec to test.  All integers are
big-endian and fixed-width; byte strings are length-prefixed; optional
fields carry a one-byte presence flag.  Field order is the declaration
order of the dataclasses in :mod:`caspaxos.core`.  The layout is written
out byte-by-byte in docs/wire.md.
"""

from __future__ import annotations

import struct

from . import core
from .core import Ballot, Command, Message, ProtocolError, Value


class DecodeError(ProtocolError):
    """Input bytes do not form a valid encoding."""


_U8 = struct.Struct(">B")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self._parts.append(_U8.pack(v))
        return self

    def u32(self, v: int) -> "Writer":
        self._parts.append(_U32.pack(v))
        return self

    def u64(self, v: int) -> "Writer":
        self._parts.append(_U64.pack(v))
        return self

    def raw(self, b: bytes) -> "Writer":
        self._parts.append(b)
        return self

    def bytes_(self, b: bytes) -> "Writer":
        return self.u32(len(b)).raw(b)

    def str_(self, s: str) -> "Writer":
        return self.bytes_(s.encode("utf-8"))

    def bool_(self, v: bool) -> "Writer":
        return self.u8(1 if v else 0)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes, offset: int = 0) -> None:
        self._data = data
        self._off = offset

    def _take(self, n: int) -> bytes:
        end = self._off + n
        if end > len(self._data):
            raise DecodeError("truncated input")
        chunk = self._data[self._off : end]
        self._off = end
        return chunk

    def u8(self) -> int:
        return _U8.unpack(self._take(1))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def bytes_(self) -> bytes:
        return self._take(self.u32())

    def str_(self) -> str:
        try:
            return self.bytes_().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"bad utf-8 string: {exc}") from exc

    def bool_(self) -> bool:
        flag = self.u8()
        if flag not in (0, 1):
            raise DecodeError(f"bad bool byte {flag}")
        return flag == 1

    def expect_end(self) -> None:
        if self._off != len(self._data):
            raise DecodeError(f"{len(self._data) - self._off} trailing bytes")


# ---------------------------------------------------------------------------
# Ballots, values, commands


def write_ballot(w: Writer, b: Ballot) -> None:
    w.u64(b.counter).str_(b.proposer_id)


def read_ballot(r: Reader) -> Ballot:
    return Ballot(r.u64(), r.str_())


def write_opt_ballot(w: Writer, b: Ballot | None) -> None:
    w.bool_(b is not None)
    if b is not None:
        write_ballot(w, b)


def read_opt_ballot(r: Reader) -> Ballot | None:
    return read_ballot(r) if r.bool_() else None


_VALUE_EMPTY, _VALUE_TOMBSTONE, _VALUE_DATA = 0, 1, 2


def write_value(w: Writer, v: Value) -> None:
    if isinstance(v, core.Empty):
        w.u8(_VALUE_EMPTY)
    elif isinstance(v, core.Tombstone):
        w.u8(_VALUE_TOMBSTONE).u64(v.epoch)
    elif isinstance(v, core.Data):
        w.u8(_VALUE_DATA).bytes_(v.payload)
    else:
        raise DecodeError(f"unencodable value {v!r}")


def read_value(r: Reader) -> Value:
    tag = r.u8()
    if tag == _VALUE_EMPTY:
        return core.EMPTY
    if tag == _VALUE_TOMBSTONE:
        return core.Tombstone(r.u64())
    if tag == _VALUE_DATA:
        return core.Data(r.bytes_())
    raise DecodeError(f"unknown value tag {tag}")


def write_opt_accepted(w: Writer, accepted: tuple[Ballot, Value] | None) -> None:
    w.bool_(accepted is not None)
    if accepted is not None:
        write_ballot(w, accepted[0])
        write_value(w, accepted[1])


def read_opt_accepted(r: Reader) -> tuple[Ballot, Value] | None:
    if not r.bool_():
        return None
    return read_ballot(r), read_value(r)


_CMD_IDENTITY, _CMD_INIT, _CMD_WRITE, _CMD_CAS, _CMD_TOMBSTONE = 0, 1, 2, 3, 4


def write_command(w: Writer, c: Command) -> None:
    if isinstance(c, core.Identity):
        w.u8(_CMD_IDENTITY)
    elif isinstance(c, core.Init):
        w.u8(_CMD_INIT).bytes_(c.payload)
    elif isinstance(c, core.Write):
        w.u8(_CMD_WRITE).bytes_(c.payload)
    elif isinstance(c, core.CasVersion):
        w.u8(_CMD_CAS).u64(c.expected_version).bytes_(c.payload)
    elif isinstance(c, core.WriteTombstone):
        w.u8(_CMD_TOMBSTONE).u64(c.epoch)
    else:
        raise DecodeError(f"unencodable command {c!r}")


def read_command(r: Reader) -> Command:
    tag = r.u8()
    if tag == _CMD_IDENTITY:
        return core.Identity()
    if tag == _CMD_INIT:
        return core.Init(r.bytes_())
    if tag == _CMD_WRITE:
        return core.Write(r.bytes_())
    if tag == _CMD_CAS:
        return core.CasVersion(r.u64(), r.bytes_())
    if tag == _CMD_TOMBSTONE:
        return core.WriteTombstone(r.u64())
    raise DecodeError(f"unknown command tag {tag}")


def _write_str_tuple(w: Writer, items: tuple[str, ...]) -> None:
    w.u32(len(items))
    for item in items:
        w.str_(item)


def _read_str_tuple(r: Reader) -> tuple[str, ...]:
    return tuple(r.str_() for _ in range(r.u32()))


def _write_opt_str_tuple(w: Writer, items: tuple[str, ...] | None) -> None:
    w.bool_(items is not None)
    if items is not None:
        _write_str_tuple(w, items)


def _read_opt_str_tuple(r: Reader) -> tuple[str, ...] | None:
    return _read_str_tuple(r) if r.bool_() else None


def _write_opt_u64(w: Writer, v: int | None) -> None:
    w.bool_(v is not None)
    if v is not None:
        w.u64(v)


def _read_opt_u64(r: Reader) -> int | None:
    return r.u64() if r.bool_() else None


# ---------------------------------------------------------------------------
# Messages
#
# Each variant has a stable one-byte tag followed by its fields in
# declaration order.  Tags are append-only; never renumber.

_ENCODERS = {}
_DECODERS = {}
_TAGS = {}


def _variant(tag: int, cls):
    def register(encode, decode):
        _TAGS[cls] = tag
        _ENCODERS[cls] = encode
        _DECODERS[tag] = (cls, decode)

    return register


_variant(0x01, core.Prepare)(
    lambda w, m: (w.str_(m.key), write_ballot(w, m.ballot), w.u64(m.proposer_age)),
    lambda r: core.Prepare(r.str_(), read_ballot(r), r.u64()),
)
_variant(0x02, core.Promise)(
    lambda w, m: (w.str_(m.key), write_ballot(w, m.ballot), write_opt_accepted(w, m.accepted)),
    lambda r: core.Promise(r.str_(), read_ballot(r), read_opt_accepted(r)),
)
_variant(0x03, core.PrepareConflict)(
    lambda w, m: (w.str_(m.key), write_ballot(w, m.ballot), write_ballot(w, m.seen)),
    lambda r: core.PrepareConflict(r.str_(), read_ballot(r), read_ballot(r)),
)
_variant(0x04, core.Accept)(
    lambda w, m: (
        w.str_(m.key),
        write_ballot(w, m.ballot),
        write_value(w, m.value),
        write_opt_ballot(w, m.next_hint),
        w.u64(m.proposer_age),
    ),
    lambda r: core.Accept(r.str_(), read_ballot(r), read_value(r), read_opt_ballot(r), r.u64()),
)
_variant(0x05, core.Accepted)(
    lambda w, m: (w.str_(m.key), write_ballot(w, m.ballot)),
    lambda r: core.Accepted(r.str_(), read_ballot(r)),
)
_variant(0x06, core.AcceptConflict)(
    lambda w, m: (w.str_(m.key), write_ballot(w, m.ballot), write_ballot(w, m.seen)),
    lambda r: core.AcceptConflict(r.str_(), read_ballot(r), read_ballot(r)),
)
_variant(0x07, core.AgeRejected)(
    lambda w, m: (w.str_(m.key), write_ballot(w, m.ballot), w.u64(m.min_age)),
    lambda r: core.AgeRejected(r.str_(), read_ballot(r), r.u64()),
)
_variant(0x10, core.SetMinAge)(
    lambda w, m: (w.str_(m.proposer_id), w.u64(m.age)),
    lambda r: core.SetMinAge(r.str_(), r.u64()),
)
_variant(0x11, core.MinAgeAck)(
    lambda w, m: (w.str_(m.proposer_id), w.u64(m.age)),
    lambda r: core.MinAgeAck(r.str_(), r.u64()),
)
_variant(0x12, core.EraseKey)(
    lambda w, m: (w.str_(m.key), w.u64(m.epoch)),
    lambda r: core.EraseKey(r.str_(), r.u64()),
)
_variant(0x13, core.EraseReply)(
    lambda w, m: (w.str_(m.key), w.u64(m.epoch), w.bool_(m.erased)),
    lambda r: core.EraseReply(r.str_(), r.u64(), r.bool_()),
)
_variant(0x14, core.InvalidateCache)(
    lambda w, m: (w.str_(m.key), write_ballot(w, m.tombstone_ballot), w.u64(m.new_age)),
    lambda r: core.InvalidateCache(r.str_(), read_ballot(r), r.u64()),
)
_variant(0x15, core.InvalidateAck)(
    lambda w, m: (w.str_(m.key), w.u64(m.new_age)),
    lambda r: core.InvalidateAck(r.str_(), r.u64()),
)
_variant(0x20, core.ConfigUpdate)(
    lambda w, m: (
        _write_opt_str_tuple(w, m.acceptors),
        _write_opt_str_tuple(w, m.prepare_targets),
        _write_opt_str_tuple(w, m.accept_targets),
        _write_opt_u64(w, m.prepare_quorum),
        _write_opt_u64(w, m.accept_quorum),
    ),
    lambda r: core.ConfigUpdate(
        _read_opt_str_tuple(r),
        _read_opt_str_tuple(r),
        _read_opt_str_tuple(r),
        _read_opt_u64(r),
        _read_opt_u64(r),
    ),
)
_variant(0x21, core.ConfigAck)(lambda w, m: None, lambda r: core.ConfigAck())
_variant(0x22, core.RosterUpdate)(
    lambda w, m: _write_str_tuple(w, m.proposers),
    lambda r: core.RosterUpdate(_read_str_tuple(r)),
)
_variant(0x23, core.RosterAck)(lambda w, m: None, lambda r: core.RosterAck())
_variant(0x24, core.RescanRequest)(
    lambda w, m: _write_str_tuple(w, m.keys),
    lambda r: core.RescanRequest(_read_str_tuple(r)),
)
_variant(0x25, core.RescanReport)(
    lambda w, m: (w.u64(m.record_moves), _write_str_tuple(w, m.unfinished)),
    lambda r: core.RescanReport(r.u64(), _read_str_tuple(r)),
)
_variant(0x26, core.DumpRegisters)(lambda w, m: None, lambda r: core.DumpRegisters())


def _write_dump(w: Writer, m: core.RegisterDump) -> None:
    w.u32(len(m.items))
    for key, ballot, value in m.items:
        w.str_(key)
        write_ballot(w, ballot)
        write_value(w, value)


def _read_dump(r: Reader) -> core.RegisterDump:
    return core.RegisterDump(
        tuple((r.str_(), read_ballot(r), read_value(r)) for _ in range(r.u32()))
    )


_variant(0x27, core.RegisterDump)(_write_dump, _read_dump)
_variant(0x2C, core.DumpDigest)(lambda w, m: None, lambda r: core.DumpDigest())


def _write_digest(w: Writer, m: core.DigestReply) -> None:
    w.u32(len(m.items))
    for key, ballot in m.items:
        w.str_(key)
        write_ballot(w, ballot)


_variant(0x2D, core.DigestReply)(
    _write_digest,
    lambda r: core.DigestReply(tuple((r.str_(), read_ballot(r)) for _ in range(r.u32()))),
)
_variant(0x2E, core.FetchRegisters)(
    lambda w, m: _write_str_tuple(w, m.keys),
    lambda r: core.FetchRegisters(_read_str_tuple(r)),
)
_variant(0x28, core.LoadRegister)(
    lambda w, m: (w.str_(m.key), write_ballot(w, m.ballot), write_value(w, m.value)),
    lambda r: core.LoadRegister(r.str_(), read_ballot(r), read_value(r)),
)
_variant(0x29, core.LoadAck)(
    lambda w, m: w.str_(m.key),
    lambda r: core.LoadAck(r.str_()),
)
_variant(0x2A, core.StatusRequest)(lambda w, m: None, lambda r: core.StatusRequest())


def _write_status(w: Writer, m: core.StatusReply) -> None:
    w.u64(m.register_count)
    w.u32(len(m.min_ages))
    for pid, age in m.min_ages:
        w.str_(pid)
        w.u64(age)
    w.u32(len(m.counters))
    for name, count in m.counters:
        w.str_(name)
        w.u64(count)


def _read_status(r: Reader) -> core.StatusReply:
    count = r.u64()
    ages = tuple((r.str_(), r.u64()) for _ in range(r.u32()))
    counters = tuple((r.str_(), r.u64()) for _ in range(r.u32()))
    return core.StatusReply(count, ages, counters)


_variant(0x2B, core.StatusReply)(_write_status, _read_status)
_variant(0x30, core.ClientChange)(
    lambda w, m: (w.u64(m.op_id), w.str_(m.key), write_command(w, m.command)),
    lambda r: core.ClientChange(r.u64(), r.str_(), read_command(r)),
)
_variant(0x31, core.ClientDelete)(
    lambda w, m: (w.u64(m.op_id), w.str_(m.key)),
    lambda r: core.ClientDelete(r.u64(), r.str_()),
)


def _write_client_reply(w: Writer, m: core.ClientReply) -> None:
    w.u64(m.op_id)
    w.str_(m.kind)
    w.bool_(m.value is not None)
    if m.value is not None:
        write_value(w, m.value)
    write_opt_ballot(w, m.seen)


def _read_client_reply(r: Reader) -> core.ClientReply:
    op_id = r.u64()
    kind = r.str_()
    value = read_value(r) if r.bool_() else None
    return core.ClientReply(op_id, kind, value, read_opt_ballot(r))


_variant(0x32, core.ClientReply)(_write_client_reply, _read_client_reply)
_variant(0x3F, core.ErrorReply)(
    lambda w, m: (w.str_(m.code), w.str_(m.detail)),
    lambda r: core.ErrorReply(r.str_(), r.str_()),
)


def message_tag(msg: Message) -> int:
    try:
        return _TAGS[type(msg)]
    except KeyError:
        raise DecodeError(f"unencodable message {type(msg).__name__}") from None


def encode_message(msg: Message) -> bytes:
    w = Writer()
    w.u8(message_tag(msg))
    _ENCODERS[type(msg)](w, msg)
    return w.getvalue()


def decode_message(data: bytes) -> Message:
    r = Reader(data)
    tag = r.u8()
    try:
        _, decode = _DECODERS[tag]
    except KeyError:
        raise DecodeError(f"unknown message tag {tag:#x}") from None
    msg = decode(r)
    r.expect_end()
    return msg
