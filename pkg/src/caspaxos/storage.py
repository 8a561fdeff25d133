"""Durable state backends.

An acceptor (and the proposer-side scheduler state) persists through a
small record store: every mutation appends one record, replay on restart
rebuilds the state, and compaction periodically rewrites a snapshot.  The
same interface is served by an in-memory backend for the simulator --
there the backend object survives a simulated crash while the actor is
rebuilt from it, which is exactly the durability contract the file
backend provides across real process crashes.

Record payloads reuse the canonical encoding from :mod:`caspaxos.codec`;
the journal layout is documented in docs/storage.md.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

from . import codec
from .core import Ballot, Value


class StorageError(Exception):
    """A durable write failed; the caller must not reply."""


@dataclass
class RegisterState:
    """Per-key acceptor record: an optional promise and an optional accepted pair."""

    promise: Ballot | None = None
    accepted: tuple[Ballot, Value] | None = None


@dataclass
class StorageSnapshot:
    registers: dict[str, RegisterState] = field(default_factory=dict)
    min_ages: dict[str, int] = field(default_factory=dict)
    control: dict[str, bytes] = field(default_factory=dict)


class Backend:
    """Interface shared by the memory and file backends."""

    def put_register(self, key: str, state: RegisterState) -> None:
        raise NotImplementedError

    def erase_register(self, key: str) -> None:
        raise NotImplementedError

    def put_min_age(self, proposer_id: str, age: int) -> None:
        raise NotImplementedError

    def put_control(self, name: str, data: bytes | None) -> None:
        """Set or delete (data=None) a small named control record."""
        raise NotImplementedError

    def load(self) -> StorageSnapshot:
        raise NotImplementedError


class MemoryBackend(Backend):
    """Simulator backend; survives simulated crashes by construction."""

    def __init__(self) -> None:
        self._snap = StorageSnapshot()
        self.fail_writes = False
        self.writes = 0

    def _check(self) -> None:
        if self.fail_writes:
            raise StorageError("injected write failure")
        self.writes += 1

    def put_register(self, key: str, state: RegisterState) -> None:
        self._check()
        self._snap.registers[key] = RegisterState(state.promise, state.accepted)

    def erase_register(self, key: str) -> None:
        self._check()
        self._snap.registers.pop(key, None)

    def put_min_age(self, proposer_id: str, age: int) -> None:
        self._check()
        self._snap.min_ages[proposer_id] = age

    def put_control(self, name: str, data: bytes | None) -> None:
        self._check()
        if data is None:
            self._snap.control.pop(name, None)
        else:
            self._snap.control[name] = data

    def load(self) -> StorageSnapshot:
        snap = StorageSnapshot()
        snap.registers = {
            k: RegisterState(v.promise, v.accepted) for k, v in self._snap.registers.items()
        }
        snap.min_ages = dict(self._snap.min_ages)
        snap.control = dict(self._snap.control)
        return snap


_REC_REGISTER = 0x01
_REC_ERASE = 0x02
_REC_MIN_AGE = 0x03
_REC_CONTROL = 0x04

_LEN = struct.Struct(">I")


def _encode_register(key: str, state: RegisterState) -> bytes:
    w = codec.Writer()
    w.u8(_REC_REGISTER).str_(key)
    codec.write_opt_ballot(w, state.promise)
    codec.write_opt_accepted(w, state.accepted)
    return w.getvalue()


def _encode_erase(key: str) -> bytes:
    return codec.Writer().u8(_REC_ERASE).str_(key).getvalue()


def _encode_min_age(pid: str, age: int) -> bytes:
    return codec.Writer().u8(_REC_MIN_AGE).str_(pid).u64(age).getvalue()


def _encode_control(name: str, data: bytes | None) -> bytes:
    w = codec.Writer().u8(_REC_CONTROL).str_(name)
    w.bool_(data is not None)
    if data is not None:
        w.bytes_(data)
    return w.getvalue()


def _apply_record(snap: StorageSnapshot, record: bytes) -> None:
    r = codec.Reader(record)
    tag = r.u8()
    if tag == _REC_REGISTER:
        key = r.str_()
        snap.registers[key] = RegisterState(codec.read_opt_ballot(r), codec.read_opt_accepted(r))
    elif tag == _REC_ERASE:
        snap.registers.pop(r.str_(), None)
    elif tag == _REC_MIN_AGE:
        pid = r.str_()
        snap.min_ages[pid] = r.u64()
    elif tag == _REC_CONTROL:
        name = r.str_()
        if r.bool_():
            snap.control[name] = r.bytes_()
        else:
            snap.control.pop(name, None)
    else:
        raise codec.DecodeError(f"unknown journal record tag {tag}")


class FileBackend(Backend):
    """Append-only journal plus snapshot, replayed on startup.

    Every mutation is one fsynced journal append; a crash between the append
    and the reply loses nothing the node has answered for.  A torn tail
    record (crash mid-append) is detected by its length prefix and dropped.
    """

    def __init__(self, directory, *, fsync: bool = True, compact_every: int = 50_000) -> None:
        self.directory = str(directory)
        self.fsync = fsync
        self.compact_every = compact_every
        os.makedirs(self.directory, exist_ok=True)
        self._snapshot_path = os.path.join(self.directory, "snapshot.bin")
        self._journal_path = os.path.join(self.directory, "journal.log")
        self._state = self._replay()
        self._journal = open(self._journal_path, "ab")
        self._appends = 0

    # -- replay ---------------------------------------------------------

    def _read_records(self, path: str) -> list[bytes]:
        records: list[bytes] = []
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except FileNotFoundError:
            return records
        off = 0
        while off + _LEN.size <= len(data):
            (length,) = _LEN.unpack_from(data, off)
            start = off + _LEN.size
            if start + length > len(data):
                break  # torn tail record
            records.append(data[start : start + length])
            off = start + length
        return records

    def _replay(self) -> StorageSnapshot:
        snap = StorageSnapshot()
        for record in self._read_records(self._snapshot_path):
            _apply_record(snap, record)
        for record in self._read_records(self._journal_path):
            _apply_record(snap, record)
        return snap

    # -- writes ---------------------------------------------------------

    def _append(self, record: bytes) -> None:
        try:
            self._journal.write(_LEN.pack(len(record)) + record)
            self._journal.flush()
            if self.fsync:
                os.fsync(self._journal.fileno())
        except OSError as exc:
            raise StorageError(str(exc)) from exc
        self._appends += 1
        if self._appends >= self.compact_every:
            self.compact()

    def put_register(self, key, state):
        self._state.registers[key] = RegisterState(state.promise, state.accepted)
        self._append(_encode_register(key, state))

    def erase_register(self, key):
        self._state.registers.pop(key, None)
        self._append(_encode_erase(key))

    def put_min_age(self, proposer_id, age):
        self._state.min_ages[proposer_id] = age
        self._append(_encode_min_age(proposer_id, age))

    def put_control(self, name, data):
        if data is None:
            self._state.control.pop(name, None)
        else:
            self._state.control[name] = data
        self._append(_encode_control(name, data))

    def load(self) -> StorageSnapshot:
        snap = StorageSnapshot()
        snap.registers = {
            k: RegisterState(v.promise, v.accepted) for k, v in self._state.registers.items()
        }
        snap.min_ages = dict(self._state.min_ages)
        snap.control = dict(self._state.control)
        return snap

    def compact(self) -> None:
        """Rewrite the snapshot from current state and start a fresh journal."""
        tmp = self._snapshot_path + ".tmp"
        with open(tmp, "wb") as fh:
            for key, state in self._state.registers.items():
                rec = _encode_register(key, state)
                fh.write(_LEN.pack(len(rec)) + rec)
            for pid, age in self._state.min_ages.items():
                rec = _encode_min_age(pid, age)
                fh.write(_LEN.pack(len(rec)) + rec)
            for name, data in self._state.control.items():
                rec = _encode_control(name, data)
                fh.write(_LEN.pack(len(rec)) + rec)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self._snapshot_path)
        self._journal.close()
        self._journal = open(self._journal_path, "wb")
        self._journal.flush()
        os.fsync(self._journal.fileno())
        self._appends = 0

    def close(self) -> None:
        self._journal.close()
