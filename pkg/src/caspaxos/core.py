"""Shared protocol vocabulary.

Ballots, register values, the closed change-command algebra, quorum
arithmetic and the message variants exchanged between proposers and
acceptors.  Everything in this module is pure and immutable: no I/O,
no clocks, safe to use from any number of concurrent contexts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

COUNTER_MAX = 2**64 - 1


class ProtocolError(Exception):
    """Fatal protocol-level failure; never silently recovered."""


class CounterOverflow(ProtocolError):
    """A ballot counter left the 64-bit wire range."""


class ConfigError(ValueError):
    """Configuration rejected: bad roster or non-intersecting quorums."""


class CommandError(ValueError):
    """Malformed change-command description; rejected before phase 1."""


# ---------------------------------------------------------------------------
# Ballots


@dataclass(frozen=True, order=True)
class Ballot:
    """Totally ordered (counter, proposer id) pair identifying a change round.

    Counter dominates; the proposer id only breaks ties, so proposers with
    distinct ids can never mint equal ballots.
    """

    counter: int
    proposer_id: str

    def __post_init__(self) -> None:
        if not 0 <= self.counter <= COUNTER_MAX:
            raise CounterOverflow(f"ballot counter {self.counter} out of range")


#: Reserved "never balloted" sentinel, smaller than any generated ballot.
ZERO_BALLOT = Ballot(0, "")


def ballot_next(current_counter: int, observed: Ballot, proposer_id: str) -> Ballot:
    """Mint the next ballot for *proposer_id*.

    The result is strictly greater than both the proposer's own counter and
    the highest competing ballot it has observed, which is what lets a
    proposer recover from a conflict instead of looping on it.
    """
    nxt = max(current_counter, observed.counter) + 1
    if nxt > COUNTER_MAX:
        raise CounterOverflow("ballot counter exhausted")
    return Ballot(nxt, proposer_id)


# ---------------------------------------------------------------------------
# Register values
#
# A register holds one of three mutually distinguishable variants: the empty
# value, a tombstone (deletion marker carrying the GC epoch that wrote it),
# or opaque application bytes.  Application bytes produced by the command
# algebra always carry a version number packed into the payload.


class Value:
    """Base class for register values; use the three concrete variants."""

    __slots__ = ()


@dataclass(frozen=True)
class Empty(Value):
    __slots__ = ()


@dataclass(frozen=True)
class Tombstone(Value):
    epoch: int


@dataclass(frozen=True)
class Data(Value):
    payload: bytes


EMPTY = Empty()


def is_absent(value: Value | None) -> bool:
    """True when a client-visible read of this value should report "no value"."""
    return value is None or isinstance(value, (Empty, Tombstone))


_VERSION = struct.Struct(">Q")


def pack_versioned(version: int, payload: bytes) -> Data:
    if not 0 <= version <= COUNTER_MAX:
        raise CommandError(f"version {version} out of range")
    return Data(_VERSION.pack(version) + payload)


def unpack_versioned(value: Value) -> tuple[int, bytes] | None:
    """(version, payload) for versioned application data, else None."""
    if not isinstance(value, Data) or len(value.payload) < _VERSION.size:
        return None
    return _VERSION.unpack_from(value.payload)[0], value.payload[_VERSION.size :]


# ---------------------------------------------------------------------------
# Change commands
#
# Clients do not ship code; they ship one of a small closed set of command
# descriptions.  Each is a deterministic, side-effect-free map from the
# current register value to the new one, applied by the proposer between
# the two phases.


class Command:
    """Base class for change commands."""

    __slots__ = ()

    def apply(self, current: Value) -> Value:
        raise NotImplementedError


@dataclass(frozen=True)
class Identity(Command):
    """Read: leaves the register exactly as found, tombstones included."""

    __slots__ = ()

    def apply(self, current: Value) -> Value:
        return current


@dataclass(frozen=True)
class Init(Command):
    """Initialize to version 0 if the register is empty or deleted, else keep."""

    payload: bytes

    def apply(self, current: Value) -> Value:
        if is_absent(current):
            return pack_versioned(0, self.payload)
        return current


@dataclass(frozen=True)
class Write(Command):
    """Unconditional write; bumps the version of whatever it replaces."""

    payload: bytes

    def apply(self, current: Value) -> Value:
        versioned = unpack_versioned(current)
        if versioned is None:
            return pack_versioned(0, self.payload)
        return pack_versioned(versioned[0] + 1, self.payload)


@dataclass(frozen=True)
class CasVersion(Command):
    """Write iff the current version matches; otherwise keep the state."""

    expected_version: int
    payload: bytes

    def apply(self, current: Value) -> Value:
        versioned = unpack_versioned(current)
        if versioned is not None and versioned[0] == self.expected_version:
            return pack_versioned(self.expected_version + 1, self.payload)
        return current


@dataclass(frozen=True)
class WriteTombstone(Command):
    """Mark the register deleted; the epoch identifies the deletion round."""

    epoch: int

    def apply(self, current: Value) -> Value:
        return Tombstone(self.epoch)


def apply_change(command: Command, current: Value | None) -> Value:
    """Apply a change command; a missing current value models the empty state."""
    if not isinstance(command, Command):
        raise CommandError(f"not a change command: {command!r}")
    return command.apply(EMPTY if current is None else current)


# ---------------------------------------------------------------------------
# Configurations and quorum arithmetic


@dataclass(frozen=True)
class Configuration:
    """Acceptor roster plus per-phase target sets and quorum sizes.

    Safety needs exactly one thing from a configuration: every
    prepare-quorum-sized subset of the prepare targets must intersect every
    accept-quorum-sized subset of the accept targets.
    """

    acceptors: tuple[str, ...]
    prepare_targets: tuple[str, ...]
    accept_targets: tuple[str, ...]
    prepare_quorum: int
    accept_quorum: int

    @staticmethod
    def majority(acceptors) -> "Configuration":
        """Classic symmetric configuration: both quorums are a majority."""
        roster = tuple(sorted(acceptors))
        q = len(roster) // 2 + 1
        return Configuration(roster, roster, roster, q, q)

    def replace(self, **changes) -> "Configuration":
        fields = {
            "acceptors": self.acceptors,
            "prepare_targets": self.prepare_targets,
            "accept_targets": self.accept_targets,
            "prepare_quorum": self.prepare_quorum,
            "accept_quorum": self.accept_quorum,
        }
        fields.update(changes)
        for name in ("acceptors", "prepare_targets", "accept_targets"):
            fields[name] = tuple(sorted(fields[name]))
        return Configuration(**fields)

    def validate(self) -> None:
        if len(set(self.acceptors)) != len(self.acceptors):
            raise ConfigError("duplicate acceptor ids")
        for name, targets in (
            ("prepare", self.prepare_targets),
            ("accept", self.accept_targets),
        ):
            if not set(targets) <= set(self.acceptors):
                raise ConfigError(f"{name} targets outside the roster")
        if not 1 <= self.prepare_quorum <= len(self.prepare_targets):
            raise ConfigError("prepare quorum must fit its target set")
        if not 1 <= self.accept_quorum <= len(self.accept_targets):
            raise ConfigError("accept quorum must fit its target set")
        if not quorums_intersect(self):
            raise ConfigError(
                f"prepare quorum {self.prepare_quorum} and accept quorum "
                f"{self.accept_quorum} admit disjoint quorums"
            )


def quorum_sets_intersect(
    prepare_targets,
    prepare_quorum: int,
    accept_targets,
    accept_quorum: int,
) -> bool:
    """True iff every prepare quorum shares a node with every accept quorum.

    Closed form: a disjoint pair exists exactly when the prepare side can
    seat enough members outside the accept targets (or on nodes an accept
    quorum can avoid).  When both target sets equal the full roster of size
    N this reduces to prepare_quorum + accept_quorum > N.
    """
    pt, at = set(prepare_targets), set(accept_targets)
    forced_into_at = max(0, prepare_quorum - len(pt - at))
    return accept_quorum + forced_into_at > len(at)


def quorums_intersect(cfg: Configuration) -> bool:
    return quorum_sets_intersect(
        cfg.prepare_targets, cfg.prepare_quorum, cfg.accept_targets, cfg.accept_quorum
    )


def configs_jointly_safe(a: Configuration, b: Configuration) -> bool:
    """True iff two configurations held concurrently by different proposers
    keep the intersection property in both directions (and individually)."""
    return (
        quorums_intersect(a)
        and quorums_intersect(b)
        and quorum_sets_intersect(
            a.prepare_targets, a.prepare_quorum, b.accept_targets, b.accept_quorum
        )
        and quorum_sets_intersect(
            b.prepare_targets, b.prepare_quorum, a.accept_targets, a.accept_quorum
        )
    )


# ---------------------------------------------------------------------------
# Messages
#
# Replies carry the ballot of the round they answer so the proposer can
# correlate them without a transport request id, and every conflict reply
# carries the conflicting ballot so the proposer can fast-forward.


class Message:
    __slots__ = ()


@dataclass(frozen=True)
class Prepare(Message):
    key: str
    ballot: Ballot
    proposer_age: int


@dataclass(frozen=True)
class Promise(Message):
    key: str
    ballot: Ballot
    accepted: tuple[Ballot, Value] | None


@dataclass(frozen=True)
class PrepareConflict(Message):
    key: str
    ballot: Ballot
    seen: Ballot


@dataclass(frozen=True)
class Accept(Message):
    key: str
    ballot: Ballot
    value: Value
    next_hint: Ballot | None
    proposer_age: int


@dataclass(frozen=True)
class Accepted(Message):
    key: str
    ballot: Ballot


@dataclass(frozen=True)
class AcceptConflict(Message):
    key: str
    ballot: Ballot
    seen: Ballot


@dataclass(frozen=True)
class AgeRejected(Message):
    key: str
    ballot: Ballot
    min_age: int


# --- garbage-collection control -------------------------------------------


@dataclass(frozen=True)
class SetMinAge(Message):
    proposer_id: str
    age: int


@dataclass(frozen=True)
class MinAgeAck(Message):
    proposer_id: str
    age: int


@dataclass(frozen=True)
class EraseKey(Message):
    key: str
    epoch: int


@dataclass(frozen=True)
class EraseReply(Message):
    key: str
    epoch: int
    erased: bool


@dataclass(frozen=True)
class InvalidateCache(Message):
    key: str
    tombstone_ballot: Ballot
    new_age: int


@dataclass(frozen=True)
class InvalidateAck(Message):
    key: str
    new_age: int


# --- membership / admin -----------------------------------------------------


@dataclass(frozen=True)
class ConfigUpdate(Message):
    """Partial configuration update pushed to a proposer; None leaves a field."""

    acceptors: tuple[str, ...] | None
    prepare_targets: tuple[str, ...] | None
    accept_targets: tuple[str, ...] | None
    prepare_quorum: int | None
    accept_quorum: int | None

    def apply_to(self, cfg: Configuration) -> Configuration:
        changes = {
            name: getattr(self, name)
            for name in (
                "acceptors",
                "prepare_targets",
                "accept_targets",
                "prepare_quorum",
                "accept_quorum",
            )
            if getattr(self, name) is not None
        }
        return cfg.replace(**changes)


@dataclass(frozen=True)
class ConfigAck(Message):
    pass


@dataclass(frozen=True)
class RosterUpdate(Message):
    """New proposer roster for GC fan-out, pushed to every proposer."""

    proposers: tuple[str, ...]


@dataclass(frozen=True)
class RosterAck(Message):
    pass


@dataclass(frozen=True)
class RescanRequest(Message):
    keys: tuple[str, ...]


@dataclass(frozen=True)
class RescanReport(Message):
    record_moves: int
    unfinished: tuple[str, ...]


@dataclass(frozen=True)
class DumpRegisters(Message):
    pass


@dataclass(frozen=True)
class DumpDigest(Message):
    """Request (key, accepted ballot) pairs only; metadata for catch-up."""


@dataclass(frozen=True)
class DigestReply(Message):
    items: tuple[tuple[str, Ballot], ...]


@dataclass(frozen=True)
class FetchRegisters(Message):
    keys: tuple[str, ...]


@dataclass(frozen=True)
class RegisterDump(Message):
    """(key, accepted ballot, accepted value) triples; promise-only keys omitted."""

    items: tuple[tuple[str, Ballot, Value], ...]


@dataclass(frozen=True)
class LoadRegister(Message):
    """Install an accepted pair directly (state transfer), keeping the higher ballot."""

    key: str
    ballot: Ballot
    value: Value


@dataclass(frozen=True)
class LoadAck(Message):
    key: str


@dataclass(frozen=True)
class StatusRequest(Message):
    pass


@dataclass(frozen=True)
class StatusReply(Message):
    register_count: int
    min_ages: tuple[tuple[str, int], ...]
    counters: tuple[tuple[str, int], ...]


# --- client API --------------------------------------------------------------


@dataclass(frozen=True)
class ClientChange(Message):
    op_id: int
    key: str
    command: Command


@dataclass(frozen=True)
class ClientDelete(Message):
    op_id: int
    key: str


@dataclass(frozen=True)
class ClientReply(Message):
    """Outcome of a submitted change: kind is one of ok / prepare_conflict /
    accept_conflict / unavailable.  op_id echoes the request."""

    op_id: int
    kind: str
    value: Value | None
    seen: Ballot | None


@dataclass(frozen=True)
class ErrorReply(Message):
    """Typed protocol-level error; the connection stays usable."""

    code: str
    detail: str
