"""Protocol trace events.

Four event classes record the life of a change round: an acceptor granting
a promise, a proposer sending the new value, an acceptor accepting it, and
a proposer acknowledging after a quorum of accepts.  The harness assigns
each node a monotone logical clock (`ts`) that survives actor restarts.
Erase markers additionally record where garbage collection physically
removed a register, which is what lets the chain checks distinguish a
legitimate post-deletion fresh start from a lost write.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from . import core
from .core import Ballot, Value

PROMISED = "promised"
ACCEPT_SENT = "accept_sent"
ACCEPTED = "accepted"
ACKNOWLEDGED = "acknowledged"
ERASED = "erased"

KINDS = (PROMISED, ACCEPT_SENT, ACCEPTED, ACKNOWLEDGED, ERASED)


@dataclass(frozen=True)
class TraceEvent:
    kind: str
    key: str
    node: str
    ts: int
    ballot: Ballot
    #: the value carried by the event: accepted / sent / acknowledged state.
    value: Value | None = None
    #: promised only: the last accepted pair returned to the proposer.
    ret_ballot: Ballot | None = None
    ret_value: Value | None = None
    #: accept_sent only: ballot of the accepted state the change function was
    #: applied to; None means the round derived its value from the empty state.
    parent: Ballot | None = None
    #: accept_sent only: true when the round was pre-authorized by a cached
    #: piggybacked promise and skipped its own prepare phase.
    via_cache: bool = False


def _ballot_json(b: Ballot | None):
    return None if b is None else [b.counter, b.proposer_id]


def _ballot_from_json(obj) -> Ballot | None:
    return None if obj is None else Ballot(obj[0], obj[1])


def _value_json(v: Value | None):
    if v is None:
        return None
    if isinstance(v, core.Empty):
        return {"empty": True}
    if isinstance(v, core.Tombstone):
        return {"tombstone": v.epoch}
    return {"data": v.payload.hex()}


def _value_from_json(obj) -> Value | None:
    if obj is None:
        return None
    if "empty" in obj:
        return core.EMPTY
    if "tombstone" in obj:
        return core.Tombstone(obj["tombstone"])
    return core.Data(bytes.fromhex(obj["data"]))


def event_to_json(ev: TraceEvent) -> str:
    return json.dumps(
        {
            "kind": ev.kind,
            "key": ev.key,
            "node": ev.node,
            "ts": ev.ts,
            "ballot": _ballot_json(ev.ballot),
            "value": _value_json(ev.value),
            "ret_ballot": _ballot_json(ev.ret_ballot),
            "ret_value": _value_json(ev.ret_value),
            "parent": _ballot_json(ev.parent),
            "via_cache": ev.via_cache,
        },
        separators=(",", ":"),
    )


def event_from_json(line: str) -> TraceEvent:
    obj = json.loads(line)
    return TraceEvent(
        kind=obj["kind"],
        key=obj["key"],
        node=obj["node"],
        ts=obj["ts"],
        ballot=_ballot_from_json(obj["ballot"]),
        value=_value_from_json(obj["value"]),
        ret_ballot=_ballot_from_json(obj["ret_ballot"]),
        ret_value=_value_from_json(obj["ret_value"]),
        parent=_ballot_from_json(obj["parent"]),
        via_cache=obj.get("via_cache", False),
    )


def dump_trace(events, path) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(event_to_json(ev) + "\n")


def load_trace(path) -> list[TraceEvent]:
    with open(path) as fh:
        return [event_from_json(line) for line in fh if line.strip()]
