"""Replicated compare-and-set registers over leaderless consensus.

A key-value store of independent replicated registers, changed by applying
small pure commands in a two-phase ballot protocol, plus the machinery to
trust it: a deterministic simulated network with fault injection, a
linearizability checker, and trace invariants derived from the protocol's
safety argument.  The same acceptor/proposer code runs inside the
simulator and inside the real daemons.
"""

from .core import (
    Ballot,
    CasVersion,
    Configuration,
    Data,
    EMPTY,
    Empty,
    Identity,
    Init,
    Tombstone,
    Value,
    Write,
    WriteTombstone,
    ZERO_BALLOT,
    apply_change,
    ballot_next,
    quorums_intersect,
)

__version__ = "0.1.0"

__all__ = [
    "Ballot",
    "CasVersion",
    "Configuration",
    "Data",
    "EMPTY",
    "Empty",
    "Identity",
    "Init",
    "Tombstone",
    "Value",
    "Write",
    "WriteTombstone",
    "ZERO_BALLOT",
    "apply_change",
    "ballot_next",
    "quorums_intersect",
    "__version__",
]
