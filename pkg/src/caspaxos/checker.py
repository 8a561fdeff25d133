"""Verdict machinery.

Two independent families of checks run over a finished execution:

* ``check_linearizable`` searches for a witness ordering of the per-key
  client history (completed operations must appear atomic between invoke
  and response; unknown-outcome operations may take effect at any later
  point or never).

* ``check_descendant_total_order`` / ``check_chain_step`` replay the
  recorded protocol events and verify the structural safety argument:
  every pair of acknowledged changes is connected by a chain of state
  derivations, because any accepted state's parent carries at least the
  ballot of every older acknowledged change.  Registers deleted by the
  collector legitimately restart their chain: a fresh root is accepted
  only above an erased tombstone's ballot.

Trace-integrity problems (broken derivation links, non-monotone node
clocks) are reported separately from protocol violations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import core, trace
from .core import Ballot, Command, Value


# ---------------------------------------------------------------------------
# Client histories

OUTCOME_OK = "ok"
OUTCOME_OPEN = "open"  # unknown: may have committed at any point after invoke
OUTCOME_NOOP = "noop"  # provably wrote nothing (prepare-phase failure)


@dataclass
class OpRecord:
    op_seq: int
    client: str
    key: str
    command: Command
    invoke: int
    response: int | None
    result: Value | None
    outcome: str
    closed_at: int | None = None


class History:
    def __init__(self) -> None:
        self.records: list[OpRecord] = []
        self._seq = 0

    def invoke(self, client: str, key: str, command: Command, at: int) -> OpRecord:
        rec = OpRecord(self._seq, client, key, command, at, None, None, OUTCOME_OPEN)
        self._seq += 1
        self.records.append(rec)
        return rec

    def per_key(self) -> dict[str, list[OpRecord]]:
        out: dict[str, list[OpRecord]] = {}
        for rec in self.records:
            out.setdefault(rec.key, []).append(rec)
        return out


@dataclass
class LinResult:
    status: str  # "ok" | "violation" | "inconclusive"
    witness: list[int] | None = None
    failing_prefix: list[int] | None = None
    explored: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _default_apply(command: Command, state: Value) -> Value:
    return core.apply_change(command, state)


def _search(ops: list[OpRecord], apply_fn, budget: int):
    """Witness search; returns (found | None-on-budget, witness, explored)."""
    n = len(ops)
    inv = [op.invoke for op in ops]
    res = [op.response if op.outcome == OUTCOME_OK else None for op in ops]
    explored = 0
    memo: set[tuple[frozenset, Value]] = set()
    witness: list[int] = []

    def dfs(remaining: frozenset, state: Value):
        nonlocal explored
        if all(res[i] is None for i in remaining):
            return True  # only unknown-outcome ops left; they may simply never commit
        explored += 1
        if explored > budget:
            return None
        key = (remaining, state)
        if key in memo:
            return False
        min_res = min(res[i] for i in remaining if res[i] is not None)
        for i in sorted(remaining):
            if inv[i] > min_res:
                continue  # some completed op finished before this one began
            new_state = apply_fn(ops[i].command, state)
            if res[i] is not None and new_state != ops[i].result:
                continue
            sub = dfs(remaining - {i}, new_state)
            if sub is True:
                witness.append(i)
                return True
            if sub is None:
                return None
        memo.add(key)
        return False

    found = dfs(frozenset(range(n)), core.EMPTY)
    witness.reverse()
    return found, witness, explored


def check_linearizable(
    records: list[OpRecord],
    *,
    apply_fn=_default_apply,
    budget: int = 2_000_000,
) -> LinResult:
    """Single-key linearizability verdict with witness or minimal failing prefix."""
    ops = [r for r in records if r.outcome != OUTCOME_NOOP]
    found, witness, explored = _search(ops, apply_fn, budget)
    if found is None:
        return LinResult("inconclusive", explored=explored)
    if found:
        return LinResult("ok", witness=[ops[i].op_seq for i in witness], explored=explored)
    # Shrink to the shortest prefix (in submission order) that already fails.
    for k in range(1, len(ops) + 1):
        sub_found, _, _ = _search(ops[:k], apply_fn, budget)
        if sub_found is False:
            return LinResult(
                "violation",
                failing_prefix=[op.op_seq for op in ops[:k]],
                explored=explored,
            )
    return LinResult("violation", failing_prefix=[op.op_seq for op in ops], explored=explored)


def check_history(history: History, **kwargs) -> dict[str, LinResult]:
    return {key: check_linearizable(records, **kwargs) for key, records in history.per_key().items()}


# ---------------------------------------------------------------------------
# Trace checks


@dataclass
class TraceCheck:
    violations: list[str] = field(default_factory=list)
    integrity: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations and not self.integrity


class _KeyIndex:
    __slots__ = (
        "key",
        "sent",
        "accepted_value",
        "accepted_nodes",
        "promised_nodes",
        "acked",
        "erased",
        "node_events",
    )

    def __init__(self, key: str):
        self.key = key
        # ballot -> (value, parent ballot | None, via_cache)
        self.sent: dict[Ballot, tuple] = {}
        self.accepted_value: dict[Ballot, Value] = {}
        self.accepted_nodes: dict[Ballot, set[str]] = {}
        self.promised_nodes: dict[Ballot, set[str]] = {}
        self.acked: dict[Ballot, Value] = {}
        self.erased: list[Ballot] = []
        # node -> [(ts, kind, ballot-or-ret-ballot)] in trace order
        self.node_events: dict[str, list[tuple]] = {}


def _index(events: list[trace.TraceEvent], report: TraceCheck) -> dict[str, _KeyIndex]:
    last_ts: dict[str, int] = {}
    keys: dict[str, _KeyIndex] = {}
    for ev in events:
        prev = last_ts.get(ev.node)
        if prev is not None and ev.ts <= prev:
            report.integrity.append(f"node {ev.node}: ts not increasing ({ev.ts} after {prev})")
        last_ts[ev.node] = ev.ts
        idx = keys.setdefault(ev.key, _KeyIndex(ev.key))
        if ev.kind == trace.ACCEPT_SENT:
            entry = (ev.value, ev.parent, ev.via_cache)
            old = idx.sent.get(ev.ballot)
            if old is None:
                idx.sent[ev.ballot] = entry
            elif old != entry:
                report.integrity.append(f"key {ev.key}: two accept rounds share ballot {ev.ballot}")
        elif ev.kind == trace.ACCEPTED:
            old = idx.accepted_value.get(ev.ballot)
            if old is None:
                idx.accepted_value[ev.ballot] = ev.value
            elif old != ev.value:
                report.integrity.append(f"key {ev.key}: ballot {ev.ballot} accepted two values")
            idx.accepted_nodes.setdefault(ev.ballot, set()).add(ev.node)
            idx.node_events.setdefault(ev.node, []).append((ev.ts, trace.ACCEPTED, ev.ballot))
        elif ev.kind == trace.PROMISED:
            idx.promised_nodes.setdefault(ev.ballot, set()).add(ev.node)
            idx.node_events.setdefault(ev.node, []).append((ev.ts, trace.PROMISED, ev.ret_ballot))
        elif ev.kind == trace.ACKNOWLEDGED:
            idx.acked.setdefault(ev.ballot, ev.value)
        elif ev.kind == trace.ERASED:
            idx.erased.append(ev.ballot)
            idx.node_events.setdefault(ev.node, []).append((ev.ts, trace.ERASED, ev.ballot))
    for idx in keys.values():
        for ballot in idx.accepted_value:
            if ballot not in idx.sent:
                report.integrity.append(
                    f"key {idx.key}: accepted ballot {ballot} has no derivation record"
                )
        for ballot in idx.acked:
            if ballot not in idx.accepted_value:
                report.integrity.append(
                    f"key {idx.key}: acknowledged ballot {ballot} was never accepted"
                )
    return keys


def _fresh_root_blessed(idx: _KeyIndex, floor: Ballot) -> bool:
    """A chain restart above an acknowledged change is legitimate only when
    collection physically erased a tombstone at least as recent; the
    per-node register-lifetime check separately pins every report of an
    empty register to a preceding erase."""
    return any(floor <= b for b in idx.erased)


def check_register_lifetimes(events: list[trace.TraceEvent]) -> TraceCheck:
    """Per-acceptor durability audit: a register's accepted ballot never
    decreases and every promise returns exactly the accepted state the node
    last persisted, with erases as the only legitimate resets."""
    report = TraceCheck()
    for idx in _index(events, report).values():
        for node, entries in sorted(idx.node_events.items()):
            current: Ballot | None = None  # accepted ballot held by this node
            for ts, kind, ballot in entries:
                if kind == trace.ACCEPTED:
                    if current is not None and ballot < current:
                        report.violations.append(
                            f"key {idx.key} node {node}: accepted ballot went backwards "
                            f"({ballot} after {current}) at ts {ts}"
                        )
                    if current is None or ballot > current:
                        current = ballot
                elif kind == trace.ERASED:
                    current = None
                elif kind == trace.PROMISED:
                    if ballot != current:
                        report.violations.append(
                            f"key {idx.key} node {node}: promise returned accepted state "
                            f"{ballot} while holding {current} at ts {ts}"
                        )
    return report


def _chain_reaches(idx: _KeyIndex, target: Ballot, start: Ballot, report: TraceCheck) -> bool | None:
    """Walk parent links from `start` down to `target`.

    True: reached target.  False: provably skipped it.  None: trace gap.
    """
    cur = start
    while True:
        if cur == target:
            return True
        entry = idx.sent.get(cur)
        if entry is None:
            report.integrity.append(f"key {idx.key}: chain ballot {cur} missing from trace")
            return None
        parent = entry[1]
        if parent is None:
            return True if _fresh_root_blessed(idx, target) else False
        if parent >= cur:
            report.integrity.append(f"key {idx.key}: non-decreasing parent link at {cur}")
            return None
        if parent < target:
            return False
        cur = parent


def check_descendant_total_order(events: list[trace.TraceEvent]) -> TraceCheck:
    """Any two acknowledged changes of one key must be chain-comparable."""
    report = TraceCheck()
    for idx in _index(events, report).values():
        acked = sorted(idx.acked.items(), key=lambda kv: kv[0])
        for i in range(len(acked)):
            for j in range(i + 1, len(acked)):
                (low_b, low_v), (high_b, _) = acked[i], acked[j]
                reached = _chain_reaches(idx, low_b, high_b, report)
                if reached is False:
                    report.violations.append(
                        f"key {idx.key}: acknowledged {high_b} is not a descendant of "
                        f"acknowledged {low_b} (value {low_v!r})"
                    )
    return report


def check_chain_step(
    events: list[trace.TraceEvent],
    *,
    expect_quorum_overlap: bool = True,
) -> TraceCheck:
    """Inductive core: every accepted state above an acknowledged change must
    derive from a state at least as recent as that change.

    With ``expect_quorum_overlap`` the check also demands a common node
    between the older change's accept set and the newer round's promise set;
    that holds within any one intersecting configuration but not across
    roster changes, so reconfiguration harnesses disable it.
    """
    report = TraceCheck()
    for idx in _index(events, report).values():
        for acked_b in idx.acked:
            for accepted_b, entry in idx.sent.items():
                if accepted_b <= acked_b or accepted_b not in idx.accepted_value:
                    continue
                value, parent, via_cache = entry
                if parent is None:
                    if not _fresh_root_blessed(idx, acked_b):
                        report.violations.append(
                            f"key {idx.key}: {accepted_b} restarts the chain above "
                            f"acknowledged {acked_b} without an erase"
                        )
                elif parent < acked_b:
                    report.violations.append(
                        f"key {idx.key}: {accepted_b} derives from {parent}, older than "
                        f"acknowledged {acked_b}"
                    )
                if expect_quorum_overlap and not via_cache:
                    writers = idx.accepted_nodes.get(acked_b, set())
                    promisers = idx.promised_nodes.get(accepted_b, set())
                    if not writers & promisers:
                        report.violations.append(
                            f"key {idx.key}: accept set of {acked_b} and promise set of "
                            f"{accepted_b} do not overlap"
                        )
    return report
