import random

from lin_oracle import oracle_linearizable, random_history

from caspaxos import checker, core, trace
from caspaxos.checker import (
    History,
    OUTCOME_NOOP,
    OUTCOME_OK,
    OUTCOME_OPEN,
    check_chain_step,
    check_descendant_total_order,
    check_linearizable,
    check_register_lifetimes,
)
from caspaxos.core import Ballot, Data, EMPTY, Identity, Tombstone, Write, WriteTombstone
from caspaxos.harness import client_apply
from caspaxos.trace import TraceEvent


def op(history, client, key, command, invoke, response, result, outcome=OUTCOME_OK):
    rec = history.invoke(client, key, command, invoke)
    rec.response = response
    rec.result = result
    rec.outcome = outcome
    return rec


class TestLinearizability:
    def test_sequential_write_then_read(self):
        h = History()
        op(h, "c1", "k", Write(b"1"), 0, 1, core.pack_versioned(0, b"1"))
        op(h, "c1", "k", Identity(), 2, 3, core.pack_versioned(0, b"1"))
        result = check_linearizable(h.records, apply_fn=client_apply)
        assert result.ok
        assert result.witness == [0, 1]

    def test_read_after_delete_must_be_empty(self):
        # deletion anomaly shape: stale value resurfaces after a delete
        h = History()
        op(h, "c1", "k", Write(b"42"), 0, 1, core.pack_versioned(0, b"42"))
        op(h, "c1", "k", WriteTombstone(0), 2, 3, EMPTY)
        op(h, "c1", "k", Identity(), 4, 5, core.pack_versioned(0, b"42"))
        result = check_linearizable(h.records, apply_fn=client_apply)
        assert result.status == "violation"
        assert result.failing_prefix  # minimal failing prefix reported

    def test_open_op_may_take_effect_later(self):
        h = History()
        op(h, "c1", "k", Write(b"1"), 0, None, None, OUTCOME_OPEN)
        op(h, "c2", "k", Identity(), 5, 6, core.pack_versioned(0, b"1"))
        assert check_linearizable(h.records, apply_fn=client_apply).ok

    def test_open_op_may_never_commit(self):
        h = History()
        op(h, "c1", "k", Write(b"1"), 0, None, None, OUTCOME_OPEN)
        op(h, "c2", "k", Identity(), 5, 6, EMPTY)
        assert check_linearizable(h.records, apply_fn=client_apply).ok

    def test_noop_attempts_are_ignored(self):
        h = History()
        op(h, "c1", "k", Write(b"1"), 0, None, None, OUTCOME_NOOP)
        op(h, "c2", "k", Identity(), 5, 6, EMPTY)
        assert check_linearizable(h.records, apply_fn=client_apply).ok

    def test_real_time_order_enforced(self):
        h = History()
        op(h, "c1", "k", Write(b"1"), 0, 1, core.pack_versioned(0, b"1"))
        op(h, "c2", "k", Identity(), 5, 6, EMPTY)  # reads stale after the write finished
        assert check_linearizable(h.records, apply_fn=client_apply).status == "violation"

    def test_budget_exhaustion_is_inconclusive(self):
        h = History()
        for i in range(8):
            op(h, f"c{i}", "k", Write(bytes([i])), 0, 100, core.pack_versioned(0, b"?"))
        result = check_linearizable(h.records, apply_fn=client_apply, budget=3)
        assert result.status == "inconclusive"

    def test_agrees_with_permutation_oracle(self):
        rng = random.Random(2024)
        verdicts = {"ok": 0, "violation": 0}
        for _ in range(300):
            records = random_history(rng, rng.randrange(2, 7))
            result = check_linearizable(records, apply_fn=client_apply)
            expected = oracle_linearizable(records)
            assert result.status != "inconclusive"
            assert result.ok == expected, records
            verdicts[result.status] += 1
        assert verdicts["ok"] > 30 and verdicts["violation"] > 30


def ev(kind, key, node, ts, ballot, value=None, ret_b=None, ret_v=None, parent=None, via_cache=False):
    return TraceEvent(kind, key, node, ts, ballot, value, ret_b, ret_v, parent, via_cache)


def clean_chain():
    """write v1 at (1,p1), then v2 at (2,p2) derived from it; both acked."""
    b1, b2 = Ballot(1, "p1"), Ballot(2, "p2")
    events = []
    for i, node in enumerate(("a1", "a2")):
        events.append(ev(trace.PROMISED, "k", node, 1, b1))
    events.append(ev(trace.ACCEPT_SENT, "k", "p1", 1, b1, Data(b"v1"), parent=None))
    for node in ("a1", "a2"):
        events.append(ev(trace.ACCEPTED, "k", node, 2, b1, Data(b"v1")))
    events.append(ev(trace.ACKNOWLEDGED, "k", "p1", 2, b1, Data(b"v1")))
    for node in ("a2", "a3"):
        events.append(ev(trace.PROMISED, "k", node, 3, b2, ret_b=b1, ret_v=Data(b"v1")))
    events.append(ev(trace.ACCEPT_SENT, "k", "p2", 1, b2, Data(b"v2"), parent=b1))
    for ts, node in ((4, "a2"), (4, "a3")):
        events.append(ev(trace.ACCEPTED, "k", node, ts, b2, Data(b"v2")))
    events.append(ev(trace.ACKNOWLEDGED, "k", "p2", 2, b2, Data(b"v2")))
    return events


class TestTraceChecks:
    def test_clean_chain_passes_everything(self):
        events = clean_chain()
        assert check_descendant_total_order(events).ok
        assert check_chain_step(events).ok
        assert check_register_lifetimes(events).ok

    def test_single_acknowledged_change_trivially_comparable(self):
        events = [e for e in clean_chain() if e.ballot == Ballot(1, "p1")]
        assert check_descendant_total_order(events).ok

    def test_skipped_parent_is_flagged(self):
        events = clean_chain()
        b3 = Ballot(3, "p1")
        # derives from the initial write, skipping the acknowledged (2,p2)
        events += [
            ev(trace.PROMISED, "k", "a1", 5, b3, ret_b=Ballot(1, "p1"), ret_v=Data(b"v1")),
            ev(trace.PROMISED, "k", "a2", 5, b3, ret_b=Ballot(2, "p2"), ret_v=Data(b"v2")),
            ev(trace.ACCEPT_SENT, "k", "p1", 3, b3, Data(b"v3"), parent=Ballot(1, "p1")),
            ev(trace.ACCEPTED, "k", "a1", 6, b3, Data(b"v3")),
            ev(trace.ACCEPTED, "k", "a2", 6, b3, Data(b"v3")),
            ev(trace.ACKNOWLEDGED, "k", "p1", 4, b3, Data(b"v3")),
        ]
        assert not check_chain_step(events).ok
        assert not check_descendant_total_order(events).ok

    def test_fresh_root_without_erase_is_flagged(self):
        events = clean_chain()
        b3 = Ballot(3, "p1")
        events += [
            ev(trace.ACCEPT_SENT, "k", "p1", 3, b3, Data(b"v3"), parent=None),
            ev(trace.ACCEPTED, "k", "a3", 5, b3, Data(b"v3")),
        ]
        assert not check_chain_step(events).ok

    def test_fresh_root_after_erase_is_blessed(self):
        events = clean_chain()
        b2, b3 = Ballot(2, "p2"), Ballot(3, "p1")
        events += [
            ev(trace.ERASED, "k", "a2", 5, b2),
            ev(trace.ERASED, "k", "a3", 5, b2),
            ev(trace.ACCEPT_SENT, "k", "p1", 3, b3, Data(b"v3"), parent=None),
            ev(trace.ACCEPTED, "k", "a3", 6, b3, Data(b"v3")),
            ev(trace.ACCEPTED, "k", "a2", 6, b3, Data(b"v3")),
            ev(trace.ACKNOWLEDGED, "k", "p1", 4, b3, Data(b"v3")),
        ]
        assert check_chain_step(events).ok
        assert check_descendant_total_order(events).ok

    def test_quorum_overlap_required(self):
        # acked write seen by {a1,a2}; later round prepared only on {a3,a4}
        b1, b2 = Ballot(1, "p1"), Ballot(5, "p2")
        events = [
            ev(trace.ACCEPT_SENT, "k", "p1", 1, b1, Data(b"v1"), parent=None),
            ev(trace.ACCEPTED, "k", "a1", 1, b1, Data(b"v1")),
            ev(trace.ACCEPTED, "k", "a2", 1, b1, Data(b"v1")),
            ev(trace.ACKNOWLEDGED, "k", "p1", 2, b1, Data(b"v1")),
            ev(trace.PROMISED, "k", "a3", 1, b2),
            ev(trace.PROMISED, "k", "a4", 1, b2),
            ev(trace.ACCEPT_SENT, "k", "p2", 1, b2, Data(b"v1"), parent=b1),
            ev(trace.ACCEPTED, "k", "a3", 2, b2, Data(b"v1")),
        ]
        assert not check_chain_step(events).ok
        assert check_chain_step(events, expect_quorum_overlap=False).ok

    def test_missing_derivation_is_integrity_not_violation(self):
        events = [ev(trace.ACCEPTED, "k", "a1", 1, Ballot(1, "p1"), Data(b"v"))]
        report = check_chain_step(events)
        assert report.integrity and not report.violations

    def test_nonmonotone_ts_is_integrity(self):
        b1 = Ballot(1, "p1")
        events = [
            ev(trace.PROMISED, "k", "a1", 5, b1),
            ev(trace.PROMISED, "k", "a1", 5, Ballot(2, "p1")),
        ]
        assert check_register_lifetimes(events).integrity

    def test_lifetime_accept_backwards_flagged(self):
        events = [
            ev(trace.ACCEPT_SENT, "k", "p1", 1, Ballot(5, "p1"), Data(b"a"), parent=None),
            ev(trace.ACCEPT_SENT, "k", "p2", 1, Ballot(3, "p2"), Data(b"b"), parent=None),
            ev(trace.ACCEPTED, "k", "a1", 1, Ballot(5, "p1"), Data(b"a")),
            ev(trace.ACCEPTED, "k", "a1", 2, Ballot(3, "p2"), Data(b"b")),
        ]
        report = check_register_lifetimes(events)
        assert any("backwards" in v for v in report.violations)

    def test_lifetime_stale_promise_flagged(self):
        # node holds (5,p1) but answers a prepare claiming it holds nothing
        events = [
            ev(trace.ACCEPT_SENT, "k", "p1", 1, Ballot(5, "p1"), Data(b"a"), parent=None),
            ev(trace.ACCEPTED, "k", "a1", 1, Ballot(5, "p1"), Data(b"a")),
            ev(trace.PROMISED, "k", "a1", 2, Ballot(6, "p2"), ret_b=None),
        ]
        report = check_register_lifetimes(events)
        assert any("promise returned" in v for v in report.violations)
