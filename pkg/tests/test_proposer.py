import random

from caspaxos.core import (
    Accept,
    AcceptConflict,
    Accepted,
    AgeRejected,
    Ballot,
    Configuration,
    Data,
    EMPTY,
    Identity,
    Prepare,
    PrepareConflict,
    Promise,
    Write,
    pack_versioned,
)
from caspaxos.proposer import (
    ACCEPT_CONFLICT,
    OK,
    PREPARE_CONFLICT,
    Proposer,
    ProposerMutations,
    UNAVAILABLE,
)
from caspaxos.storage import MemoryBackend


class FakeCtx:
    def __init__(self):
        self.sent = []
        self.timers = []
        self.tick = 0

    def send(self, to, msg):
        self.sent.append((to, msg))

    def set_timer(self, delay, token):
        self.timers.append((delay, token))

    def now(self):
        return self.tick

    def take(self, msg_type):
        out = [(to, m) for to, m in self.sent if isinstance(m, msg_type)]
        self.sent = [(to, m) for to, m in self.sent if not isinstance(m, msg_type)]
        return out


CFG = Configuration.majority(["a1", "a2", "a3"])


def make(one_rtt=False, mutations=None):
    return Proposer("p1", CFG, MemoryBackend(), one_rtt=one_rtt, mutations=mutations)


class Collector:
    def __init__(self):
        self.outcomes = []

    def __call__(self, outcome, ctx):
        self.outcomes.append(outcome)


def drive_prepare(proposer, ctx, promises):
    """Feed promise replies; returns the Accept broadcast."""
    (_, prepare), *_ = ctx.take(Prepare)
    for node, accepted in promises:
        proposer.handle_message(node, Promise(prepare.key, prepare.ballot, accepted), ctx)
    return prepare, ctx.take(Accept)


class TestTwoPhase:
    def test_happy_path(self):
        proposer, ctx, done = make(), FakeCtx(), Collector()
        proposer.submit("k", Write(b"v"), done, ctx)
        prepares = ctx.take(Prepare)
        assert [to for to, _ in prepares] == ["a1", "a2", "a3"]
        ballot = prepares[0][1].ballot
        proposer.handle_message("a1", Promise("k", ballot, None), ctx)
        assert not ctx.take(Accept)  # below quorum
        proposer.handle_message("a2", Promise("k", ballot, None), ctx)
        accepts = ctx.take(Accept)
        assert [to for to, _ in accepts] == ["a1", "a2", "a3"]
        assert accepts[0][1].value == pack_versioned(0, b"v")
        proposer.handle_message("a1", Accepted("k", ballot), ctx)
        assert not done.outcomes
        proposer.handle_message("a3", Accepted("k", ballot), ctx)
        assert done.outcomes[0].kind == OK
        assert done.outcomes[0].value == pack_versioned(0, b"v")
        assert done.outcomes[0].ballot == ballot

    def test_duplicate_promises_counted_once(self):
        proposer, ctx, done = make(), FakeCtx(), Collector()
        proposer.submit("k", Write(b"v"), done, ctx)
        (_, prepare), *_ = ctx.take(Prepare)
        proposer.handle_message("a1", Promise("k", prepare.ballot, None), ctx)
        proposer.handle_message("a1", Promise("k", prepare.ballot, None), ctx)
        assert not ctx.take(Accept)

    def test_highest_ballot_value_selected_against_brute_force(self):
        rng = random.Random(42)
        for trial in range(200):
            proposer, ctx, done = make(), FakeCtx(), Collector()
            proposer.submit("k", Identity(), done, ctx)
            (_, prepare), *_ = ctx.take(Prepare)
            entries = []
            for node in ("a1", "a2"):
                if rng.random() < 0.3:
                    entries.append((node, None))
                else:
                    entries.append(
                        (node, (Ballot(rng.randrange(1, 50), f"P{rng.randrange(3)}"),
                                Data(bytes([rng.randrange(256)]))))
                    )
            for node, accepted in entries:
                proposer.handle_message(node, Promise("k", prepare.ballot, accepted), ctx)
            accepts = ctx.take(Accept)
            # independent selection: scan for the maximum ballot
            best = None
            for _, accepted in entries:
                if accepted is not None and (best is None or accepted[0] > best[0]):
                    best = accepted
            expected = EMPTY if best is None else best[1]
            assert accepts[0][1].value == expected

    def test_mutant_picks_lowest(self):
        proposer = make(mutations=ProposerMutations(pick_lowest_ballot=True))
        ctx, done = FakeCtx(), Collector()
        proposer.submit("k", Identity(), done, ctx)
        (_, prepare), *_ = ctx.take(Prepare)
        proposer.handle_message("a1", Promise("k", prepare.ballot, (Ballot(5, "x"), Data(b"new"))), ctx)
        proposer.handle_message("a2", Promise("k", prepare.ballot, (Ballot(2, "x"), Data(b"old"))), ctx)
        assert ctx.take(Accept)[0][1].value == Data(b"old")

    def test_prepare_conflict_fast_forwards(self):
        proposer, ctx, done = make(), FakeCtx(), Collector()
        proposer.submit("k", Write(b"v"), done, ctx)
        (_, prepare), *_ = ctx.take(Prepare)
        proposer.handle_message(
            "a1", PrepareConflict("k", prepare.ballot, Ballot(50, "p9")), ctx
        )
        assert done.outcomes[0].kind == PREPARE_CONFLICT
        assert done.outcomes[0].seen == Ballot(50, "p9")
        assert proposer.next_ballot().counter == 51

    def test_stale_prepare_conflict_ignored_in_accept_phase(self):
        proposer, ctx, done = make(), FakeCtx(), Collector()
        proposer.submit("k", Write(b"v"), done, ctx)
        prepare, _ = drive_prepare(proposer, ctx, [("a1", None), ("a2", None)])
        # duplicate prepare produced a late conflict: the round must survive
        proposer.handle_message(
            "a3", PrepareConflict("k", prepare.ballot, prepare.ballot), ctx
        )
        assert not done.outcomes
        proposer.handle_message("a1", Accepted("k", prepare.ballot), ctx)
        proposer.handle_message("a2", Accepted("k", prepare.ballot), ctx)
        assert done.outcomes[0].kind == OK

    def test_accept_conflict_surfaces(self):
        proposer, ctx, done = make(), FakeCtx(), Collector()
        proposer.submit("k", Write(b"v"), done, ctx)
        prepare, _ = drive_prepare(proposer, ctx, [("a1", None), ("a2", None)])
        proposer.handle_message(
            "a2", AcceptConflict("k", prepare.ballot, Ballot(99, "p2")), ctx
        )
        assert done.outcomes[0].kind == ACCEPT_CONFLICT
        assert proposer.counter >= 99

    def test_timeout_is_unavailable(self):
        proposer, ctx, done = make(), FakeCtx(), Collector()
        proposer.submit("k", Write(b"v"), done, ctx)
        (_, prepare), *_ = ctx.take(Prepare)
        delay, token = ctx.timers[0]
        assert delay == proposer.phase_timeout
        proposer.on_timer(token, ctx)
        assert done.outcomes[0].kind == UNAVAILABLE

    def test_same_key_serialized(self):
        proposer, ctx = make(), FakeCtx()
        first, second = Collector(), Collector()
        proposer.submit("k", Write(b"1"), first, ctx)
        proposer.submit("k", Write(b"2"), second, ctx)
        assert len(ctx.take(Prepare)) == 3  # only the first round started
        token = ctx.timers[0][1]
        proposer.on_timer(token, ctx)
        assert first.outcomes and first.outcomes[0].kind == UNAVAILABLE
        assert len(ctx.take(Prepare)) == 3  # the queued change started

    def test_counter_never_reissued(self):
        proposer, ctx = make(), FakeCtx()
        seen = set()
        for key in ("a", "b", "c"):
            proposer.submit(key, Write(b"x"), Collector(), ctx)
        for _, prepare in ctx.take(Prepare):
            seen.add(prepare.ballot)
        assert len(seen) == 3

    def test_counter_survives_restart(self):
        backend = MemoryBackend()
        proposer = Proposer("p1", CFG, backend)
        issued = [proposer.next_ballot() for _ in range(5)]
        restarted = Proposer("p1", CFG, backend)
        assert restarted.next_ballot() > issued[-1]


class TestAgeHandling:
    def test_age_rejection_refreshes_and_conflicts(self):
        proposer, ctx, done = make(), FakeCtx(), Collector()
        proposer.submit("k", Write(b"v"), done, ctx)
        (_, prepare), *_ = ctx.take(Prepare)
        proposer.handle_message("a1", AgeRejected("k", prepare.ballot, 9), ctx)
        assert proposer.age == 9
        assert done.outcomes[0].kind == PREPARE_CONFLICT

    def test_invalidate_is_idempotent_and_fast_forwards(self):
        proposer = make(one_rtt=True)
        proposer.cache["k"] = object()
        proposer.invalidate("k", Ballot(9, "gc"), 3)
        assert "k" not in proposer.cache
        assert proposer.counter == 10
        assert proposer.age == 3
        state = (proposer.counter, proposer.age)
        proposer.invalidate("k", Ballot(9, "gc"), 3)
        assert (proposer.counter, proposer.age) == state
        assert proposer.next_ballot() > Ballot(9, "gc")


class TestOneRoundTrip:
    def warm(self, proposer, ctx, done):
        proposer.submit("k", Write(b"v1"), done, ctx)
        prepare, accepts = drive_prepare(proposer, ctx, [("a1", None), ("a2", None)])
        hint = accepts[0][1].next_hint
        assert hint is not None and hint > prepare.ballot
        proposer.handle_message("a1", Accepted("k", prepare.ballot), ctx)
        proposer.handle_message("a2", Accepted("k", prepare.ballot), ctx)
        return hint

    def test_cold_cache_runs_two_phases_with_hint(self):
        proposer, ctx, done = make(one_rtt=True), FakeCtx(), Collector()
        hint = self.warm(proposer, ctx, done)
        assert proposer.cache["k"].next_ballot == hint

    def test_warm_cache_skips_prepare(self):
        proposer, ctx, done = make(one_rtt=True), FakeCtx(), Collector()
        hint = self.warm(proposer, ctx, done)
        proposer.submit("k", Write(b"v2"), done, ctx)
        assert not ctx.take(Prepare)
        accepts = ctx.take(Accept)
        assert accepts[0][1].ballot == hint
        assert accepts[0][1].value == pack_versioned(1, b"v2")

    def test_conflict_falls_back_to_full_round(self):
        proposer, ctx, done = make(one_rtt=True), FakeCtx(), Collector()
        hint = self.warm(proposer, ctx, done)
        proposer.submit("k", Write(b"v2"), done, ctx)
        ctx.take(Accept)
        proposer.handle_message("a1", AcceptConflict("k", hint, Ballot(99, "p2")), ctx)
        assert "k" not in proposer.cache
        assert len(done.outcomes) == 1  # no conflict surfaced to the caller
        prepares = ctx.take(Prepare)
        assert len(prepares) == 3
        assert prepares[0][1].ballot.counter >= 100

    def test_cold_key_delegates_to_full_round(self):
        proposer, ctx, done = make(one_rtt=True), FakeCtx(), Collector()
        proposer.submit("other", Write(b"x"), done, ctx)
        assert len(ctx.take(Prepare)) == 3


class TestSubQuorumMutant:
    def test_acknowledges_below_quorum(self):
        proposer = make(mutations=ProposerMutations(sub_quorum_ack=True))
        ctx, done = FakeCtx(), Collector()
        proposer.submit("k", Write(b"v"), done, ctx)
        prepare, _ = drive_prepare(proposer, ctx, [("a1", None), ("a2", None)])
        proposer.handle_message("a1", Accepted("k", prepare.ballot), ctx)
        assert done.outcomes and done.outcomes[0].kind == OK
