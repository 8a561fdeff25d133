import itertools
import random

import pytest
from hypothesis import given, strategies as st

from caspaxos import core
from caspaxos.core import (
    Ballot,
    CasVersion,
    ConfigError,
    Configuration,
    CounterOverflow,
    EMPTY,
    Identity,
    Init,
    Tombstone,
    Write,
    WriteTombstone,
    ZERO_BALLOT,
    apply_change,
    ballot_next,
    pack_versioned,
    quorum_sets_intersect,
    quorums_intersect,
    unpack_versioned,
)

ballots = st.builds(
    Ballot,
    counter=st.integers(min_value=0, max_value=2**64 - 1),
    proposer_id=st.text(max_size=4),
)


class TestBallotOrder:
    def test_counter_dominates(self):
        assert Ballot(1, "P1") < Ballot(2, "P1")

    def test_id_breaks_ties(self):
        assert Ballot(3, "P1") < Ballot(3, "P2")

    def test_equality(self):
        assert Ballot(5, "P2") == Ballot(5, "P2")

    def test_zero_ballot_is_minimal(self):
        assert ZERO_BALLOT < Ballot(1, "")
        assert ZERO_BALLOT < Ballot(0, "P1")

    @given(ballots, ballots, ballots)
    def test_total_order(self, a, b, c):
        assert (a < b) or (b < a) or a == b
        if a < b and b < c:
            assert a < c
        if a < b:
            assert not b < a

    def test_total_order_bulk(self):
        rng = random.Random(7)
        seen = [
            Ballot(rng.randrange(2**20), f"P{rng.randrange(8)}") for _ in range(300)
        ]
        for a, b in itertools.combinations(seen, 2):
            assert (a < b) + (b < a) + (a == b) == 1


class TestBallotNext:
    def test_max_plus_one(self):
        assert ballot_next(4, Ballot(9, "P9"), "P1") == Ballot(10, "P1")

    def test_local_increment(self):
        assert ballot_next(4, ZERO_BALLOT, "P1") == Ballot(5, "P1")

    def test_always_exceeds_both_inputs(self):
        rng = random.Random(1234)
        for _ in range(100_000):
            current = rng.randrange(2**32)
            observed = Ballot(rng.randrange(2**32), f"P{rng.randrange(4)}")
            nxt = ballot_next(current, observed, "P1")
            assert nxt.counter > current
            assert nxt > observed

    def test_overflow_is_fatal(self):
        with pytest.raises(CounterOverflow):
            ballot_next(2**64 - 1, ZERO_BALLOT, "P1")


def brute_force_intersects(prepare_targets, pq, accept_targets, aq):
    for p in itertools.combinations(sorted(prepare_targets), pq):
        for a in itertools.combinations(sorted(accept_targets), aq):
            if not set(p) & set(a):
                return False
    return True


class TestQuorums:
    def test_three_node_majority(self):
        cfg = Configuration.majority(["a", "b", "c"])
        assert cfg.prepare_quorum == cfg.accept_quorum == 2
        assert quorums_intersect(cfg)

    def test_flexible_two_three_of_four(self):
        cfg = Configuration.majority(["a", "b", "c", "d"]).replace(
            prepare_quorum=2, accept_quorum=3
        )
        assert quorums_intersect(cfg)
        cfg.validate()

    def test_two_two_of_four_rejected(self):
        cfg = Configuration.majority(["a", "b", "c", "d"]).replace(
            prepare_quorum=2, accept_quorum=2
        )
        assert not quorums_intersect(cfg)
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_matches_exhaustive_enumeration(self):
        # every roster size <= 6, every quorum pair, identical target sets
        for n in range(1, 7):
            roster = [f"a{i}" for i in range(n)]
            for pq in range(1, n + 1):
                for aq in range(1, n + 1):
                    expect = brute_force_intersects(roster, pq, roster, aq)
                    got = quorum_sets_intersect(roster, pq, roster, aq)
                    assert got == expect == (pq + aq > n)

    def test_matches_enumeration_on_differing_targets(self):
        rng = random.Random(5)
        universe = [f"a{i}" for i in range(6)]
        for _ in range(300):
            pt = rng.sample(universe, rng.randint(1, 6))
            at = rng.sample(universe, rng.randint(1, 6))
            pq = rng.randint(1, len(pt))
            aq = rng.randint(1, len(at))
            assert quorum_sets_intersect(pt, pq, at, aq) == brute_force_intersects(
                pt, pq, at, aq
            )

    def test_quorum_must_fit_targets(self):
        cfg = Configuration.majority(["a", "b", "c"]).replace(prepare_quorum=4)
        with pytest.raises(ConfigError):
            cfg.validate()


class TestCommands:
    def test_read_of_empty(self):
        assert apply_change(Identity(), EMPTY) == EMPTY
        assert apply_change(Identity(), None) == EMPTY

    def test_init_of_empty(self):
        assert apply_change(Init(b"val0"), EMPTY) == pack_versioned(0, b"val0")

    def test_init_keeps_occupied(self):
        current = pack_versioned(3, b"x")
        assert apply_change(Init(b"val0"), current) == current

    def test_cas_mismatch_keeps_state(self):
        current = pack_versioned(4, b"v")
        assert apply_change(CasVersion(5, b"val1"), current) == current

    def test_cas_match_bumps_version(self):
        current = pack_versioned(5, b"v")
        assert apply_change(CasVersion(5, b"val1"), current) == pack_versioned(6, b"val1")

    def test_write_bumps_version(self):
        assert apply_change(Write(b"a"), EMPTY) == pack_versioned(0, b"a")
        assert apply_change(Write(b"b"), pack_versioned(0, b"a")) == pack_versioned(1, b"b")

    def test_tombstone_carries_epoch(self):
        assert apply_change(WriteTombstone(7), pack_versioned(1, b"x")) == Tombstone(7)

    def test_init_treats_tombstone_as_absent(self):
        assert apply_change(Init(b"v"), Tombstone(3)) == pack_versioned(0, b"v")

    @given(
        st.one_of(
            st.just(EMPTY),
            st.builds(Tombstone, st.integers(min_value=0, max_value=2**32)),
            st.builds(core.Data, st.binary(max_size=20)),
        )
    )
    def test_identity_is_identity_on_every_variant(self, value):
        assert apply_change(Identity(), value) == value

    @given(st.integers(min_value=0, max_value=2**64 - 1), st.binary(max_size=32))
    def test_versioned_roundtrip(self, version, payload):
        assert unpack_versioned(pack_versioned(version, payload)) == (version, payload)

    def test_values_mutually_distinguishable(self):
        variants = [EMPTY, Tombstone(0), core.Data(b"")]
        for a, b in itertools.combinations(variants, 2):
            assert a != b
