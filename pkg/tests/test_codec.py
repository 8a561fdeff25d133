import pytest
from hypothesis import given, settings, strategies as st

from caspaxos import codec, core
from caspaxos.core import Ballot

ballots = st.builds(
    Ballot,
    counter=st.integers(min_value=0, max_value=2**64 - 1),
    proposer_id=st.text(max_size=6),
)
values = st.one_of(
    st.just(core.EMPTY),
    st.builds(core.Tombstone, st.integers(min_value=0, max_value=2**64 - 1)),
    st.builds(core.Data, st.binary(max_size=64)),
)
commands = st.one_of(
    st.just(core.Identity()),
    st.builds(core.Init, st.binary(max_size=32)),
    st.builds(core.Write, st.binary(max_size=32)),
    st.builds(core.CasVersion, st.integers(min_value=0, max_value=2**32), st.binary(max_size=32)),
    st.builds(core.WriteTombstone, st.integers(min_value=0, max_value=2**32)),
)
keys = st.text(max_size=12)
ages = st.integers(min_value=0, max_value=2**64 - 1)
accepted = st.one_of(st.none(), st.tuples(ballots, values))
str_tuples = st.lists(st.text(max_size=6), max_size=4).map(tuple)

messages = st.one_of(
    st.builds(core.Prepare, keys, ballots, ages),
    st.builds(core.Promise, keys, ballots, accepted),
    st.builds(core.PrepareConflict, keys, ballots, ballots),
    st.builds(core.Accept, keys, ballots, values, st.one_of(st.none(), ballots), ages),
    st.builds(core.Accepted, keys, ballots),
    st.builds(core.AcceptConflict, keys, ballots, ballots),
    st.builds(core.AgeRejected, keys, ballots, ages),
    st.builds(core.SetMinAge, keys, ages),
    st.builds(core.MinAgeAck, keys, ages),
    st.builds(core.EraseKey, keys, ages),
    st.builds(core.EraseReply, keys, ages, st.booleans()),
    st.builds(core.InvalidateCache, keys, ballots, ages),
    st.builds(core.InvalidateAck, keys, ages),
    st.builds(
        core.ConfigUpdate,
        st.one_of(st.none(), str_tuples),
        st.one_of(st.none(), str_tuples),
        st.one_of(st.none(), str_tuples),
        st.one_of(st.none(), st.integers(min_value=0, max_value=16)),
        st.one_of(st.none(), st.integers(min_value=0, max_value=16)),
    ),
    st.just(core.ConfigAck()),
    st.builds(core.RosterUpdate, str_tuples),
    st.just(core.RosterAck()),
    st.builds(core.RescanRequest, str_tuples),
    st.builds(core.RescanReport, ages, str_tuples),
    st.just(core.DumpRegisters()),
    st.just(core.DumpDigest()),
    st.builds(core.DigestReply, st.lists(st.tuples(keys, ballots), max_size=4).map(tuple)),
    st.builds(core.FetchRegisters, str_tuples),
    st.builds(
        core.RegisterDump, st.lists(st.tuples(keys, ballots, values), max_size=4).map(tuple)
    ),
    st.builds(core.LoadRegister, keys, ballots, values),
    st.builds(core.LoadAck, keys),
    st.just(core.StatusRequest()),
    st.builds(
        core.StatusReply,
        st.integers(min_value=0, max_value=2**32),
        st.lists(st.tuples(keys, ages), max_size=4).map(tuple),
        st.lists(st.tuples(keys, ages), max_size=4).map(tuple),
    ),
    st.builds(core.ClientChange, ages, keys, commands),
    st.builds(core.ClientDelete, ages, keys),
    st.builds(
        core.ClientReply,
        ages,
        st.sampled_from(["ok", "prepare_conflict", "accept_conflict", "unavailable"]),
        st.one_of(st.none(), values),
        st.one_of(st.none(), ballots),
    ),
    st.builds(core.ErrorReply, st.text(max_size=8), st.text(max_size=16)),
)


@settings(max_examples=400)
@given(messages)
def test_roundtrip_is_identity(msg):
    assert codec.decode_message(codec.encode_message(msg)) == msg


@given(ballots)
def test_ballot_roundtrip(ballot):
    w = codec.Writer()
    codec.write_ballot(w, ballot)
    assert codec.read_ballot(codec.Reader(w.getvalue())) == ballot


@given(values)
def test_value_roundtrip(value):
    w = codec.Writer()
    codec.write_value(w, value)
    assert codec.read_value(codec.Reader(w.getvalue())) == value


def test_unknown_tag_rejected():
    with pytest.raises(codec.DecodeError):
        codec.decode_message(b"\xfe")


def test_trailing_bytes_rejected():
    data = codec.encode_message(core.Accepted("k", Ballot(1, "p"))) + b"\x00"
    with pytest.raises(codec.DecodeError):
        codec.decode_message(data)


def test_truncation_rejected():
    data = codec.encode_message(core.Prepare("key", Ballot(3, "p1"), 2))
    for cut in range(1, len(data)):
        with pytest.raises(codec.DecodeError):
            codec.decode_message(data[:cut])


def test_bad_bool_rejected():
    with pytest.raises(codec.DecodeError):
        codec.Reader(b"\x02").bool_()
