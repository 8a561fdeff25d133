import os

import pytest

from caspaxos.core import Ballot, Data, Tombstone
from caspaxos.storage import FileBackend, MemoryBackend, RegisterState, StorageError


def fill(backend):
    backend.put_register("k1", RegisterState(Ballot(3, "p1"), (Ballot(2, "p1"), Data(b"x"))))
    backend.put_register("k2", RegisterState(None, (Ballot(5, "p2"), Tombstone(5))))
    backend.put_min_age("p1", 4)
    backend.put_control("proposer", b"\x01\x02")
    backend.put_register("k1", RegisterState(Ballot(7, "p2"), (Ballot(7, "p2"), Data(b"y"))))
    backend.erase_register("k2")


def assert_filled(snap):
    assert set(snap.registers) == {"k1"}
    state = snap.registers["k1"]
    assert state.promise == Ballot(7, "p2")
    assert state.accepted == (Ballot(7, "p2"), Data(b"y"))
    assert snap.min_ages == {"p1": 4}
    assert snap.control == {"proposer": b"\x01\x02"}


def test_memory_backend_roundtrip():
    backend = MemoryBackend()
    fill(backend)
    assert_filled(backend.load())


def test_memory_backend_injected_failure():
    backend = MemoryBackend()
    backend.fail_writes = True
    with pytest.raises(StorageError):
        backend.put_min_age("p", 1)


def test_file_backend_replay(tmp_path):
    backend = FileBackend(tmp_path, fsync=False)
    fill(backend)
    backend.close()
    assert_filled(FileBackend(tmp_path, fsync=False).load())


def test_file_backend_compaction(tmp_path):
    backend = FileBackend(tmp_path, fsync=False)
    fill(backend)
    backend.compact()
    assert os.path.getsize(os.path.join(tmp_path, "journal.log")) == 0
    assert_filled(backend.load())
    backend.close()
    assert_filled(FileBackend(tmp_path, fsync=False).load())


def test_file_backend_auto_compaction(tmp_path):
    backend = FileBackend(tmp_path, fsync=False, compact_every=10)
    for i in range(25):
        backend.put_min_age("p1", i)
    assert backend._appends < 10
    backend.close()
    assert FileBackend(tmp_path, fsync=False).load().min_ages == {"p1": 24}


def test_torn_tail_record_dropped(tmp_path):
    backend = FileBackend(tmp_path, fsync=False)
    fill(backend)
    backend.close()
    path = os.path.join(tmp_path, "journal.log")
    with open(path, "ab") as fh:
        fh.write(b"\x00\x00\x00\xff\x01\x02")  # length prefix promising more bytes
    assert_filled(FileBackend(tmp_path, fsync=False).load())


def test_control_delete(tmp_path):
    backend = FileBackend(tmp_path, fsync=False)
    backend.put_control("x", b"1")
    backend.put_control("x", None)
    backend.close()
    assert FileBackend(tmp_path, fsync=False).load().control == {}
