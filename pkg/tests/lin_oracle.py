"""Exhaustive-permutation linearizability oracle.

Deliberately independent of the package's search-based checker: it models
register states as plain (version, payload) tuples with its own command
semantics, enumerates every subset of unknown-outcome operations and every
permutation respecting real-time order, and threads states explicitly.
Only practical for histories of ~7 operations or fewer.
"""

import itertools

from caspaxos import core


def to_model(value):
    """Client-visible value -> None | (version, payload)."""
    if value is None or isinstance(value, (core.Empty, core.Tombstone)):
        return None
    payload = value.payload
    return int.from_bytes(payload[:8], "big"), payload[8:]


def model_apply(command, state):
    if isinstance(command, core.Identity):
        return state
    if isinstance(command, core.Init):
        return state if state is not None else (0, command.payload)
    if isinstance(command, core.Write):
        return (0, command.payload) if state is None else (state[0] + 1, command.payload)
    if isinstance(command, core.CasVersion):
        if state is not None and state[0] == command.expected_version:
            return (command.expected_version + 1, command.payload)
        return state
    if isinstance(command, core.WriteTombstone):
        return None
    raise TypeError(f"unknown command {command!r}")


def _order_respects_time(order):
    for i, a in enumerate(order):
        for b in order[i + 1 :]:
            if b.response is not None and b.response < a.invoke:
                return False
    return True


def _check_order(order):
    state = None
    for op in order:
        state = model_apply(op.command, state)
        if op.outcome == "ok" and to_model(op.result) != state:
            return False
    return True


def oracle_linearizable(records) -> bool:
    ops = [r for r in records if r.outcome != "noop"]
    completed = [r for r in ops if r.outcome == "ok"]
    opens = [r for r in ops if r.outcome == "open"]
    for k in range(len(opens) + 1):
        for included in itertools.combinations(opens, k):
            for order in itertools.permutations(completed + list(included)):
                if _order_respects_time(order) and _check_order(order):
                    return True
    return False


def random_history(rng, n_ops, *, clients=3, keyspace=1, corrupt_rate=0.35):
    """Plausible concurrent history over a two-value register; a fraction of
    histories get one result corrupted so both verdicts occur."""
    from caspaxos.checker import History, OUTCOME_OK, OUTCOME_OPEN

    history = History()
    clocks = {f"c{i}": rng.randrange(3) for i in range(clients)}
    records = []
    for _ in range(n_ops):
        client = f"c{rng.randrange(clients)}"
        key = f"k{rng.randrange(keyspace)}"
        roll = rng.random()
        if roll < 0.45:
            command = core.Write(rng.choice([b"0", b"1"]))
        elif roll < 0.8:
            command = core.Identity()
        else:
            command = core.Init(rng.choice([b"0", b"1"]))
        invoke = clocks[client] + rng.randrange(1, 4)
        duration = rng.randrange(1, 8)
        rec = history.invoke(client, key, command, invoke)
        rec.response = invoke + duration
        rec.outcome = OUTCOME_OK
        clocks[client] = rec.response + rng.randrange(0, 3)
        records.append(rec)
    # choose linearization points inside each interval, thread the states
    points = {rec.op_seq: rng.uniform(rec.invoke, rec.response) for rec in records}
    state = None
    for rec in sorted(records, key=lambda r: points[r.op_seq]):
        state = model_apply(rec.command, state)
        if state is None:
            rec.result = core.EMPTY
        else:
            rec.result = core.pack_versioned(state[0], state[1])
    for rec in records:
        if rng.random() < 0.12:
            rec.outcome = OUTCOME_OPEN
            rec.response = None
            rec.result = None
    if rng.random() < corrupt_rate and records:
        victim = rng.choice(records)
        victim.outcome = OUTCOME_OK
        if victim.response is None:
            victim.response = victim.invoke + rng.randrange(1, 5)
        victim.result = rng.choice(
            [core.EMPTY, core.pack_versioned(rng.randrange(4), rng.choice([b"0", b"1"]))]
        )
    return records
