"""Scenario harness over the simulator.

Builds topologies of acceptor/proposer actors plus scripted clients,
runs them under a fault profile, and returns the collected client history
and protocol trace for the checkers.  Scenario descriptions are plain
dataclasses, serializable to JSON (see docs/simulation.md), so sweeps are
reproducible from (scenario, seed) alone.
"""

from __future__ import annotations

import dataclasses
import json
import random
from dataclasses import dataclass, field

from . import checker, core
from .acceptor import Acceptor, AcceptorMutations
from .core import CasVersion, Configuration, Identity, Init, Write, WriteTombstone
from .kvstore import GcOptions
from .node import ProposerNode
from .proposer import ACCEPT_CONFLICT, OK, PREPARE_CONFLICT, ProposerMutations, UNAVAILABLE
from .simnet import CrashSpec, FaultProfile, PartitionSpec, SimNet
from .storage import RegisterState


def normalize(value: core.Value | None) -> core.Value | None:
    """Client-visible view: a tombstone reads as the empty value."""
    if isinstance(value, core.Tombstone):
        return core.EMPTY
    return value


@dataclass(frozen=True)
class OpSpec:
    kind: str  # read | write | init | rmw | delete
    key: str
    tag: int


class ClientActor:
    """Issues scripted operations against one proposer, one at a time,
    recording invoke/response pairs (or open outcomes) into the history."""

    def __init__(
        self,
        client_id: str,
        proposer_id: str,
        ops: list[OpSpec],
        history: checker.History,
        *,
        op_timeout: int = 120,
        conflict_retries: int = 3,
        think: int = 1,
        start_at: int = 0,
    ):
        self.client_id = client_id
        self.proposer_id = proposer_id
        self.ops = ops
        self.history = history
        self.op_timeout = op_timeout
        self.conflict_retries = conflict_retries
        self.think = max(1, think)
        self.start_at = start_at
        self._idx = 0
        self._attempts = 0
        self._call_seq = 0
        self._record: checker.OpRecord | None = None
        self._rmw_write_pending = False
        self._rmw_key = ""
        self._rmw_tag = 0

    # -- actor interface ---------------------------------------------------

    def on_start(self, ctx) -> None:
        ctx.set_timer(self.start_at + self.think, ("op",))

    def on_timer(self, token, ctx) -> None:
        if token == ("op",):
            self._launch(ctx)
        elif token[0] == "op_timeout" and token[1] == self._call_seq and self._record is not None:
            rec = self._record
            rec.outcome = checker.OUTCOME_OPEN
            rec.closed_at = ctx.now()
            self._record = None
            self._advance(ctx)

    def handle(self, frm, msg, ctx) -> None:
        if (
            not isinstance(msg, core.ClientReply)
            or self._record is None
            or msg.op_id != self._call_seq
        ):
            return
        rec = self._record
        self._record = None
        rec.closed_at = ctx.now()
        if msg.kind == OK:
            rec.outcome = checker.OUTCOME_OK
            rec.response = ctx.now()
            rec.result = normalize(msg.value)
            if self._rmw_write_pending:
                self._rmw_write_pending = False
                self._send_rmw_write(rec.result, ctx)
                return
        elif msg.kind == PREPARE_CONFLICT:
            rec.outcome = checker.OUTCOME_NOOP
            self._rmw_write_pending = False
            if self._attempts < self.conflict_retries:
                self._attempts += 1
                self._idx -= 1  # retry the same spec as a fresh attempt
        else:  # accept_conflict / unavailable: outcome unknown
            rec.outcome = checker.OUTCOME_OPEN
            self._rmw_write_pending = False
        self._advance(ctx)

    # -- op machinery ---------------------------------------------------------

    def _advance(self, ctx) -> None:
        ctx.set_timer(self.think, ("op",))

    def _payload(self, spec_tag: int) -> bytes:
        return f"{self.client_id}#{spec_tag}".encode()

    def _launch(self, ctx) -> None:
        if self._record is not None or self._idx >= len(self.ops):
            return
        spec = self.ops[self._idx]
        self._idx += 1
        if spec.kind == "read":
            self._call(spec.key, Identity(), ctx)
        elif spec.kind == "write":
            self._call(spec.key, Write(self._payload(spec.tag)), ctx)
        elif spec.kind == "init":
            self._call(spec.key, Init(self._payload(spec.tag)), ctx)
        elif spec.kind == "rmw":
            self._rmw_write_pending = True
            self._rmw_tag = spec.tag
            self._rmw_key = spec.key
            self._call(spec.key, Identity(), ctx)
        elif spec.kind == "delete":
            self._call(spec.key, None, ctx, delete=True)
        else:
            raise ValueError(f"unknown op kind {spec.kind}")

    def _send_rmw_write(self, current: core.Value | None, ctx) -> None:
        payload = self._payload(self._rmw_tag)
        versioned = core.unpack_versioned(current)
        if versioned is None:
            self._call(self._rmw_key, Init(payload), ctx)
        else:
            self._call(self._rmw_key, CasVersion(versioned[0], payload), ctx)

    def _call(self, key: str, command, ctx, *, delete: bool = False) -> None:
        self._call_seq += 1
        recorded = WriteTombstone(0) if delete else command
        self._record = self.history.invoke(self.client_id, key, recorded, ctx.now())
        if delete:
            ctx.send(self.proposer_id, core.ClientDelete(self._call_seq, key))
        else:
            ctx.send(self.proposer_id, core.ClientChange(self._call_seq, key, command))
        ctx.set_timer(self.op_timeout, ("op_timeout", self._call_seq))


def client_apply(command: core.Command, state: core.Value) -> core.Value:
    """Register semantics over the client-visible value space (no tombstones)."""
    if isinstance(command, WriteTombstone):
        return core.EMPTY
    return core.apply_change(command, state)


# ---------------------------------------------------------------------------
# Scenarios


@dataclass
class Scenario:
    seed: int = 0
    acceptors: int = 3
    proposers: int = 2
    clients_per_proposer: int = 1
    ops_per_client: int = 10
    keys: int = 2
    prepare_quorum: int | None = None
    accept_quorum: int | None = None
    one_rtt: bool = False
    mix: tuple = (("rmw", 5), ("write", 2), ("read", 2), ("delete", 1))
    drop: float = 0.0
    duplicate: float = 0.0
    delay_min: int = 1
    delay_max: int = 3
    crashes: tuple = ()  # (node, at, restart_at)
    partitions: tuple = ()  # (start, end, left nodes, right nodes)
    horizon: int = 20_000
    phase_timeout: int = 40
    op_timeout: int = 120
    think: int = 1
    gc_interval: int = 12
    gc_naive: bool = False
    gc_skip_invalidate: bool = False
    gc_skip_age_raise: bool = False
    acceptor_bugs: tuple = ()  # subset of {"accept_below_promise", "volatile_promise"}
    proposer_bugs: tuple = ()  # subset of {"sub_quorum_ack", "pick_lowest_ballot"}

    def acceptor_names(self) -> list[str]:
        return [f"a{i+1}" for i in range(self.acceptors)]

    def proposer_names(self) -> list[str]:
        return [f"p{i+1}" for i in range(self.proposers)]

    def configuration(self) -> Configuration:
        cfg = Configuration.majority(self.acceptor_names())
        if self.prepare_quorum is not None:
            cfg = cfg.replace(prepare_quorum=self.prepare_quorum)
        if self.accept_quorum is not None:
            cfg = cfg.replace(accept_quorum=self.accept_quorum)
        cfg.validate()
        return cfg


def scenario_to_json(scenario: Scenario) -> str:
    return json.dumps(dataclasses.asdict(scenario), indent=2, default=list)


def scenario_from_json(text: str) -> Scenario:
    obj = json.loads(text)
    fields = {f.name for f in dataclasses.fields(Scenario)}
    unknown = set(obj) - fields
    if unknown:
        raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
    for name in ("mix", "crashes", "partitions", "acceptor_bugs", "proposer_bugs"):
        if name in obj:
            obj[name] = tuple(tuple(x) if isinstance(x, list) else x for x in obj[name])
    return Scenario(**obj)


@dataclass
class RunReport:
    scenario: Scenario
    net: SimNet
    history: checker.History

    @property
    def trace(self):
        return self.net.trace

    def final_registers(self) -> dict[str, dict[str, RegisterState]]:
        out = {}
        for name in self.scenario.acceptor_names():
            if name in self.net.nodes:
                out[name] = self.net.backend_of(name).load().registers
        return out


def _generate_ops(scenario: Scenario, client_index: int) -> list[OpSpec]:
    rng = random.Random((scenario.seed << 20) ^ (client_index * 7919 + 1))
    kinds = [k for k, _ in scenario.mix]
    weights = [w for _, w in scenario.mix]
    ops = []
    for i in range(scenario.ops_per_client):
        kind = rng.choices(kinds, weights=weights)[0]
        key = f"k{rng.randrange(scenario.keys)}"
        ops.append(OpSpec(kind, key, client_index * 10_000 + i))
    return ops


def build(scenario: Scenario, *, record_events: bool = False) -> tuple[SimNet, checker.History]:
    cfg = scenario.configuration()
    profile = FaultProfile(
        drop=scenario.drop,
        duplicate=scenario.duplicate,
        delay_min=scenario.delay_min,
        delay_max=scenario.delay_max,
        partitions=tuple(
            PartitionSpec(start, end, tuple(left), tuple(right))
            for start, end, left, right in scenario.partitions
        ),
        crashes=tuple(CrashSpec(node, at, restart_at) for node, at, restart_at in scenario.crashes),
        seed=scenario.seed,
    )
    net = SimNet(profile, record_events=record_events)
    history = checker.History()

    acceptor_mut = AcceptorMutations(
        accept_below_promise="accept_below_promise" in scenario.acceptor_bugs,
        volatile_promise="volatile_promise" in scenario.acceptor_bugs,
    )
    proposer_mut = ProposerMutations(
        sub_quorum_ack="sub_quorum_ack" in scenario.proposer_bugs,
        pick_lowest_ballot="pick_lowest_ballot" in scenario.proposer_bugs,
    )
    gc_options = GcOptions(
        interval=scenario.gc_interval,
        naive=scenario.gc_naive,
        skip_invalidate=scenario.gc_skip_invalidate,
        skip_age_raise=scenario.gc_skip_age_raise,
    )
    roster = tuple(scenario.proposer_names())

    for name in scenario.acceptor_names():
        net.add_node(
            name,
            lambda be, sink, _n=name: Acceptor(_n, be, mutations=acceptor_mut, trace_sink=sink),
        )
    for name in scenario.proposer_names():
        net.add_node(
            name,
            lambda be, sink, _n=name: ProposerNode(
                _n,
                cfg,
                be,
                one_rtt=scenario.one_rtt,
                phase_timeout=scenario.phase_timeout,
                proposer_roster=roster,
                gc_options=gc_options,
                mutations=proposer_mut,
                trace_sink=sink,
            ),
        )
    client_index = 0
    for pname in scenario.proposer_names():
        for _ in range(scenario.clients_per_proposer):
            client_index += 1
            cname = f"c{client_index}"
            ops = _generate_ops(scenario, client_index)
            net.add_node(
                cname,
                lambda be, sink, _c=cname, _p=pname, _ops=ops, _s=client_index % 3: ClientActor(
                    _c,
                    _p,
                    _ops,
                    history,
                    op_timeout=scenario.op_timeout,
                    think=scenario.think,
                    start_at=_s,
                ),
            )
    return net, history


def run_scenario(scenario: Scenario, *, record_events: bool = False) -> RunReport:
    net, history = build(scenario, record_events=record_events)
    net.run(scenario.horizon)
    return RunReport(scenario, net, history)


def check_run(report: RunReport, *, expect_quorum_overlap: bool = True, budget: int = 2_000_000) -> list[str]:
    """All verdicts for one run; empty list means clean."""
    problems: list[str] = []
    for key, result in checker.check_history(
        report.history, apply_fn=client_apply, budget=budget
    ).items():
        if result.status == "violation":
            problems.append(f"linearizability violation on {key}: prefix {result.failing_prefix}")
        elif result.status == "inconclusive":
            problems.append(f"linearizability inconclusive on {key}")
    order = checker.check_descendant_total_order(report.trace)
    step = checker.check_chain_step(report.trace, expect_quorum_overlap=expect_quorum_overlap)
    lifetimes = checker.check_register_lifetimes(report.trace)
    for rep, label in ((order, "descendant order"), (step, "chain step"), (lifetimes, "register lifetime")):
        problems.extend(f"{label}: {v}" for v in rep.violations)
        problems.extend(f"{label} integrity: {v}" for v in rep.integrity)
    return problems


def sweep_one(args) -> tuple[int, list[str]]:
    """One seeded safety-sweep run (top-level so process pools can use it)."""
    seed, overrides = args
    scenario = Scenario(seed=seed, **overrides)
    report = run_scenario(scenario)
    return seed, check_run(report)


# ---------------------------------------------------------------------------
# Availability measurements


def halted_ticks(records, start: int, end: int, stall_after: int, horizon: int) -> int:
    """Ticks inside [start, end) during which a request older than
    stall_after was still unanswered."""
    total = 0
    for rec in records:
        closed = rec.closed_at if rec.closed_at is not None else horizon
        lo = max(rec.invoke + stall_after, start)
        hi = min(closed, end)
        if hi > lo:
            total += hi - lo
    return total


@dataclass
class AvailabilityReport:
    halted: dict[str, int]
    ok_responses_in_window: dict[str, int]
    window: tuple[int, int]


def availability_run(
    *,
    isolate_node: str,
    acceptors: int = 3,
    proposers: int = 3,
    window: tuple[int, int] = (400, 1600),
    horizon: int = 2600,
    stall_after: int = 30,
    extra_isolated: tuple[str, ...] = (),
    seed: int = 0,
) -> AvailabilityReport:
    scenario = Scenario(
        seed=seed,
        acceptors=acceptors,
        proposers=proposers,
        clients_per_proposer=1,
        ops_per_client=400,
        keys=max(proposers, 2),
        mix=(("write", 1),),
        delay_min=1,
        delay_max=1,
        horizon=horizon,
        phase_timeout=40,
        op_timeout=150,
        think=1,
    )
    net, history = build(scenario)
    isolated = (isolate_node,) + extra_isolated
    others = tuple(n for n in sorted(net.nodes) if n not in isolated)
    net.schedule_partition(PartitionSpec(window[0], window[1], isolated, others))
    net.run(horizon)

    by_client: dict[str, list] = {}
    for rec in history.records:
        by_client.setdefault(rec.client, []).append(rec)
    halted = {
        client: halted_ticks(records, window[0], window[1], stall_after, horizon)
        for client, records in sorted(by_client.items())
    }
    ok_in_window = {
        client: sum(
            1 for r in records if r.response is not None and window[0] <= r.response < window[1]
        )
        for client, records in sorted(by_client.items())
    }
    return AvailabilityReport(halted, ok_in_window, window)


def client_of(proposer: str) -> str:
    """Map p<i> to its attached client c<i> in harness-built topologies."""
    return f"c{proposer[1:]}"


# ---------------------------------------------------------------------------
# Wide-area latency model (0.1 ms ticks)

TICKS_PER_MS = 10


def latency_model_run(
    sites: tuple[str, ...],
    rtt_ms: dict[tuple[str, str], float],
    *,
    mode: str = "leaderless",
    leader: str | None = None,
    iterations: int = 10,
) -> dict[str, float]:
    """Average read-modify-write latency per site under a link-delay matrix.

    Leaderless mode runs the actual protocol in the simulator: one change
    per iteration, two phases, each waiting on the second-fastest quorum
    confirmation.  Forced-leader mode models a leader-based store for
    comparison: the iteration is a read plus a write, each forwarded to the
    leader and replicated once from there.
    """

    def rtt(a: str, b: str) -> float:
        if a == b:
            return 0.0
        return rtt_ms[(a, b)] if (a, b) in rtt_ms else rtt_ms[(b, a)]

    if mode == "forced_leader":
        if leader is None:
            raise ValueError("forced_leader mode needs a leader site")
        out = {}
        for site in sites:
            replication = sorted(rtt(leader, other) for other in sites)[len(sites) // 2]
            out[site] = 2 * (rtt(site, leader) + replication)
        return out
    if mode != "leaderless":
        raise ValueError(f"unknown mode {mode}")

    cfg = Configuration.majority([f"acc-{s}" for s in sites])
    net = SimNet(FaultProfile(delay_min=0, delay_max=0))
    history = checker.History()

    def delay_fn(src: str, dst: str) -> int:
        a = src.split("-", 1)[-1]
        b = dst.split("-", 1)[-1]
        return int(round(rtt(a, b) * TICKS_PER_MS / 2))

    net.delay_fn = delay_fn
    for site in sites:
        net.add_node(
            f"acc-{site}",
            lambda be, sink, _n=f"acc-{site}": Acceptor(_n, be, trace_sink=sink),
        )
    for site in sites:
        net.add_node(
            f"prop-{site}",
            lambda be, sink, _n=f"prop-{site}": ProposerNode(
                _n, cfg, be, phase_timeout=100_000, proposer_roster=tuple(f"prop-{s}" for s in sites)
            ),
        )
    for site in sites:
        ops = [OpSpec("write", f"key-{site}", i) for i in range(iterations)]
        net.add_node(
            f"cli-{site}",
            lambda be, sink, _c=f"cli-{site}", _p=f"prop-{site}", _ops=ops: ClientActor(
                _c, _p, _ops, history, op_timeout=200_000, think=1
            ),
        )
    net.run(10_000_000)
    out = {}
    for site in sites:
        client = f"cli-{site}"
        latencies = [
            (r.response - r.invoke)
            for r in history.records
            if r.client == client and r.response is not None
        ]
        if len(latencies) != iterations:
            raise RuntimeError(f"latency run incomplete for {site}: {len(latencies)} ops")
        out[site] = sum(latencies) / len(latencies) / TICKS_PER_MS
    return out
