"""Cluster membership change via overlapping configurations.

Roster changes roll out one small step at a time: turn nodes on or off,
push partial configuration updates to every proposer, and re-place data
with either a cluster-wide identity rescan or a snapshot catch-up into
the new acceptor.  Every adjacent pair of configurations a plan can leave
simultaneously installed on two proposers must keep the quorum
intersection property in both directions; plan builders refuse anything
else.

Growing an odd cluster raises the accept quorum before the rescan and
the prepare quorum after it; run in reverse, the same steps shrink an
even cluster.  Growing an even cluster just widens both target sets and
turns the new acceptor on: it behaves like an odd cluster whose last
node had been down from the start -- which is only sound if the even
cluster's placement was already valid at the larger quorum, hence the
mandatory rescan (or catch-up) when the even size was reached from
below.  Skipping it lets empty acceptors displace live data; a test
reproduces that loss.

Proposers can be added or removed at any time; only the GC fan-out
roster and this controller's own roster must be updated in the right
order, and both updates are idempotent.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import codec
from .core import (
    Ballot,
    ConfigError,
    ConfigUpdate,
    Configuration,
    configs_jointly_safe,
)
from .storage import RegisterState


# ---------------------------------------------------------------------------
# Plan steps


@dataclass(frozen=True)
class UpdateProposerConfig:
    proposer: str
    update: ConfigUpdate


@dataclass(frozen=True)
class TurnOnAcceptor:
    acceptor: str


@dataclass(frozen=True)
class TurnOffAcceptor:
    acceptor: str


@dataclass(frozen=True)
class Rescan:
    via_proposer: str


@dataclass(frozen=True)
class CatchUp:
    new_acceptor: str
    sources: tuple[str, ...]


@dataclass
class TransitionPlan:
    from_cfg: Configuration
    to_cfg: Configuration
    steps: tuple = ()
    completed_through: int = -1


def _full_update(cfg: Configuration) -> ConfigUpdate:
    return ConfigUpdate(
        cfg.acceptors,
        cfg.prepare_targets,
        cfg.accept_targets,
        cfg.prepare_quorum,
        cfg.accept_quorum,
    )


def validate_plan(plan: TransitionPlan) -> None:
    """Reject a plan unless every step boundary keeps all concurrently held
    configuration pairs mutually quorum-intersecting."""
    current = plan.from_cfg
    current.validate()
    for step in plan.steps:
        if isinstance(step, UpdateProposerConfig):
            nxt = step.update.apply_to(current)
            nxt.validate()
            if not configs_jointly_safe(current, nxt):
                raise ConfigError(
                    f"unsafe transition: {current} -> {nxt} lose quorum intersection"
                )
            current = nxt
    if current != plan.to_cfg:
        raise ConfigError(f"plan ends at {current}, declared {plan.to_cfg}")


# ---------------------------------------------------------------------------
# Plan builders


def _fault_tolerance(n: int) -> int:
    return (n - 1) // 2


def expand_odd_to_even(
    cfg: Configuration,
    new_acceptor: str,
    proposers: tuple[str, ...],
    *,
    rescan_via: str,
    use_catch_up: bool = False,
    include_rescan: bool = True,
) -> TransitionPlan:
    """2F+1 -> 2F+2: accept quorum rises to F+2 before data is re-placed,
    the prepare quorum only afterwards.  `include_rescan=False` builds the
    known-unsafe variant used to demonstrate data loss."""
    n = len(cfg.acceptors)
    if n % 2 == 0:
        raise ConfigError("expand_odd_to_even needs an odd roster")
    f = _fault_tolerance(n)
    if cfg.prepare_quorum != f + 1 or cfg.accept_quorum != f + 1:
        raise ConfigError("expected the symmetric majority configuration")
    if new_acceptor in cfg.acceptors:
        raise ConfigError(f"{new_acceptor} already in the roster")
    wide = tuple(sorted(cfg.acceptors + (new_acceptor,)))
    steps: list = [TurnOnAcceptor(new_acceptor)]
    accept_raise = ConfigUpdate(wide, None, wide, None, f + 2)
    steps += [UpdateProposerConfig(p, accept_raise) for p in proposers]
    if include_rescan:
        if use_catch_up:
            majority = tuple(sorted(cfg.acceptors))[: f + 1]
            steps.append(CatchUp(new_acceptor, majority))
        else:
            steps.append(Rescan(rescan_via))
    prepare_raise = ConfigUpdate(None, wide, None, f + 2, None)
    steps += [UpdateProposerConfig(p, prepare_raise) for p in proposers]
    to_cfg = Configuration(wide, wide, wide, f + 2, f + 2)
    plan = TransitionPlan(cfg, to_cfg, tuple(steps))
    validate_plan(plan)
    return plan


def shrink_even_to_odd(
    cfg: Configuration,
    remove_acceptor: str,
    proposers: tuple[str, ...],
    *,
    rescan_via: str,
) -> TransitionPlan:
    """2F+2 -> 2F+1: the growth steps executed in reverse order."""
    n = len(cfg.acceptors)
    if n % 2 != 0:
        raise ConfigError("shrink_even_to_odd needs an even roster")
    f = n // 2 - 1
    if cfg.prepare_quorum != f + 2 or cfg.accept_quorum != f + 2:
        raise ConfigError("expected the F+2/F+2 even configuration")
    if remove_acceptor not in cfg.acceptors:
        raise ConfigError(f"{remove_acceptor} not in the roster")
    narrow = tuple(sorted(a for a in cfg.acceptors if a != remove_acceptor))
    steps: list = []
    prepare_drop = ConfigUpdate(None, narrow, None, f + 1, None)
    steps += [UpdateProposerConfig(p, prepare_drop) for p in proposers]
    steps.append(Rescan(rescan_via))
    accept_drop = ConfigUpdate(narrow, None, narrow, None, f + 1)
    steps += [UpdateProposerConfig(p, accept_drop) for p in proposers]
    steps.append(TurnOffAcceptor(remove_acceptor))
    to_cfg = Configuration.majority(narrow)
    plan = TransitionPlan(cfg, to_cfg, tuple(steps))
    validate_plan(plan)
    return plan


def expand_even_to_odd(
    cfg: Configuration,
    new_acceptor: str,
    proposers: tuple[str, ...],
) -> TransitionPlan:
    """2F+2 -> 2F+3: widen both target sets, then power the new acceptor on;
    quorum sizes stay F+2, the standard majority of the larger roster.

    Requires the even cluster to already run F+2/F+2: with a smaller
    prepare quorum the widened target sets would admit disjoint quorums
    and an empty acceptor could outvote acknowledged data.
    """
    n = len(cfg.acceptors)
    if n % 2 != 0:
        raise ConfigError("expand_even_to_odd needs an even roster")
    f = n // 2 - 1
    if new_acceptor in cfg.acceptors:
        raise ConfigError(f"{new_acceptor} already in the roster")
    wide = tuple(sorted(cfg.acceptors + (new_acceptor,)))
    steps: list = []
    base = cfg
    if cfg.prepare_quorum == f + 1 and cfg.accept_quorum == f + 2:
        # Mid-growth configuration: finish the prepare-quorum raise first.
        raise_prepare = ConfigUpdate(None, cfg.acceptors, None, f + 2, None)
        steps += [UpdateProposerConfig(p, raise_prepare) for p in proposers]
        base = raise_prepare.apply_to(cfg)
    if base.prepare_quorum != f + 2 or base.accept_quorum != f + 2:
        raise ConfigError("expected the F+2/F+2 even configuration")
    widen = ConfigUpdate(wide, wide, wide, None, None)
    steps += [UpdateProposerConfig(p, widen) for p in proposers]
    steps.append(TurnOnAcceptor(new_acceptor))
    to_cfg = Configuration.majority(wide)
    plan = TransitionPlan(cfg, to_cfg, tuple(steps))
    validate_plan(plan)
    return plan


def shrink_odd_to_even(
    cfg: Configuration,
    remove_acceptor: str,
    proposers: tuple[str, ...],
) -> TransitionPlan:
    """2F+3 -> 2F+2: power off first, then narrow both target sets."""
    n = len(cfg.acceptors)
    if n % 2 == 0:
        raise ConfigError("shrink_odd_to_even needs an odd roster")
    f = _fault_tolerance(n) - 1
    if cfg.prepare_quorum != f + 2 or cfg.accept_quorum != f + 2:
        raise ConfigError("expected the symmetric majority configuration")
    if remove_acceptor not in cfg.acceptors:
        raise ConfigError(f"{remove_acceptor} not in the roster")
    narrow = tuple(sorted(a for a in cfg.acceptors if a != remove_acceptor))
    steps: list = [TurnOffAcceptor(remove_acceptor)]
    shrink = ConfigUpdate(narrow, narrow, narrow, None, None)
    steps += [UpdateProposerConfig(p, shrink) for p in proposers]
    to_cfg = Configuration(narrow, narrow, narrow, f + 2, f + 2)
    plan = TransitionPlan(cfg, to_cfg, tuple(steps))
    validate_plan(plan)
    return plan


# ---------------------------------------------------------------------------
# Proposer roster changes


def remove_proposer_steps(proposer: str) -> tuple[str, ...]:
    """Ordered, idempotent actions: power off, then update the GC fan-out
    roster, then this controller's roster."""
    return (
        f"turn_off:{proposer}",
        f"update_gc_roster:-{proposer}",
        f"update_controller_roster:-{proposer}",
    )


def add_proposer_steps(proposer: str) -> tuple[str, ...]:
    return (
        f"update_controller_roster:+{proposer}",
        f"update_gc_roster:+{proposer}",
        f"turn_on:{proposer}",
    )


# ---------------------------------------------------------------------------
# State audits


def top_states(
    registers: dict[str, dict[str, RegisterState]],
    acceptors,
) -> dict[str, tuple[Ballot, object, int]]:
    """Per key: (highest accepted ballot, its value, replica count at it)."""
    out: dict[str, tuple[Ballot, object, int]] = {}
    for acceptor in acceptors:
        for key, state in registers.get(acceptor, {}).items():
            if state.accepted is None:
                continue
            ballot, value = state.accepted
            best = out.get(key)
            if best is None or ballot > best[0]:
                out[key] = (ballot, value, 1)
            elif ballot == best[0]:
                out[key] = (ballot, value, best[2] + 1)
    return out


def placement_issues(
    registers: dict[str, dict[str, RegisterState]],
    cfg: Configuration,
) -> list[str]:
    """Keys whose top-ballot value has fewer than accept-quorum replicas."""
    issues = []
    for key, (ballot, _value, count) in sorted(top_states(registers, cfg.acceptors).items()):
        if count < cfg.accept_quorum:
            issues.append(f"{key}: top ballot {ballot} on {count} < {cfg.accept_quorum} nodes")
    return issues


# ---------------------------------------------------------------------------
# Simulated controller


_CURSOR = "membership_cursor"


class MembershipController:
    """Drives transition plans step by step over admin messages.

    The completed-step cursor is durable; after a crash the controller
    resumes at the persisted step and re-executes it, which every step
    tolerates (config updates, rescans, dumps and loads are idempotent).
    """

    def __init__(
        self,
        node_id: str,
        backend,
        plans: list[TransitionPlan],
        *,
        rescan_keys: tuple[str, ...] = (),
        retry: int = 40,
        synced_keys: dict[str, Ballot] | None = None,
        trace_sink=None,
    ):
        for plan in plans:
            validate_plan(plan)
        self.node_id = node_id
        self.backend = backend
        self.plans = plans
        self.rescan_keys = rescan_keys
        self.retry = retry
        self.synced_keys = synced_keys
        self.rescan_moves = 0
        self.catchup_moves = 0
        self.finished = False
        self._await: dict | None = None
        snap = backend.load()
        self.plan_index, self.step_index = 0, 0
        if _CURSOR in snap.control:
            r = codec.Reader(snap.control[_CURSOR])
            self.plan_index, self.step_index = r.u32(), r.u32()

    # -- actor interface -----------------------------------------------------

    def on_start(self, ctx) -> None:
        ctx.set_timer(1, ("plan",))

    def on_timer(self, token, ctx) -> None:
        if token == ("plan",):
            self._drive(ctx)
            if not self.finished:
                ctx.set_timer(self.retry, ("plan",))

    def handle(self, frm, msg, ctx) -> None:
        from . import core

        waiting = self._await
        if waiting is None:
            return
        kind = waiting["kind"]
        if kind == "config" and isinstance(msg, core.ConfigAck) and frm == waiting["proposer"]:
            self._complete_step(ctx)
        elif kind == "rescan" and isinstance(msg, core.RescanReport) and frm == waiting["proposer"]:
            self.rescan_moves += msg.record_moves
            if msg.unfinished:
                waiting["keys"] = msg.unfinished
                ctx.send(frm, core.RescanRequest(msg.unfinished))
            else:
                self._complete_step(ctx)
        elif kind == "catchup":
            self._catchup_message(frm, msg, ctx)

    # -- step driving -------------------------------------------------------------

    def _current_step(self):
        while self.plan_index < len(self.plans):
            plan = self.plans[self.plan_index]
            if self.step_index < len(plan.steps):
                return plan.steps[self.step_index]
            self.plan_index += 1
            self.step_index = 0
            self._persist_cursor()
        return None

    def _persist_cursor(self) -> None:
        w = codec.Writer()
        w.u32(self.plan_index).u32(self.step_index)
        self.backend.put_control(_CURSOR, w.getvalue())

    def _complete_step(self, ctx) -> None:
        self._await = None
        self.step_index += 1
        self._persist_cursor()
        self._drive(ctx)

    def _drive(self, ctx) -> None:
        from . import core

        step = self._current_step()
        if step is None:
            self.finished = True
            return
        if isinstance(step, UpdateProposerConfig):
            if self._await is None or self._await.get("step") is not step:
                self._await = {"kind": "config", "proposer": step.proposer, "step": step}
            ctx.send(step.proposer, step.update)
        elif isinstance(step, TurnOnAcceptor):
            ctx.power(step.acceptor, True)
            self._complete_step(ctx)
        elif isinstance(step, TurnOffAcceptor):
            ctx.power(step.acceptor, False)
            self._complete_step(ctx)
        elif isinstance(step, Rescan):
            if self._await is None or self._await.get("step") is not step:
                self._await = {
                    "kind": "rescan",
                    "proposer": step.via_proposer,
                    "keys": self.rescan_keys,
                    "step": step,
                }
            ctx.send(step.via_proposer, core.RescanRequest(tuple(self._await["keys"])))
        elif isinstance(step, CatchUp):
            self._drive_catchup(step, ctx)
        else:
            raise RuntimeError(f"unknown plan step {step!r}")

    # -- catch-up ----------------------------------------------------------------

    def _drive_catchup(self, step: CatchUp, ctx) -> None:
        from . import core

        if self._await is None or self._await.get("step") is not step:
            phase = "digest" if self.synced_keys is not None else "dump"
            self._await = {
                "kind": "catchup",
                "step": step,
                "phase": phase,
                "pending": set(step.sources) | ({step.new_acceptor} if phase == "digest" else set()),
                "digests": {},
                "dumps": {},
                "loads": None,
            }
        waiting = self._await
        if waiting["phase"] == "digest":
            for node in sorted(waiting["pending"]):
                ctx.send(node, core.DumpDigest())
        elif waiting["phase"] == "dump":
            for node in sorted(waiting["pending"]):
                if waiting.get("fetch_keys") is not None:
                    ctx.send(node, core.FetchRegisters(waiting["fetch_keys"]))
                else:
                    ctx.send(node, core.DumpRegisters())
        elif waiting["phase"] == "load":
            for key in sorted(waiting["loads"]):
                ballot, value = waiting["loads"][key]
                ctx.send(waiting["step"].new_acceptor, core.LoadRegister(key, ballot, value))

    def _catchup_message(self, frm, msg, ctx) -> None:
        from . import core

        waiting = self._await
        step: CatchUp = waiting["step"]
        if waiting["phase"] == "digest" and isinstance(msg, core.DigestReply):
            if frm not in waiting["pending"]:
                return
            waiting["pending"].discard(frm)
            waiting["digests"][frm] = dict(msg.items)
            if waiting["pending"]:
                return
            # Dirty keys: majority top ballot unknown to (or newer than) the
            # new acceptor's pre-synced copy.
            majority_top: dict[str, Ballot] = {}
            for source in step.sources:
                for key, ballot in waiting["digests"].get(source, {}).items():
                    if key not in majority_top or ballot > majority_top[key]:
                        majority_top[key] = ballot
            target = waiting["digests"].get(step.new_acceptor, {})
            dirty = tuple(
                sorted(k for k, b in majority_top.items() if target.get(k) != b)
            )
            clean = len(majority_top) - len(dirty)
            self.catchup_moves += clean  # the background copy already moved these
            waiting["phase"] = "dump"
            waiting["pending"] = set(step.sources)
            waiting["fetch_keys"] = dirty
            if not dirty:
                waiting["loads"] = {}
                waiting["phase"] = "load"
                self._complete_step(ctx)
                return
            self._drive_catchup(step, ctx)
        elif waiting["phase"] == "dump" and isinstance(msg, core.RegisterDump):
            if frm not in waiting["pending"]:
                return
            waiting["pending"].discard(frm)
            waiting["dumps"][frm] = msg.items
            self.catchup_moves += len(msg.items)
            if waiting["pending"]:
                return
            merged: dict[str, tuple[Ballot, object]] = {}
            for items in waiting["dumps"].values():
                for key, ballot, value in items:
                    if key not in merged or ballot > merged[key][0]:
                        merged[key] = (ballot, value)
            waiting["loads"] = merged
            waiting["phase"] = "load"
            waiting["pending"] = set(merged)
            if not merged:
                self._complete_step(ctx)
                return
            self._drive_catchup(step, ctx)
        elif waiting["phase"] == "load" and isinstance(msg, core.LoadAck):
            if msg.key not in waiting["pending"]:
                return
            waiting["pending"].discard(msg.key)
            if not waiting["pending"]:
                self._complete_step(ctx)
