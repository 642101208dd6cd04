"""
SNAPSHOT replication over one replicated slot set
Conflicting writers race on the backups first; the three rules elect a single
last writer, which alone modifies the primary.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Generator, List, Optional

from errors import FAIL, LivenessError
from fabric import FabricOp, Phase, RemoteAddr, word_of
from scheduler import Backoff

logger = logging.getLogger(__name__)


class RuleOutcome(Enum):
    RULE1 = "RULE1"
    RULE2 = "RULE2"
    RULE3 = "RULE3"
    LOSE = "LOSE"
    FINISH = "FINISH"
    FAIL = "FAIL"


WINNING = (RuleOutcome.RULE1, RuleOutcome.RULE2, RuleOutcome.RULE3)


@dataclass(frozen=True)
class SlotSet:
    primary: RemoteAddr
    backups: tuple

    def all(self) -> List[RemoteAddr]:
        return [self.primary, *self.backups]

    @classmethod
    def on_nodes(cls, nodes: List[int], offset: int) -> "SlotSet":
        if len(set(nodes)) != len(nodes) or not nodes:
            raise ValueError(f"slot replicas need distinct nodes, got {nodes}")
        return cls(RemoteAddr(nodes[0], offset), tuple(RemoteAddr(n, offset) for n in nodes[1:]))


@dataclass
class WriteContext:
    v_old: int
    v_new: int
    v_list: list = field(default_factory=list)
    v_check: Optional[int] = None


@dataclass
class WriteReport:
    outcome: RuleOutcome = RuleOutcome.FAIL
    won: bool = False
    rtts_used: int = 0
    v_old: int = 0
    final: int = 0
    retries: int = 0
    spins: int = 0
    decided_by_master: bool = False
    watched: list = field(default_factory=list)
    watched_after_install: bool = False


@dataclass
class RoundRecord:
    actor: str
    slot: int
    v_old: int
    v_new: int
    outcome: RuleOutcome
    won: bool
    observed_tick: int
    end_tick: int
    by_master: bool = False

    def outcome_text(self) -> str:
        return (f"v_old={self.v_old:#x} v_new={self.v_new:#x} {self.outcome.value} "
                f"won={int(self.won)} seen={self.observed_tick} master={int(self.by_master)}")


class StaticEnv:
    """
    Slot environment with a fixed replica mapping and no master.

    Used for slot-level sweeps and tests. A FAIL has nowhere to go here, so it
    raises.
    """

    def __init__(self, name: str, slot_sets: Dict[int, SlotSet], spin_budget: int = 10_000,
                 clock: Callable[[], int] = lambda: 0):
        self.name = name
        self.slot_sets = slot_sets
        self.spin_budget = spin_budget
        self.epoch = None
        self.clock = clock
        self.rounds: List[RoundRecord] = []
        self.installs: List[tuple] = []

    def resolve(self, slot: int) -> SlotSet:
        return self.slot_sets[slot]

    def now(self) -> int:
        return self.clock()

    def preparing(self) -> bool:
        return False

    def await_view(self):
        raise LivenessError(f"{self.name}: slot FAIL without a master")
        yield

    def fail_query(self, slot: int, v_old):
        raise LivenessError(f"{self.name}: fail_query on slot {slot} without a master")
        yield

    def on_round(self, record: RoundRecord):
        self.rounds.append(record)

    def on_install(self, slot: int, word: int):
        self.installs.append((slot, word))


def change_list_value(v_list: list, v_old: int, v_new: int) -> list:
    """Replace every v_old entry by v_new; FAIL entries stay."""
    return [v_new if (v is not FAIL and v == v_old) else v for v in v_list]


def evaluate_rules(v_list: list, s: SlotSet, v_new: int, v_old: int, epoch: Optional[int] = None,
                   ctx: Optional[WriteContext] = None):
    """
    Generator: elect the last writer from the normalized backup results.

    Issues at most one extra primary READ, only when neither unanimity nor a
    strict majority decides and the caller's value is present.
    """
    if any(v is FAIL for v in v_list):
        return RuleOutcome.FAIL
    if not v_list:
        return RuleOutcome.RULE1
    v_maj, cnt_maj = Counter(v_list).most_common(1)[0]
    if cnt_maj == len(v_list):
        return RuleOutcome.RULE1 if v_maj == v_new else RuleOutcome.LOSE
    if 2 * cnt_maj > len(v_list):
        return RuleOutcome.RULE2 if v_maj == v_new else RuleOutcome.LOSE
    if v_new not in v_list:
        return RuleOutcome.LOSE
    results = yield Phase([FabricOp.read(s.primary)], "read_check", epoch)
    v_check = word_of(results[0])
    if ctx is not None:
        ctx.v_check = v_check
    if v_check is FAIL:
        return RuleOutcome.FAIL
    if v_check != v_old:
        return RuleOutcome.FINISH
    return RuleOutcome.RULE3 if min(v_list) == v_new else RuleOutcome.LOSE


def _counted(gen, report: WriteReport):
    """Forward a sub-generator, charging its phases to `report`."""
    try:
        request = next(gen)
    except StopIteration as stop:
        return stop.value
    while True:
        if isinstance(request, Phase):
            report.rtts_used += 1
        value = yield request
        try:
            request = gen.send(value)
        except StopIteration as stop:
            return stop.value


def slot_write(env, slot: int, v_new: int, v_old: Optional[int] = None,
               commit: Optional[Callable[[int], list]] = None, observed_tick: Optional[int] = None,
               watch: tuple = (), guard: Optional[Callable[[list], Generator]] = None):
    """
    Generator: one SNAPSHOT WRITE of `v_new` into `slot`.

    `v_old` may be supplied when the caller already read the primary (it then
    saves the first phase). `commit(v_old)` returns the log-commit ops issued
    as their own phase between rule evaluation and the primary CAS.

    `watch` reads ride the phase that first claims the slot, after its CASes:
    the backup CASes, or the primary CAS when there are no backups. Their
    results land in `report.watched`. With backups, a winner runs
    `guard(watched)` before committing and issues the ops it returns ahead of
    the commit ops.
    """
    report = WriteReport()
    while True:
        s = env.resolve(slot)
        if v_old is None:
            results = yield Phase([FabricOp.read(s.primary)], "read_primary", env.epoch)
            report.rtts_used += 1
            v_old = word_of(results[0])
            observed_tick = env.now()
            if v_old is FAIL:
                yield from env.await_view()
                report.retries += 1
                v_old = None
                continue
        if v_new == v_old:
            raise ValueError(f"slot {slot}: v_new equals v_old {v_old:#x}")
        seen = env.now() if observed_tick is None else observed_tick
        report.v_old = v_old
        ctx = WriteContext(v_old, v_new)

        if s.backups:
            ops = [FabricOp.cas(b, v_old, v_new) for b in s.backups]
            results = yield Phase([*ops, *watch], "cas_backups", env.epoch)
            report.rtts_used += 1
            report.watched = list(results[len(ops):])
            ctx.v_list = change_list_value(list(results[:len(ops)]), v_old, v_new)
        outcome = yield from _counted(evaluate_rules(ctx.v_list, s, v_new, v_old, env.epoch, ctx), report)
        report.outcome = outcome

        if outcome in WINNING:
            failed = False
            if outcome is not RuleOutcome.RULE1:
                repair = [(b, v) for b, v in zip(s.backups, ctx.v_list) if v != v_new]
                results = yield Phase([FabricOp.cas(b, v, v_new) for b, v in repair], "repair", env.epoch)
                report.rtts_used += 1
                failed = any(got is FAIL or got != v for got, (_, v) in zip(results, repair))
            if not failed and (commit is not None or guard is not None):
                ops = []
                if guard is not None and s.backups:
                    ops = yield from _counted(guard(report.watched), report)
                if commit is not None:
                    ops = [*ops, *commit(v_old)]
                results = yield Phase(ops, "commit", env.epoch)
                report.rtts_used += 1
                failed = bool(ops) and all(got is FAIL for got in results)
            if not failed:
                tail = () if s.backups else watch
                results = yield Phase([FabricOp.cas(s.primary, v_old, v_new), *tail], "cas_primary", env.epoch)
                report.rtts_used += 1
                got = results[0]
                if tail:
                    report.watched, report.watched_after_install = list(results[1:]), True
                if got == v_old:
                    env.on_install(slot, v_new)
                    report.won, report.final = True, v_new
                    env.on_round(RoundRecord(env.name, slot, v_old, v_new, outcome, True, seen, env.now()))
                    return report
                if got is not FAIL and not s.backups:
                    report.outcome, report.final = RuleOutcome.LOSE, got
                    env.on_round(RoundRecord(env.name, slot, v_old, v_new, outcome, False, seen, env.now()))
                    return report
            outcome = RuleOutcome.FAIL

        elif outcome is RuleOutcome.FINISH:
            report.final = ctx.v_check
            env.on_round(RoundRecord(env.name, slot, v_old, v_new, outcome, False, seen, env.now()))
            return report

        elif outcome is RuleOutcome.LOSE:
            final = yield from _counted(_spin(env, s, v_old, report), report)
            if final is not FAIL:
                report.final = final
                env.on_round(RoundRecord(env.name, slot, v_old, v_new, outcome, False, seen, env.now()))
                return report

        # FAIL: the master decides the slot value
        reply = yield from env.fail_query(slot, v_old)
        report.decided_by_master = True
        if reply == v_old:
            report.retries += 1
            v_old = None
            continue
        report.won = reply == v_new
        report.final = reply
        env.on_round(RoundRecord(env.name, slot, v_old, v_new, report.outcome, report.won, seen,
                                 env.now(), by_master=True))
        return report


def _spin(env, s: SlotSet, v_old: int, report: WriteReport):
    """LOSE loop: poll the primary until the winner modifies it. Returns the new word or FAIL."""
    while True:
        if env.preparing():
            return FAIL
        results = yield Phase([FabricOp.read(s.primary)], "spin", env.epoch)
        current = word_of(results[0])
        if current is FAIL or current != v_old:
            return current
        report.spins += 1
        if report.spins > env.spin_budget:
            raise LivenessError(f"{env.name}: primary {s.primary} still {v_old:#x} after {report.spins} polls")
        yield Backoff()


def slot_read(env, slot: int, extra: tuple = (), label: str = "read_primary"):
    """
    Generator: read one slot. Returns (word, extra_results).

    A crashed primary falls back to the alive backups; disagreement among them
    is settled by the master.
    """
    s = env.resolve(slot)
    results = yield Phase([FabricOp.read(s.primary), *extra], label, env.epoch)
    value = word_of(results[0])
    if value is not FAIL:
        return value, list(results[1:])
    backups = yield Phase([FabricOp.read(b) for b in s.backups], "read_backups", env.epoch)
    values = {word_of(v) for v in backups if v is not FAIL}
    if len(values) == 1:
        return values.pop(), list(results[1:])
    return (yield from env.fail_query(slot, None)), list(results[1:])


def group_read(env, table, group: int, extra: tuple = (), label: str = "read_group"):
    """
    Generator: read a whole slot group. Returns (words, extra_results).

    Same fallback as slot_read, applied per slot of the group.
    """
    first = table.slots_per_key * group
    s = env.resolve(first)
    results = yield Phase([table.read_group_op(s.primary.node, group), *extra], label, env.epoch)
    raw = results[0]
    if raw is not FAIL:
        return table.words(raw), list(results[1:])
    backups = yield Phase([table.read_group_op(b.node, group) for b in s.backups], "read_backups", env.epoch)
    copies = [table.words(raw) for raw in backups if raw is not FAIL]
    words = []
    for i in range(table.slots_per_key):
        values = {copy[i] for copy in copies}
        if len(values) == 1:
            words.append(values.pop())
        else:
            words.append((yield from env.fail_query(first + i, None)))
    return words, list(results[1:])
