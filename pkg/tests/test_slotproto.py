import pytest

from conftest import drive
from errors import FAIL, LivenessError
from fabric import WORD, Fabric, FabricOp, RemoteAddr, Trace
from harness import slot_sweep, sweep_grid
from slotproto import RuleOutcome, SlotSet, StaticEnv, change_list_value, evaluate_rules, slot_read, slot_write

OFFSET = WORD
NEW, OTHER = 0x100, 0x200


def setup(r: int, **env_kw):
    fabric = Fabric(r, 8 * WORD)
    env = StaticEnv("w0", {0: SlotSet.on_nodes(list(range(r)), OFFSET)}, **env_kw)
    return fabric, env


def test_slot_set_needs_distinct_nodes():
    with pytest.raises(ValueError):
        SlotSet.on_nodes([1, 1], OFFSET)
    s = SlotSet.on_nodes([2, 0, 1], OFFSET)
    assert s.primary == RemoteAddr(2, OFFSET)
    assert [a.node for a in s.all()] == [2, 0, 1]


def test_change_list_value_rewrites_only_the_old_value():
    assert change_list_value([0, 0x300, FAIL, 0], 0, NEW) == [NEW, 0x300, FAIL, NEW]


@pytest.mark.parametrize("v_list, expected", [
    ([NEW, NEW], RuleOutcome.RULE1),
    ([OTHER, OTHER], RuleOutcome.LOSE),
    ([NEW, NEW, OTHER], RuleOutcome.RULE2),
    ([OTHER, OTHER, NEW], RuleOutcome.LOSE),
    ([OTHER, 0x300], RuleOutcome.LOSE),
    ([NEW, FAIL], RuleOutcome.FAIL),
    ([], RuleOutcome.RULE1),
])
def test_rules_decided_without_reading_the_primary(v_list, expected):
    trace = Trace()
    fabric = Fabric(3, 8 * WORD, trace)
    s = SlotSet.on_nodes([0, 1, 2], OFFSET)
    assert drive(evaluate_rules(v_list, s, NEW, 0), fabric) is expected
    assert trace.of_kind("READ") == []


def test_split_vote_reads_the_primary():
    fabric, _ = setup(3)
    s = SlotSet.on_nodes([0, 1, 2], OFFSET)
    # smallest value wins while the primary is untouched
    assert drive(evaluate_rules([NEW, OTHER], s, NEW, 0), fabric) is RuleOutcome.RULE3
    assert drive(evaluate_rules([NEW, OTHER], s, OTHER, 0), fabric) is RuleOutcome.LOSE
    fabric.store_word(0, OFFSET, 0x999)
    assert drive(evaluate_rules([NEW, OTHER], s, NEW, 0), fabric) is RuleOutcome.FINISH


def test_single_writer_wins_by_unanimity():
    fabric, env = setup(3)
    report = drive(slot_write(env, 0, NEW), fabric)
    assert report.won and report.outcome is RuleOutcome.RULE1
    assert report.rtts_used == 3
    assert [fabric.load_word(n, OFFSET) for n in range(3)] == [NEW] * 3
    assert env.installs == [(0, NEW)]
    assert env.rounds[0].won


def test_unreplicated_slot_skips_the_backup_phase():
    fabric, env = setup(1)
    report = drive(slot_write(env, 0, NEW), fabric)
    assert report.outcome is RuleOutcome.RULE1
    assert report.rtts_used == 2


def test_majority_winner_repairs_the_minority_backup():
    fabric, env = setup(4)
    fabric.store_word(3, OFFSET, OTHER)
    report = drive(slot_write(env, 0, NEW), fabric)
    assert report.outcome is RuleOutcome.RULE2
    assert report.rtts_used == 4
    assert fabric.load_word(3, OFFSET) == NEW


def test_split_vote_winner_pays_the_check_and_repair():
    fabric, env = setup(3)
    fabric.store_word(2, OFFSET, OTHER)
    report = drive(slot_write(env, 0, NEW), fabric)
    assert report.outcome is RuleOutcome.RULE3
    assert report.rtts_used == 5
    assert [fabric.load_word(n, OFFSET) for n in range(3)] == [NEW] * 3


def test_commit_phase_runs_before_the_primary_cas():
    fabric, env = setup(2)
    seen = []

    def commit(v_old):
        seen.append(v_old)
        return [FabricOp.write(RemoteAddr(1, 4 * WORD), b"\x01")]

    report = drive(slot_write(env, 0, NEW, v_old=0, commit=commit), fabric)
    assert seen == [0]
    assert report.rtts_used == 3
    assert fabric.load(1, 4 * WORD, 1) == b"\x01"


def test_writing_the_current_value_is_rejected():
    fabric, env = setup(2)
    with pytest.raises(ValueError):
        drive(slot_write(env, 0, 0, v_old=0), fabric)


def test_loser_spins_until_the_budget_runs_out():
    fabric, env = setup(3, spin_budget=3)
    fabric.store_word(1, OFFSET, OTHER)
    fabric.store_word(2, OFFSET, OTHER)
    with pytest.raises(LivenessError):
        drive(slot_write(env, 0, NEW), fabric)


def test_crashed_primary_needs_a_master():
    fabric, env = setup(2)
    fabric.crash(0)
    with pytest.raises(LivenessError):
        drive(slot_write(env, 0, NEW), fabric)


def test_read_uses_the_primary_alone():
    fabric, env = setup(3)
    fabric.store_word(0, OFFSET, NEW)
    fabric.store_word(1, OFFSET, OTHER)
    assert drive(slot_read(env, 0), fabric) == (NEW, [])


def test_read_falls_back_to_agreeing_backups():
    fabric, env = setup(3)
    for node in (1, 2):
        fabric.store_word(node, OFFSET, OTHER)
    fabric.crash(0)
    assert drive(slot_read(env, 0), fabric)[0] == OTHER

    fabric.store_word(2, OFFSET, NEW)
    with pytest.raises(LivenessError):
        drive(slot_read(env, 0), fabric)


@pytest.mark.parametrize("writers, r", [(2, 1), (2, 2), (2, 3)])
def test_every_two_writer_interleaving_elects_one_winner(writers, r):
    result = slot_sweep(writers, r)
    assert result.violations == []
    assert result.truncated == 0
    assert result.schedules > 1


@pytest.mark.slow
def test_three_writer_grid(tmp_path):
    rows = sweep_grid([3], [1, 2, 3], max_steps=2000, checkpoint=str(tmp_path / "grid.json"))
    assert [row["violations"] for row in rows] == [[], [], []]
    assert (tmp_path / "grid.json").exists()
