import json
from typing import List

import pytest

from client import KvRequest, Status
from conftest import small_scenario
from errors import TraceFormatError
from fabric import Trace, TraceEvent
from harness import (RULE_RTTS, Stats, audit, audit_exactly_once, audit_fencing, audit_rtts, audit_winners,
                     build, check_linearizability, explore, history, parse_trace, read_trace, replay, run, run_seeds,
                     tokens, write_trace)
from workload import key_name


def ev(tick, actor, kind, addr, outcome):
    return TraceEvent(tick, actor, kind, addr, outcome)


def round_event(tick, actor, slot, v_old, v_new, won, seen=0, master=0):
    return ev(tick, actor, "ROUND", f"slot{slot}",
              f"v_old={v_old:#x} v_new={v_new:#x} RULE1 won={won} seen={seen} master={master}")


def install(tick, actor, slot, word, seq):
    return ev(tick, actor, "INSTALL", f"slot{slot}", f"word={word:#x} seq={seq}")


@pytest.fixture(scope="module")
def baseline():
    scenario = small_scenario()
    return scenario, run(scenario)


def test_tokens_split_key_value_pairs_and_bare_words():
    assert tokens("status=OK RULE2 rtts=4") == {"status": "OK", "RULE2": "RULE2", "rtts": "4"}


def test_failure_free_run_passes_every_check(baseline):
    scenario, result = baseline
    assert result.error is None
    report = audit(result.trace, scenario)
    assert report.passed, report.rows()
    names = [c.name for c in report.checks]
    assert names == ["exactly-one-winner", "rtt-contract", "exactly-once", "epoch-fencing", "conservation",
                     "leak-freedom", "liveness", "linearizability"]
    assert sum(result.stats.ops.values()) == scenario.num_clients * scenario.ops_per_client
    assert result.stats.crashes == 0


def test_runs_are_deterministic_in_the_seed(baseline):
    scenario, result = baseline
    assert run(scenario).trace.lines() == result.trace.lines()
    assert run(small_scenario(seed=2)).trace.lines() != result.trace.lines()


def test_stats_count_only_the_measured_part(baseline):
    scenario, result = baseline
    stats = result.stats
    preload = sum(1 for e in result.trace.events if e.kind == "RESPOND")
    assert preload == scenario.keys + sum(stats.ops.values())
    assert stats.rtts["SEARCH"] and min(stats.rtts["SEARCH"]) >= 1
    assert set(stats.rules) <= {"RULE1", "RULE2", "RULE3", "LOSE", "FINISH", "FAIL"}
    rows = stats.rtt_rows()
    assert {row[0] for row in rows} == set(stats.rtts)
    data = stats.to_dict()
    assert json.loads(json.dumps(data))["ops"] == dict(stats.ops)


def test_census_accounts_for_every_object(baseline):
    _, result = baseline
    census = [tokens(e.outcome) for e in result.trace.events if e.kind == "CENSUS"]
    assert len(census) == 2
    for counts in census:
        parts = int(counts["live"]) + int(counts["free"]) + int(counts["pending"])
        assert parts == int(counts["granted"])
        assert counts["overlap"] == counts["missing"] == "0"


def test_trace_file_round_trip_and_replay(tmp_path, baseline):
    scenario, result = baseline
    path = write_trace(tmp_path / "runs" / "t.trace", result.trace)
    parsed, trace = read_trace(path)
    assert parsed == scenario
    assert trace.lines() == result.trace.lines()
    assert audit(trace).passed
    replayed, diff = replay(path)
    assert replayed == scenario
    assert diff == []


def test_replay_reports_a_tampered_trace(tmp_path, baseline):
    _, result = baseline
    lines = result.trace.lines()
    lines[-1] += " extra"
    path = tmp_path / "tampered.trace"
    path.write_text("\n".join(lines) + "\n")
    _, diff = replay(path)
    assert diff


def test_unreadable_traces_are_rejected(tmp_path):
    with pytest.raises(TraceFormatError):
        parse_trace("0, c0, READ, n0:0x8, 0x0")
    with pytest.raises(TraceFormatError):
        parse_trace("# dmkv trace v1\nnot an event")
    with pytest.raises(TraceFormatError):
        read_trace(tmp_path / "missing.trace")


def test_history_keeps_crashed_requests_pending():
    trace = Trace()
    trace.events = [
        ev(1, "c0", "INVOKE", "UPDATE 6b", "value=0x76"),
        ev(2, "c1", "INVOKE", "SEARCH 6b", "value=-"),
        ev(3, "c1", "RESPOND", "SEARCH 6b", "status=NOT_FOUND value=- rtts=1"),
    ]
    ops = history(trace)
    assert [(o.actor, o.op, o.pending) for o in ops] == [("c1", "SEARCH", False), ("c0", "UPDATE", True)]
    assert ops[1].value == b"v"


def test_stale_read_in_a_trace_is_not_linearizable():
    def trace_with(read_value):
        trace = Trace()
        trace.events = [
            ev(1, "c0", "INVOKE", "INSERT 6b", "value=0x7631"),
            ev(2, "c0", "RESPOND", "INSERT 6b", "status=OK value=- rtts=4"),
            ev(3, "c0", "INVOKE", "UPDATE 6b", "value=0x7632"),
            ev(4, "c0", "RESPOND", "UPDATE 6b", "status=OK value=- rtts=4"),
            ev(5, "c1", "INVOKE", "SEARCH 6b", "value=-"),
            ev(6, "c1", "RESPOND", "SEARCH 6b", f"status=OK value={read_value} rtts=1"),
        ]
        return trace

    assert check_linearizability(trace_with("0x7632")) == []
    assert len(check_linearizability(trace_with("0x7631"))) == 1


def test_two_winners_in_one_round_are_caught():
    events = [
        round_event(5, "c0", 3, 0, 0x10, won=1),
        install(6, "c0", 3, 0x10, 1),
        round_event(7, "c1", 3, 0, 0x20, won=1),
        install(8, "c1", 3, 0x20, 1),
    ]
    check = audit_winners(events, crash_free=True)
    assert not check.passed
    assert "winners c0, c1" in check.witnesses[0]


def test_round_without_winner_fails_only_when_nothing_crashed():
    events = [round_event(5, "c0", 3, 0, 0x10, won=0)]
    assert not audit_winners(events, crash_free=True).passed
    assert audit_winners(events, crash_free=False).passed


def test_double_apply_is_caught():
    events = [
        install(1, "c0", 3, 0x10, 1),
        install(2, "c1", 3, 0x20, 1),
        install(3, "master", 3, 0x10, 1),
    ]
    check = audit_exactly_once(events)
    assert not check.passed
    assert "applied twice" in check.witnesses[0]


def test_same_object_in_two_slots_and_lost_acknowledgements_are_caught():
    moved = audit_exactly_once([install(1, "c0", 3, 0x10, 1), install(2, "c0", 4, 0x10, 1)])
    assert not moved.passed
    lost = audit_exactly_once([ev(4, "c0", "RESPOND", "UPDATE 6b", "status=OK rtts=4 install=3/0x10/1")])
    assert "never reached the primary" in lost.witnesses[0]


def test_rtt_charges_must_match_the_trace():
    events = [
        ev(1, "c0", "INVOKE", "SEARCH 6b", "value=-"),
        ev(1, "c0", "PHASE", "search", "ops=1 rtt=1"),
        ev(3, "c0", "RESPOND", "SEARCH 6b", "status=OK value=0x76 rtts=2 rule=- master=0 retries=0"),
    ]
    assert not audit_rtts(events, r=3).passed


def test_winner_slot_phases_match_the_rule():
    labels = ["kv_write", "cas_backups", "commit", "cas_primary"]
    events = [ev(1, "c0", "INVOKE", "INSERT 6b", "value=0x76")]
    events += [ev(2 + i, "c0", "PHASE", label, f"ops=1 rtt={i + 1}") for i, label in enumerate(labels)]
    events.append(ev(9, "c0", "RESPOND", "INSERT 6b",
                     "status=OK value=- rtts=4 rule=RULE1 master=0 retries=0 install=3/0x10/1"))
    assert audit_rtts(events, r=3).passed
    assert RULE_RTTS["RULE1"] == 3
    events[2] = ev(3, "c0", "PHASE", "repair", "ops=1 rtt=2")
    events.insert(3, ev(3, "c0", "PHASE", "cas_backups", "ops=1 rtt=2"))
    assert not audit_rtts(events, r=3).passed


def test_stale_epoch_mutation_is_caught():
    fence = ev(10, "fabric", "FENCE", "index:0x40-0x240", "epoch=1")
    stale = ev(11, "c0", "CAS", "n0:0x48", "ok 0x0->0x10 old=0x0 e=0")
    rejected = ev(12, "c0", "CAS", "n0:0x50", "FAIL e=0")
    outside = ev(13, "c0", "CAS", "n0:0x400", "ok 0x0->0x10 old=0x0 e=0")
    assert audit_fencing([fence, rejected, outside]).passed
    assert not audit_fencing([fence, stale]).passed


@pytest.mark.parametrize("overrides", [
    dict(r=1),
    dict(oplog_enabled=False),
    dict(workload="D", keys=8),
    dict(mix={"SEARCH": 0.4, "UPDATE": 0.3, "INSERT": 0.15, "DELETE": 0.15}, distribution="uniform",
         num_clients=1),
])
def test_variant_runs_pass_the_audit(overrides):
    scenario = small_scenario(**overrides)
    result = run(scenario)
    assert result.error is None
    assert audit(result.trace, scenario).passed, audit(result.trace, scenario).rows()


def test_seed_pool_in_process(tmp_path):
    checkpoint = tmp_path / "seeds.json"
    rows = run_seeds(small_scenario(ops_per_client=5), [3, 4], workers=1, checkpoint=str(checkpoint))
    assert [row["seed"] for row in rows] == [3, 4]
    assert all(row["passed"] for row in rows)
    assert set(json.loads(checkpoint.read_text())) == {"3", "4"}
    # a second call resumes from the checkpoint
    assert run_seeds(small_scenario(ops_per_client=5), [3, 4], workers=1, checkpoint=str(checkpoint)) == rows


def test_stats_without_start_marker_count_everything():
    trace = Trace()
    trace.events = [ev(1, "c0", "RESPOND", "SEARCH 6b", "status=OK value=- rtts=1 route=HIT rule=-")]
    stats = Stats.from_trace(trace)
    assert stats.ops["SEARCH"] == 1
    assert stats.routes["HIT"] == 1


@pytest.mark.slow
def test_every_interleaving_of_two_conflicting_updates():
    scenario = small_scenario(num_clients=2, ops_per_client=1, keys=1, mode="exhaustive",
                              mix={"UPDATE": 1.0}, max_steps=2000)
    result = explore(scenario)
    assert result.violations == []
    assert result.truncated == 0
    assert result.schedules > 1


def last_statuses(cluster) -> List[Status]:
    return [cluster.clients[cid].responses[-1].status for cid in sorted(cluster.clients)]


@pytest.mark.slow
def test_every_interleaving_of_two_inserts_of_one_fresh_key():
    scenario = small_scenario(num_clients=2, ops_per_client=1, keys=1, preload=False, mode="exhaustive",
                              max_steps=2000)
    plan = {cid: [KvRequest("INSERT", key_name(0), b"v%d" % cid)] for cid in range(2)}

    def one_winner(cluster) -> List[str]:
        statuses = sorted(s.value for s in last_statuses(cluster))
        return [] if statuses == ["EXISTS", "OK"] else [f"racing inserts answered {statuses}"]

    result = explore(scenario, plan=plan, expect=one_winner)
    assert result.violations == []
    assert result.truncated == 0
    assert result.schedules > 1


@pytest.mark.slow
def test_every_interleaving_of_a_delete_racing_an_update():
    scenario = small_scenario(num_clients=2, ops_per_client=1, keys=1, mode="exhaustive", max_steps=2000)
    key = key_name(0)
    plan = {0: [KvRequest("DELETE", key)], 1: [KvRequest("UPDATE", key, b"late")]}

    def key_is_gone(cluster) -> List[str]:
        delete, update = last_statuses(cluster)
        problems = []
        if delete is not Status.OK:
            problems.append(f"delete answered {delete.value}")
        if update not in (Status.OK, Status.NOT_FOUND):
            problems.append(f"update answered {update.value}")
        primary = cluster.master.membership.index_nodes[0]
        left = [s for s in cluster.table.locate(key).slots
                if cluster.fabric.load_word(primary, cluster.geometry.slot_offset(s))]
        if left:
            problems.append(f"slots {left} still hold a word")
        return problems

    result = explore(scenario, plan=plan, expect=key_is_gone)
    assert result.violations == []
    assert result.truncated == 0
    assert result.schedules > 1


def test_reclaim_leaves_request_rtts_unchanged():
    keys = [key_name(i) for i in range(3)]
    requests = []
    for round_ in range(8):
        for key in keys:
            requests += [KvRequest("INSERT", key, b"a%d" % round_), KvRequest("UPDATE", key, b"b%d" % round_),
                         KvRequest("SEARCH", key), KvRequest("DELETE", key)]
    costs, reclaims = [], []
    for interval in (1, 10 ** 9):
        cluster = build(small_scenario(num_clients=1, ops_per_client=0, preload=False,
                                       reclaim_interval_ticks=interval))
        costs.append([(r.status, r.rtts - r.alloc) for r in (cluster.call(0, req) for req in requests)])
        reclaims.append(sum(e.kind == "PHASE" and e.addr == "reclaim" for e in cluster.trace.events))
    assert reclaims[0] > 0 and reclaims[1] == 0
    assert costs[0] == costs[1]
