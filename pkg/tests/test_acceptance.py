import pytest

from client import KvRequest, Status
from config import CrashSpec
from conftest import small_scenario
from harness import audit, build, run, run_seeds, sweep_grid
from workload import key_name

WRITE_MIX = {"SEARCH": 0.3, "INSERT": 0.4, "DELETE": 0.3}


def audited(scenario):
    result = run(scenario, keep_cluster=True)
    report = audit(result.trace, scenario)
    assert result.error is None, result.error
    assert report.passed, report.rows()
    return result


def failures(rows):
    return [(r["seed"], r["failed"], r["witnesses"], r["error"]) for r in rows if not r["passed"]]


def churn(**overrides):
    """Three clients inserting, deleting and reading a handful of keys that share one index group."""
    base = dict(num_clients=3, ops_per_client=40, keys=3, index_capacity=1, preload=False, mix=WRITE_MIX)
    return small_scenario(**{**base, **overrides})


@pytest.mark.parametrize("point", ["c0", "c1", "c2", "c3"])
@pytest.mark.parametrize("op", ["INSERT", "UPDATE", "DELETE"])
def test_crash_matrix(point, op):
    if op == "UPDATE":
        scenario = small_scenario(crashes=[CrashSpec.parse(f"client:0@{point}:UPDATE")])
    else:
        scenario = small_scenario(num_clients=3, ops_per_client=40, keys=6, preload=False, mix=WRITE_MIX,
                                  crashes=[CrashSpec.parse(f"client:0@{point}:{op}")])
    result = audited(scenario)
    assert result.stats.crashes == 1
    assert [r.kind for r in result.cluster.reports] == ["client"]


@pytest.mark.parametrize("r", [1, 2, 3])
def test_concurrent_inserts_and_deletes_keep_one_copy_per_key(r):
    rows = run_seeds(churn(r=r), range(5), workers=1)
    assert failures(rows) == []
    assert all(row["ops"] > 0 for row in rows)


def test_searches_ride_out_a_memory_node_crash_without_the_master():
    scenario = small_scenario(workload="C", num_clients=3, ops_per_client=30)
    for node in range(scenario.sim.num_mns):
        crashed = small_scenario(workload="C", num_clients=3, ops_per_client=30,
                                 crashes=[CrashSpec.parse(f"mn:{node}@0")])
        result = audited(crashed)
        assert result.stats.fail_queries == 0
        assert result.stats.statuses["SEARCH:OK"] == scenario.num_clients * scenario.ops_per_client


def searches_in_flight(trace, tick: int) -> int:
    open_ops = {}
    for e in trace.events:
        if e.tick > tick:
            break
        if e.kind == "INVOKE":
            open_ops[e.actor] = e.addr.split(" ", 1)[0]
        elif e.kind == "RESPOND":
            open_ops.pop(e.actor, None)
    return sum(op == "SEARCH" for op in open_ops.values())


def test_memory_node_crash_in_the_middle_of_a_search_run():
    kwargs = dict(workload="C", num_clients=3, ops_per_client=60)
    baseline = run(small_scenario(**kwargs))
    start = next(e.tick for e in baseline.trace.events if e.kind == "START")
    middle = (start + baseline.trace.events[-1].tick) // 2
    for node in range(3):
        result = audited(small_scenario(**kwargs, crashes=[CrashSpec.parse(f"mn:{node}@{middle}")]))
        crash = next(e.tick for e in result.trace.events if e.kind == "CRASH")
        assert crash > start
        assert searches_in_flight(result.trace, crash) > 0
        assert result.stats.statuses["SEARCH:OK"] == 3 * 60
        assert [r.kind for r in result.cluster.reports] == ["mn"]


def test_acknowledged_writes_survive_r_minus_one_crashes():
    cluster = build(small_scenario(num_clients=1, ops_per_client=0, preload=False, num_mns=5, r=3))
    expected = {}
    for i in range(10):
        key = key_name(i)
        cluster.call(0, KvRequest("INSERT", key, b"first%d" % i))
        expected[key] = b"first%d" % i
    for i in range(0, 10, 3):
        key = key_name(i)
        cluster.call(0, KvRequest("UPDATE", key, b"second%d" % i))
        expected[key] = b"second%d" % i

    for node in cluster.master.membership.index_nodes[:2]:
        cluster.fabric.crash(node)
    for key, value in expected.items():
        resp = cluster.call(0, KvRequest("SEARCH", key))
        assert (resp.status, resp.value) == (Status.OK, value)


@pytest.mark.slow
def test_rtt_contract_over_many_seeds():
    rows = run_seeds(small_scenario(num_clients=4, ops_per_client=50), range(1000))
    assert failures(rows) == []


@pytest.mark.slow
def test_exactly_one_winner_grid():
    cells = sweep_grid([2, 3], [2, 3, 4], max_steps=2000)
    assert all(c["violations"] == [] and c["truncated"] == 0 for c in cells)


@pytest.mark.slow
@pytest.mark.parametrize("workload", ["A", "B", "C", "D"])
def test_linearizability_at_scale(workload):
    # 8 clients x 1,250 requests = 10,000 per run
    scenario = small_scenario(num_clients=8, ops_per_client=1250, keys=64, workload=workload,
                              index_capacity=512, region_size=64 * 1024)
    rows = run_seeds(scenario, range(200))
    assert failures(rows) == []


@pytest.mark.slow
@pytest.mark.parametrize("point", ["c0", "c1", "c2", "c3"])
@pytest.mark.parametrize("op", ["INSERT", "UPDATE", "DELETE"])
def test_crash_matrix_over_seeds(point, op):
    writes = {} if op == "UPDATE" else dict(preload=False, mix=WRITE_MIX)
    scenario = small_scenario(num_clients=3, ops_per_client=40, keys=6, **writes,
                              crashes=[CrashSpec.parse(f"client:0@{point}:{op}")])
    rows = run_seeds(scenario, range(20))
    assert failures(rows) == []


@pytest.mark.slow
def test_concurrent_inserts_and_deletes_over_many_seeds():
    rows = run_seeds(churn(), range(40))
    assert failures(rows) == []


@pytest.mark.slow
def test_memory_node_crash_mid_run_over_seeds():
    kwargs = dict(num_clients=4, ops_per_client=80, mix={"SEARCH": 0.6, "UPDATE": 0.2, "INSERT": 0.1, "DELETE": 0.1})
    rows = []
    for node in range(3):
        scenario = small_scenario(**kwargs, crashes=[CrashSpec.parse(f"mn:{node}@400")])
        rows += run_seeds(scenario, range(10))
    assert failures(rows) == []
