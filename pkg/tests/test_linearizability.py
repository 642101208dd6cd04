from linearizability import Operation, check_history, check_key, step

K = b"k"


def op(actor, kind, invoke, respond, status="OK", value=b"", result=None):
    return Operation(actor, kind, K, value, invoke, respond, status, result)


def test_sequential_map_semantics():
    assert step(op("a", "INSERT", 0, 1, value=b"x"), None) == (True, b"x")
    assert step(op("a", "INSERT", 0, 1, status="EXISTS"), b"x") == (True, b"x")
    assert step(op("a", "SEARCH", 0, 1, result=b"x"), b"y")[0] is False
    assert step(op("a", "DELETE", 0, 1), b"x") == (True, None)
    assert step(op("a", "UPDATE", 0, 1, status="NOT_FOUND"), None) == (True, None)
    assert step(op("a", "INSERT", 0, 1, status="TABLE_FULL"), None) == (True, None)


def test_concurrent_writes_linearize_in_either_order():
    history = [
        op("a", "INSERT", 0, 2, value=b"1"),
        op("b", "UPDATE", 1, 5, value=b"2"),
        op("c", "SEARCH", 3, 4, result=b"1"),
        op("c", "SEARCH", 6, 7, result=b"2"),
    ]
    assert check_key(K, history) is None


def test_stale_read_after_a_completed_update_is_reported():
    history = [
        op("a", "INSERT", 0, 1, value=b"1"),
        op("a", "UPDATE", 2, 3, value=b"2"),
        op("b", "SEARCH", 4, 5, result=b"1"),
    ]
    violation = check_key(K, history)
    assert violation is not None
    assert violation.key == K
    assert "not linearizable" in str(violation)
    assert any(o.op == "SEARCH" for o in violation.ops)


def test_pending_write_may_or_may_not_take_effect():
    crashed = op("a", "UPDATE", 2, None, status=None, value=b"2")
    seen = [op("b", "INSERT", 0, 1, value=b"1"), crashed, op("b", "SEARCH", 5, 6, result=b"2")]
    unseen = [op("b", "INSERT", 0, 1, value=b"1"), crashed, op("b", "SEARCH", 5, 6, result=b"1")]
    assert check_key(K, seen) is None
    assert check_key(K, unseen) is None


def test_two_winners_of_one_insert_are_caught():
    history = [
        op("a", "INSERT", 0, 3, value=b"1"),
        op("b", "INSERT", 1, 4, value=b"2"),
    ]
    assert check_key(K, history) is not None


def test_error_responses_are_ignored_and_keys_checked_apart():
    history = [
        op("a", "SEARCH", 0, 1, status="ERROR"),
        Operation("a", "INSERT", b"other", b"v", 2, 3, "OK"),
        Operation("b", "SEARCH", b"other", b"", 4, 5, "OK", b"v"),
    ]
    assert check_history(history) == []
