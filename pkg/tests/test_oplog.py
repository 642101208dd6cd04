import pytest

from conftest import drive, issue
from fabric import FabricOp, RemoteAddr
from memalloc import NULL, Allocation
from oplog import (DELETE, INSERT, RETIRED, SENTINEL, UPDATE, EntryState, LogEntry, build_entry, cancel_entry,
                   cancel_ops, classify, commit_crc, commit_ops, crc8, decode_object, encode_object, header_ops,
                   invalidate_ops, object_size, retire_ops, traverse_log)


def alloc(size: int = 128, seq: int = 5, prev: int = NULL, nxt: int = NULL) -> Allocation:
    return Allocation(RemoteAddr(0, 4096), 1, size, prev, nxt, seq)


def test_crc8_matches_the_standard_check_value():
    assert crc8(b"123456789") == 0xF4
    assert crc8(b"") == 0


def test_log_entry_is_22_bytes():
    entry = LogEntry(next=0x1_0000_2000, prev=0x2_0000_1000, old_value=0xDEAD, crc=7, opcode=UPDATE, used=1)
    raw = entry.pack()
    assert len(raw) == LogEntry.SIZE == 22
    assert LogEntry.unpack(raw) == entry
    assert raw[-1] == (UPDATE << 1) | 1


def test_unpack_rejects_wrong_length():
    with pytest.raises(ValueError):
        LogEntry.unpack(bytes(21))


def test_entry_states_follow_used_bit_and_commit_crc():
    fresh = LogEntry(opcode=INSERT, used=1)
    assert classify(fresh, is_tail=True) is EntryState.UNCOMMITTED
    committed = LogEntry(old_value=0x42, crc=commit_crc(0x42), opcode=INSERT, used=1)
    assert committed.committed
    assert classify(committed, is_tail=True) is EntryState.COMMITTED
    cancelled = LogEntry(opcode=UPDATE, used=0)
    assert classify(cancelled, is_tail=False) is EntryState.UNUSED
    assert classify(LogEntry(), is_tail=True) is EntryState.INCOMPLETE
    assert classify(LogEntry(), is_tail=False) is EntryState.UNUSED


def test_commit_of_zero_old_value_is_distinguishable_from_no_commit():
    assert LogEntry(old_value=0, crc=commit_crc(0), used=1).committed
    assert not LogEntry(old_value=0, crc=0, used=1).committed


def test_retired_flag_keeps_the_opcode():
    entry = LogEntry(opcode=DELETE | RETIRED, used=1)
    assert entry.op == DELETE
    assert entry.retired


def test_object_codec_trails_the_entry():
    a = alloc(nxt=0x77, prev=0x55)
    raw = encode_object(b"key", b"value", a, UPDATE)
    assert len(raw) == a.size
    assert raw[-22:] == build_entry(UPDATE, a).pack()
    obj = decode_object(raw)
    assert (obj.key, obj.value, obj.seq) == (b"key", b"value", 5)
    assert obj.readable and not obj.tombstone
    assert (obj.entry.next, obj.entry.prev, obj.entry.op, obj.entry.used) == (0x77, 0x55, UPDATE, 1)


def test_corrupted_value_fails_the_checksum():
    raw = bytearray(encode_object(b"key", b"value", alloc(), INSERT))
    raw[12] ^= 0xFF
    assert not decode_object(bytes(raw)).readable


def test_tombstones_and_disabled_logging():
    raw = encode_object(b"key", b"", alloc(), DELETE, tombstone=True, logging_enabled=False)
    obj = decode_object(raw)
    assert obj.tombstone and obj.readable
    assert raw[-22:] == bytes(22)


def test_pending_insert_stays_hidden_until_its_header_is_rewritten():
    a = alloc()
    raw = encode_object(b"key", b"value", a, INSERT, pending=True)
    obj = decode_object(raw)
    assert obj.readable and obj.pending and not obj.live

    replica = RemoteAddr(0, 4096)
    publish = header_ops([replica], b"key", b"value", a.seq)
    assert [op.addr for op in publish] == [replica]
    header = publish[0].data
    published = decode_object(header + raw[len(header):])
    assert published.live and not published.pending
    assert (published.key, published.value, published.seq) == (b"key", b"value", 5)
    assert published.entry == obj.entry

    header = header_ops([replica], b"key", b"value", a.seq, tombstone=True)[0].data
    withdrawn = decode_object(header + raw[len(header):])
    assert withdrawn.readable and withdrawn.tombstone and not withdrawn.live


def test_object_must_fit_its_class():
    with pytest.raises(ValueError):
        encode_object(b"k", b"v" * 200, alloc(size=128), INSERT)
    assert object_size(b"key", b"value") == 8 + 3 + 5 + 22


def test_entry_mutations_touch_every_replica():
    replicas = [RemoteAddr(n, 4096) for n in range(3)]
    assert [op.addr.node for op in commit_ops(replicas, 128, 0x99)] == [0, 1, 2]
    assert all(op.addr.offset == 4096 + 127 for op in cancel_ops(replicas, 128, INSERT))
    assert retire_ops(replicas, 128, INSERT)[0].data == bytes([((INSERT | RETIRED) << 1) | 1])
    assert invalidate_ops(replicas)[0].addr.offset == 4097


def write_object(pool, allocator, a, key: bytes, value: bytes, opcode: int = INSERT):
    raw = encode_object(key, value, a, opcode)
    issue(pool.fabric, [FabricOp.write(r, raw) for r in allocator.replicas(a.addr)])


def test_traverse_follows_the_class_list_until_sequence_stops_growing(pool):
    allocator = pool.allocator(cid=0)
    taken = [allocator.take(1) for _ in range(3)]
    for i, a in enumerate(taken):
        write_object(pool, allocator, a, b"k%d" % i, b"v" * 20)
    issue(pool.fabric, commit_ops(allocator.replicas(taken[0].addr), 128, SENTINEL))

    chains = drive(traverse_log(pool.geometry, pool.regions, lambda: pool.alive, 0,
                                pool.regions.index_nodes()), pool.fabric)
    chain = chains[1]
    assert [r.addr for r in chain] == [a.addr for a in taken]
    assert [r.seq for r in chain] == [1, 2, 3]
    assert chain[0].state is EntryState.COMMITTED
    assert chain[-1].state is EntryState.UNCOMMITTED
    assert chains[0] == []


def test_traverse_reads_another_replica_when_one_crashed(pool):
    allocator = pool.allocator(cid=0)
    a = allocator.take(0)
    write_object(pool, allocator, a, b"k", b"v")
    g, _ = pool.geometry.locate_block(a.addr.offset)
    first = pool.regions.place_region(g)[0]
    pool.fabric.crash(first)
    meta = [n for n in pool.regions.index_nodes() if n != first]
    pool.alive.discard(first)

    chains = drive(traverse_log(pool.geometry, pool.regions, lambda: pool.alive, 0, meta), pool.fabric)
    assert [r.addr for r in chains[0]] == [a.addr]
    assert chains[0][0].obj.key == b"k"


def test_commit_then_cancel_on_stored_replicas(pool):
    allocator = pool.allocator(cid=0)
    a = allocator.take(1)
    write_object(pool, allocator, a, b"k", b"v", UPDATE)
    replicas = allocator.replicas(a.addr)

    issue(pool.fabric, commit_ops(replicas, a.size, 0x1234))
    for r in replicas:
        entry = decode_object(pool.fabric.load(r.node, r.offset, a.size)).entry
        assert entry.committed and entry.old_value == 0x1234 and entry.used == 1

    drive(cancel_entry(replicas, a.size, UPDATE), pool.fabric)
    for r in replicas:
        assert decode_object(pool.fabric.load(r.node, r.offset, a.size)).entry.used == 0


def test_invalidated_object_stays_readable(pool):
    allocator = pool.allocator(cid=0)
    a = allocator.take(0)
    write_object(pool, allocator, a, b"k", b"v")
    issue(pool.fabric, invalidate_ops(allocator.replicas(a.addr)))
    obj = decode_object(pool.fabric.load(a.addr.node, a.addr.offset, a.size))
    assert obj.invalid and obj.readable
    assert obj.value == b"v"
