import pytest

from conftest import drive, issue, small_config
from errors import ConfigError, OUT_OF_MEMORY, TooLarge
from fabric import WORD, FabricOp, RemoteAddr
from memalloc import (ENTRY_BYTES, NULL, Geometry, RegionMap, decode_row, encode_row, free_bit_ops,
                      object_replicas)


def test_size_classes_double_from_min_class_to_block():
    geo = Geometry(small_config())
    assert geo.size_classes == [64, 128, 256, 512, 1024]
    assert geo.class_for(64) == 0
    assert geo.class_for(65) == 1
    assert geo.objects_in_block(1) == 8
    with pytest.raises(TooLarge):
        geo.class_for(1025)


def test_layout_keeps_index_registry_and_regions_apart():
    geo = Geometry(small_config())
    assert geo.index_base + geo.index_bytes <= geo.registry_base
    assert geo.registry_base + geo.registry_bytes <= geo.data_start
    assert geo.slot_count == 16 * 4
    last = geo.data_offset(geo.num_regions - 1, geo.blocks_per_region - 1) + geo.block_size
    assert last <= geo.capacity
    assert geo.locate_block(geo.data_offset(2, 3) + 100) == (2, 3)


def test_free_bit_addresses_one_granule_per_bit():
    geo = Geometry(small_config())
    word, bit = geo.free_bit(geo.data_offset(1, 2) + 3 * geo.granule)
    assert word == geo.frame_offset(1, 2)
    assert bit == 3


def test_allocation_rows_round_trip_and_empty_row_is_free():
    assert decode_row(encode_row(3, 2)) == (3, 2)
    assert decode_row(0) is None


def test_region_placement_is_distinct_and_stable():
    regions = RegionMap(5, 3, seed=9)
    again = RegionMap(5, 3, seed=9)
    for g in range(20):
        nodes = regions.place_region(g)
        assert len(set(nodes)) == 3
        assert nodes == again.place_region(g)
    assert len(regions.index_nodes()) == 3


def test_replication_factor_above_node_count_is_rejected():
    with pytest.raises(ConfigError):
        RegionMap(2, 3)


def test_next_alive_skips_excluded_and_dead_nodes():
    regions = RegionMap(4, 2)
    spare = regions.next_alive("index", exclude={0, 1}, alive={1, 2, 3})
    assert spare in (2, 3)
    assert regions.next_alive("index", exclude={0, 1, 2, 3}, alive={0, 1, 2, 3}) is None


def test_block_grant_writes_owner_row_on_every_region_replica(pool):
    node = pool.granter.grant_nodes()[0]
    block = pool.fabric.apply("c4", FabricOp.alloc_block(node, 4, 1))
    assert block.node == node
    g, k = pool.geometry.locate_block(block.offset)
    assert pool.regions.place_region(g)[0] == node
    for replica in pool.regions.place_region(g):
        assert pool.fabric.load_word(replica, pool.geometry.table_offset(g, k)) == encode_row(4, 1)


def test_grant_reports_out_of_memory_when_the_node_is_full(pool):
    node = pool.granter.grant_nodes()[0]
    blocks = len(pool.regions.primary_regions(node)) * pool.geometry.blocks_per_region
    for _ in range(blocks):
        assert pool.fabric.apply("c0", FabricOp.alloc_block(node, 0, 0)) is not OUT_OF_MEMORY
    assert pool.fabric.apply("c0", FabricOp.alloc_block(node, 0, 0)) is OUT_OF_MEMORY


def test_init_grants_one_block_per_class_and_registers_heads(pool):
    allocator = pool.allocator(cid=2)
    geo = pool.geometry
    assert sorted(allocator.blocks.values()) == list(range(len(geo.size_classes)))
    for c, lst in enumerate(allocator.free):
        assert len(lst) == geo.objects_in_block(c)
        for node in pool.regions.index_nodes():
            assert pool.fabric.load_word(node, geo.registry_offset(2, c)) == lst[0].pack()


def test_take_links_allocations_in_order(pool):
    allocator = pool.allocator()
    head = allocator.free[1][0]
    first = allocator.take(1)
    second = allocator.take(1)
    assert first.addr == head
    assert (first.prev, first.seq) == (NULL, 1)
    assert first.next == second.addr.pack()
    assert second.prev == first.addr.pack()
    assert second.seq == 2


def test_alloc_grows_a_fresh_block_when_a_class_runs_low(pool):
    allocator = pool.allocator(cid=1)
    largest = len(pool.geometry.size_classes) - 1
    addrs = [drive(allocator.client_alloc(1000), pool.fabric).addr for _ in range(3)]
    assert len({a for a in addrs}) == 3
    grown = [b for b, c in allocator.blocks.items() if c == largest]
    assert len(grown) >= 3
    for addr in addrs:
        g, k = pool.geometry.locate_block(addr.offset)
        for replica in pool.regions.place_region(g):
            assert pool.fabric.load_word(replica, pool.geometry.table_offset(g, k)) == encode_row(1, largest)


def test_reclaim_returns_freed_objects_and_clears_bits(pool):
    allocator = pool.allocator()
    alloc = allocator.take(0)
    size = pool.geometry.size_classes[0]
    for replica in allocator.replicas(alloc.addr):
        pool.fabric.store(replica.node, replica.offset + size - 1, b"\x03")
    issue(pool.fabric, free_bit_ops(pool.geometry, pool.regions, alloc.addr, pool.alive))
    assert alloc.addr not in allocator.free[0]

    assert drive(allocator.reclaim_scan(), pool.fabric) == 1
    assert allocator.free[0][-1] == alloc.addr
    word, bit = pool.geometry.free_bit(alloc.addr.offset)
    for replica in allocator.replicas(alloc.addr):
        assert not pool.fabric.load_word(replica.node, word) >> bit & 1
        assert pool.fabric.load(replica.node, replica.offset + size - 1, 1) == b"\x00"
    assert drive(allocator.reclaim_scan(), pool.fabric) == 0


def free_now(pool, addr):
    issue(pool.fabric, free_bit_ops(pool.geometry, pool.regions, addr, pool.alive))


def test_one_scan_reclaims_frees_spread_over_two_blocks(pool):
    allocator = pool.allocator()
    objs = [allocator.take(0), allocator.take(0), allocator.take(1)]
    assert len({pool.geometry.locate_block(a.addr.offset) for a in objs}) == 2
    for a in objs:
        free_now(pool, a.addr)

    assert drive(allocator.reclaim_scan(), pool.fabric) == 3
    assert {objs[0].addr, objs[1].addr} <= set(allocator.free[0])
    assert objs[2].addr in allocator.free[1]
    assert drive(allocator.reclaim_scan(), pool.fabric) == 0


def test_free_landing_between_reclaim_read_and_cas_is_kept(pool):
    allocator = pool.allocator()
    first, late = allocator.take(0), allocator.take(0)
    free_now(pool, first.addr)

    scan = allocator.reclaim_scan()
    phase = next(scan)  # bitmap reads
    phase = scan.send(issue(pool.fabric, phase.ops))  # used=0 marks
    phase = scan.send(issue(pool.fabric, phase.ops))  # bit clearing CAS, not applied yet
    free_now(pool, late.addr)
    while True:
        try:
            phase = scan.send(issue(pool.fabric, phase.ops))
        except StopIteration as done:
            reclaimed = done.value
            break
    assert reclaimed == 1
    assert first.addr in allocator.free[0] and late.addr not in allocator.free[0]

    word, bit = pool.geometry.free_bit(late.addr.offset)
    for replica in allocator.replicas(late.addr):
        assert pool.fabric.load_word(replica.node, word) >> bit & 1
    first_word, first_bit = pool.geometry.free_bit(first.addr.offset)
    for replica in allocator.replicas(first.addr):
        assert not pool.fabric.load_word(replica.node, first_word) >> first_bit & 1

    assert drive(allocator.reclaim_scan(), pool.fabric) == 1
    assert allocator.free[0][-1] == late.addr


def test_free_bit_ops_skip_dead_replicas(pool):
    addr = pool.allocator().take(0).addr
    g, _ = pool.geometry.locate_block(addr.offset)
    nodes = pool.regions.place_region(g)
    ops = free_bit_ops(pool.geometry, pool.regions, addr, set(nodes[:1]))
    assert [op.addr.node for op in ops] == nodes[:1]
    assert len(object_replicas(pool.geometry, pool.regions, addr, nodes)) == len(nodes)


def test_entry_fits_inside_the_smallest_class():
    geo = Geometry(small_config())
    assert ENTRY_BYTES == 22
    assert geo.size_classes[0] >= 8 + ENTRY_BYTES + 1
    assert WORD == 8
    assert RemoteAddr(0, geo.data_start).pack() > 0
