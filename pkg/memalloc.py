"""
Two-level remote memory management
Consistent-hash region placement, MN-side block grants recorded in replicated
allocation tables, client-side slab allocation and free-bitmap reclamation.
"""

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import mmh3
from sortedcontainers import SortedList

from config import SimConfig
from errors import ConfigError, FAIL, OUT_OF_MEMORY, OutOfMemory, TooLarge
from fabric import Fabric, FabricOp, Phase, RemoteAddr, WORD

logger = logging.getLogger(__name__)

NULL = 0
HEADER_BYTES = 8
ENTRY_BYTES = 22
RESERVED = 64


def _align(value: int, to: int) -> int:
    return (value + to - 1) // to * to


class Geometry:
    """Byte layout shared by every memory node."""

    def __init__(self, config: SimConfig):
        self.config = config
        self.granule = config.min_class
        self.block_size = config.block_size
        self.region_size = config.region_size
        self.num_regions = config.regions
        self.size_classes: List[int] = []
        size = config.min_class
        while size <= config.block_size:
            self.size_classes.append(size)
            size *= 2
        if HEADER_BYTES + ENTRY_BYTES + 1 > self.size_classes[0]:
            raise ConfigError("smallest size class cannot hold header and log entry")

        self.slots_per_key = config.slots_per_key
        self.index_base = RESERVED
        self.index_bytes = config.index_capacity * config.slots_per_key * WORD
        self.registry_base = _align(self.index_base + self.index_bytes, 64)
        self.registry_bytes = config.max_clients * len(self.size_classes) * WORD
        self.data_start = _align(self.registry_base + self.registry_bytes, 4096)

        bits = self.block_size // self.granule
        self.bitmap_words = (bits + 63) // 64
        self.bitmap_bytes = _align(self.bitmap_words * WORD, 64)
        self.frame = self.bitmap_bytes + self.block_size
        per_region = (self.region_size - 64) // (self.frame + WORD)
        self.table_bytes = _align(per_region * WORD, 64)
        while self.table_bytes + per_region * self.frame > self.region_size:
            per_region -= 1
            self.table_bytes = _align(per_region * WORD, 64)
        if per_region < 1:
            raise ConfigError("region too small for one block")
        self.blocks_per_region = per_region
        self.capacity = self.data_start + self.num_regions * self.region_size

    # -- index / registry ---------------------------------------------------

    @property
    def slot_count(self) -> int:
        return self.index_bytes // WORD

    def slot_offset(self, slot: int) -> int:
        return self.index_base + slot * WORD

    def registry_offset(self, cid: int, size_class: int) -> int:
        return self.registry_base + (cid * len(self.size_classes) + size_class) * WORD

    # -- regions and blocks ---------------------------------------------------

    def region_base(self, g: int) -> int:
        return self.data_start + g * self.region_size

    def table_offset(self, g: int, k: int) -> int:
        return self.region_base(g) + k * WORD

    def frame_offset(self, g: int, k: int) -> int:
        return self.region_base(g) + self.table_bytes + k * self.frame

    def data_offset(self, g: int, k: int) -> int:
        return self.frame_offset(g, k) + self.bitmap_bytes

    def locate_block(self, offset: int) -> Tuple[int, int]:
        """(region, block) holding a data or bitmap offset."""
        g, rest = divmod(offset - self.data_start, self.region_size)
        k = (rest - self.table_bytes) // self.frame
        return g, k

    def free_bit(self, offset: int) -> Tuple[int, int]:
        """Bitmap word offset and bit index for an object start offset."""
        g, k = self.locate_block(offset)
        bit = (offset - self.data_offset(g, k)) // self.granule
        return self.frame_offset(g, k) + (bit // 64) * WORD, bit % 64

    def class_for(self, size: int) -> int:
        for i, class_size in enumerate(self.size_classes):
            if size <= class_size:
                return i
        raise TooLarge(f"{size} bytes exceeds the largest size class {self.size_classes[-1]}")

    def objects_in_block(self, size_class: int) -> int:
        return self.block_size // self.size_classes[size_class]

    def block_objects(self, node: int, g: int, k: int, size_class: int) -> List[RemoteAddr]:
        base, size = self.data_offset(g, k), self.size_classes[size_class]
        return [RemoteAddr(node, base + i * size) for i in range(self.objects_in_block(size_class))]


def encode_row(cid: int, size_class: int) -> int:
    return (cid + 1) | (size_class << 32)


def decode_row(row: int) -> Optional[Tuple[int, int]]:
    """(owner cid, size class) or None for a free row."""
    if row == 0:
        return None
    return (row & 0xFFFFFFFF) - 1, row >> 32


class RegionMap:
    """Consistent-hash ring of memory nodes with virtual nodes."""

    def __init__(self, num_nodes: int, r: int, vnodes: int = 16, seed: int = 0, num_regions: int = 0):
        if r > num_nodes:
            raise ConfigError(f"replication factor {r} exceeds {num_nodes} memory nodes")
        self.num_nodes = num_nodes
        self.r = r
        self.seed = seed
        self.ring = SortedList()
        for node in range(num_nodes):
            for i in range(vnodes):
                self.ring.add((mmh3.hash(f"mn{node}#{i}", seed, signed=False), node))
        self.num_regions = num_regions
        self._placements: Dict[int, List[int]] = {}

    def _walk(self, label: str):
        start = self.ring.bisect_left((mmh3.hash(label, self.seed, signed=False), -1))
        for i in range(len(self.ring)):
            yield self.ring[(start + i) % len(self.ring)][1]

    def place_key(self, label: str, count: int) -> List[int]:
        nodes: List[int] = []
        for node in self._walk(label):
            if node not in nodes:
                nodes.append(node)
                if len(nodes) == count:
                    break
        if len(nodes) < count:
            raise ConfigError(f"ring has only {len(nodes)} nodes, need {count}")
        return nodes

    def place_region(self, region_id: int) -> List[int]:
        placement = self._placements.get(region_id)
        if placement is None:
            placement = self._placements[region_id] = self.place_key(f"region-{region_id}", self.r)
        return list(placement)

    def index_nodes(self) -> List[int]:
        return self.place_key("index", self.r)

    def next_alive(self, label: str, exclude: Iterable[int], alive: Iterable[int]) -> Optional[int]:
        exclude, alive = set(exclude), set(alive)
        for node in self._walk(label):
            if node in alive and node not in exclude:
                return node
        return None

    def primary_regions(self, node: int) -> List[int]:
        return [g for g in range(self.num_regions) if self.place_region(g)[0] == node]


class BlockGranter:
    """MN-side ALLOC_BLOCK handler installed on the fabric."""

    def __init__(self, fabric: Fabric, geometry: Geometry, regions: RegionMap):
        self.fabric = fabric
        self.geometry = geometry
        self.regions = regions
        self._primary = {n: regions.primary_regions(n) for n in range(fabric.num_nodes)}
        fabric.alloc_handler = self

    def __call__(self, node: int, cid: int, size_class: int):
        geo = self.geometry
        for g in self._primary[node]:
            for k in range(geo.blocks_per_region):
                if self.fabric.load_word(node, geo.table_offset(g, k)) != 0:
                    continue
                row = encode_row(cid, size_class)
                for replica in self.regions.place_region(g):
                    if self.fabric.alive(replica):
                        self.fabric.store_word(replica, geo.table_offset(g, k), row)
                return RemoteAddr(node, geo.data_offset(g, k))
        logger.warning(f"Memory node {node} has no free block for client {cid}")
        return OUT_OF_MEMORY

    def grant_nodes(self) -> List[int]:
        return [n for n, owned in self._primary.items() if owned]


class ClientAllocator:
    """
    Per-client slab allocator.

    Free lists hold object addresses in allocation order; the head of each list
    is the next object handed out, which lets a log entry pre-position its
    `next` pointer before the object is written.
    """

    def __init__(self, cid: int, geometry: Geometry, regions: RegionMap,
                 alive: Callable[[], Iterable[int]], grant_nodes: List[int], watermark: int = 2):
        self.cid = cid
        self.geometry = geometry
        self.regions = regions
        self.alive = alive
        self.grant_nodes = list(grant_nodes)
        self.watermark = max(2, watermark)
        n = len(geometry.size_classes)
        self.free: List[deque] = [deque() for _ in range(n)]
        self.last: List[int] = [NULL] * n
        self.seq: List[int] = [0] * n
        self.heads: List[int] = [NULL] * n
        self.blocks: Dict[RemoteAddr, int] = {}
        self._rr = cid

    # -- block grants ---------------------------------------------------------

    def _next_grant_node(self) -> int:
        alive = set(self.alive())
        for _ in range(len(self.grant_nodes)):
            node = self.grant_nodes[self._rr % len(self.grant_nodes)]
            self._rr += 1
            if node in alive:
                return node
        raise OutOfMemory("no alive memory node owns a primary region")

    def _carve(self, block: RemoteAddr, size_class: int):
        g, k = self.geometry.locate_block(block.offset)
        self.blocks[block] = size_class
        self.free[size_class].extend(self.geometry.block_objects(block.node, g, k, size_class))

    def grow(self, classes: List[int], label: str = "alloc"):
        """One phase of ALLOC_BLOCK requests, retried on other nodes when one is exhausted."""
        wanted = list(classes)
        attempts = 0
        while wanted:
            attempts += 1
            if attempts > 2 * max(1, len(self.grant_nodes)):
                raise OutOfMemory(f"client {self.cid}: no block for classes {wanted}")
            ops = [FabricOp.alloc_block(self._next_grant_node(), self.cid, c) for c in wanted]
            results = yield Phase(ops, label)
            retry = []
            for size_class, result in zip(wanted, results):
                if result is FAIL or result is OUT_OF_MEMORY:
                    retry.append(size_class)
                else:
                    self._carve(result, size_class)
            wanted = retry

    def init(self, meta_nodes: List[int]):
        """Grant one block per class, then record the list heads on the metadata replicas."""
        yield from self.grow(list(range(len(self.free))), label="alloc")
        ops = []
        for c, lst in enumerate(self.free):
            self.heads[c] = lst[0].pack()
            for node in meta_nodes:
                off = self.geometry.registry_offset(self.cid, c)
                ops.append(FabricOp.write(RemoteAddr(node, off), self.heads[c].to_bytes(WORD, "little")))
        yield Phase(ops, "list_heads")

    def ensure(self, size_class: int):
        if len(self.free[size_class]) < 2:
            yield from self.grow([size_class], label="alloc")

    def needs_refill(self) -> List[int]:
        return [c for c, lst in enumerate(self.free) if 0 < self.seq[c] and len(lst) < self.watermark]

    # -- object allocation ------------------------------------------------------

    def client_alloc(self, size: int):
        """Generator: allocate an object of `size` bytes; returns an Allocation."""
        size_class = self.geometry.class_for(size)
        yield from self.ensure(size_class)
        return self.take(size_class)

    def take(self, size_class: int) -> "Allocation":
        lst = self.free[size_class]
        if not lst:
            raise OutOfMemory(f"client {self.cid}: free list for class {size_class} is empty")
        addr = lst.popleft()
        nxt = lst[0].pack() if lst else NULL
        prev = self.last[size_class]
        self.last[size_class] = addr.pack()
        self.seq[size_class] += 1
        return Allocation(addr, size_class, self.geometry.size_classes[size_class], prev, nxt,
                          self.seq[size_class])

    # -- frees and reclamation ------------------------------------------------------

    def replicas(self, addr: RemoteAddr) -> List[RemoteAddr]:
        return object_replicas(self.geometry, self.regions, addr, self.alive())

    def reclaim_scan(self):
        """Generator: move freed objects of this client's blocks back to the free lists."""
        return (yield from reclaim_blocks(self.geometry, self.regions, self.alive, self.blocks,
                                          self._reclaimed, label="reclaim"))

    def _reclaimed(self, addrs: List[RemoteAddr], size_class: int):
        self.free[size_class].extend(addrs)


@dataclass
class Allocation:
    addr: RemoteAddr
    size_class: int
    size: int
    prev: int
    next: int
    seq: int


def reclaim_blocks(geometry: Geometry, regions: RegionMap, alive: Callable[[], Iterable[int]],
                   blocks: Dict[RemoteAddr, int], sink: Callable[[List[RemoteAddr], int], None],
                   label: str = "reclaim"):
    """
    Shared reclaim pass, run by a client or by the master on its behalf.

    A bit counts as pending only when it is set on every alive replica. Pending
    objects get used=0 written into their final byte, then their bits are
    cleared with CAS (re-read and retried when a concurrent FAA slipped in),
    and only then handed to `sink`.
    """
    alive_nodes = set(alive())
    plan = []
    for block, size_class in sorted(blocks.items()):
        g, k = geometry.locate_block(block.offset)
        nodes = [n for n in regions.place_region(g) if n in alive_nodes]
        if nodes:
            plan.append((block, size_class, g, k, nodes))
    if not plan:
        return 0

    reads = [FabricOp.read(RemoteAddr(n, geometry.frame_offset(g, k) + w * WORD))
             for _, _, g, k, nodes in plan for n in nodes for w in range(geometry.bitmap_words)]
    results = iter((yield Phase(reads, label)))

    pending = []
    for block, size_class, g, k, nodes in plan:
        per_node = {n: [next(results) for _ in range(geometry.bitmap_words)] for n in nodes}
        observed = {n: words for n, words in per_node.items() if FAIL not in words}
        if not observed:
            continue
        for w in range(geometry.bitmap_words):
            mask = ~0
            for words in observed.values():
                mask &= int.from_bytes(words[w], "little")
            mask &= (1 << 64) - 1
            if mask:
                pending.append((block, size_class, g, k, w, mask,
                                {n: int.from_bytes(words[w], "little") for n, words in observed.items()}))
    if not pending:
        return 0

    size_of = geometry.size_classes
    freed: List[Tuple[List[RemoteAddr], int]] = []
    marks = []
    for block, size_class, g, k, w, mask, observed in pending:
        base = geometry.data_offset(g, k)
        addrs = []
        for bit in range(64):
            if mask >> bit & 1:
                offset = base + (w * 64 + bit) * geometry.granule
                addrs.append(RemoteAddr(block.node, offset))
                end = offset + size_of[size_class] - 1
                marks.extend(FabricOp.write(RemoteAddr(n, end), b"\x00") for n in observed)
        freed.append((addrs, size_class))
    yield Phase(marks, label)

    todo = [(RemoteAddr(n, geometry.frame_offset(g, k) + w * WORD), old, mask)
            for _, _, g, k, w, mask, observed in pending for n, old in observed.items()]
    while todo:
        results = yield Phase([FabricOp.cas(addr, old, old & ~mask) for addr, old, mask in todo], label)
        retry = []
        for (addr, old, mask), got in zip(todo, results):
            if got is not FAIL and got != old:
                retry.append((addr, got, mask))
        todo = retry

    count = 0
    for addrs, size_class in freed:
        sink(addrs, size_class)
        count += len(addrs)
    return count


def object_replicas(geometry: Geometry, regions: RegionMap, addr: RemoteAddr,
                    alive_nodes: Iterable[int]) -> List[RemoteAddr]:
    """Alive copies of an object, primary region first."""
    g, _ = geometry.locate_block(addr.offset)
    alive_nodes = set(alive_nodes)
    return [addr.on(n) for n in regions.place_region(g) if n in alive_nodes]


def free_bit_ops(geometry: Geometry, regions: RegionMap, addr: RemoteAddr,
                 alive_nodes: Iterable[int]) -> List[FabricOp]:
    """FAA ops setting the object's free bit on every alive region replica."""
    word, bit = geometry.free_bit(addr.offset)
    return [FabricOp.set_bit(RemoteAddr(n, word), bit)
            for n, _ in object_replicas(geometry, regions, addr, alive_nodes)]
