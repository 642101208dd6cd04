"""
Replicated slot-table index and the client-side adaptive index cache
"""

from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, List, NamedTuple, Optional, Tuple

import mmh3

from errors import FAIL
from fabric import FabricOp, Phase, RemoteAddr, WORD
from memalloc import Geometry, RegionMap, object_replicas
from oplog import KvObject, decode_object

PTR_MASK = (1 << 48) - 1


class SlotWord(NamedTuple):
    fp: int
    len_class: int
    ptr: int

    @property
    def word(self) -> int:
        return (self.fp & 0xFF) << 56 | (self.len_class & 0xFF) << 48 | (self.ptr & PTR_MASK)

    @property
    def addr(self) -> RemoteAddr:
        return RemoteAddr.unpack(self.ptr)

    @classmethod
    def decode(cls, word: int) -> "SlotWord":
        return cls(word >> 56 & 0xFF, word >> 48 & 0xFF, word & PTR_MASK)


def encode_slot(fp: int, len_class: int, addr: RemoteAddr) -> int:
    return SlotWord(fp, len_class, addr.pack()).word


def key_hash(key: bytes, seed: int = 0) -> int:
    return mmh3.hash64(key, seed, signed=False)[0]


class Location(NamedTuple):
    group: int
    fp: int
    slots: Tuple[int, ...]


class IndexTable:
    """Fixed-capacity associative table: a key hashes to one group of slots_per_key slots."""

    def __init__(self, geometry: Geometry, capacity: int, seed: int = 0):
        self.geometry = geometry
        self.capacity = capacity
        self.slots_per_key = geometry.slots_per_key
        self.seed = seed

    def locate(self, key: bytes) -> Location:
        h = key_hash(key, self.seed)
        group = h % self.capacity
        first = group * self.slots_per_key
        return Location(group, h & 0xFF, tuple(range(first, first + self.slots_per_key)))

    def group_offset(self, group: int) -> int:
        return self.geometry.slot_offset(group * self.slots_per_key)

    @property
    def group_bytes(self) -> int:
        return self.slots_per_key * WORD

    def read_group_op(self, node: int, group: int) -> FabricOp:
        return FabricOp.read(RemoteAddr(node, self.group_offset(group)), self.group_bytes)

    @staticmethod
    def words(raw: bytes) -> List[int]:
        return [int.from_bytes(raw[i:i + WORD], "little") for i in range(0, len(raw), WORD)]


class MatchStatus(Enum):
    FOUND = "FOUND"
    NOT_FOUND = "NOT_FOUND"
    CORRUPT = "CORRUPT"


@dataclass
class Match:
    status: MatchStatus
    slot: Optional[int] = None
    word: int = 0
    obj: Optional[KvObject] = None


class ObjectReader:
    """Reads KV objects from the first alive replica, falling back on FAIL."""

    def __init__(self, geometry: Geometry, regions: RegionMap, alive: Callable[[], Iterable[int]]):
        self.geometry = geometry
        self.regions = regions
        self.alive = alive

    def op(self, word: int, attempt: int = 0) -> Optional[FabricOp]:
        slot = SlotWord.decode(word)
        replicas = object_replicas(self.geometry, self.regions, slot.addr, self.alive())
        if attempt >= len(replicas):
            return None
        return FabricOp.read(replicas[attempt], self.geometry.size_classes[slot.len_class])

    def read(self, words: List[int], label: str, epoch: Optional[int] = None, first: Optional[list] = None):
        """
        Generator: decode the objects behind `words`.

        `first` carries raw results already fetched in an earlier phase. Crashed
        replicas are retried on the next copy; unreadable objects map to None.
        """
        raws = list(first) if first is not None else [None] * len(words)
        attempts = [0 if raw is None else 1 for raw in raws]
        while True:
            ops = []
            for i, raw in enumerate(raws):
                if raw is None or raw is FAIL:
                    op = self.op(words[i], attempts[i])
                    if op is not None:
                        ops.append((i, op))
            if not ops:
                break
            results = yield Phase([op for _, op in ops], label, epoch)
            for (i, _), raw in zip(ops, results):
                attempts[i] += 1
                raws[i] = raw
        return [None if raw is None or raw is FAIL else decode_object(raw) for raw in raws]


def match_slot(reader: ObjectReader, words: List[int], slots: Tuple[int, ...], fp: int, key: bytes,
               epoch: Optional[int] = None, label: str = "verify"):
    """
    Generator: verify fingerprint candidates of a group against `key`.

    Tombstones and unpublished inserts count as absent. A checksum failure is
    re-read once before it is reported as CORRUPT.
    """
    candidates = [(slot, w) for slot, w in zip(slots, words) if w and SlotWord.decode(w).fp == fp]
    if not candidates:
        return Match(MatchStatus.NOT_FOUND)
    objs = yield from reader.read([w for _, w in candidates], label, epoch)
    corrupt = [i for i, obj in enumerate(objs) if obj is not None and not obj.readable]
    if corrupt:
        again = yield from reader.read([candidates[i][1] for i in corrupt], label, epoch)
        for i, obj in zip(corrupt, again):
            objs[i] = obj
    suspicious = False
    for (slot, w), obj in zip(candidates, objs):
        if obj is None:
            continue
        if not obj.readable:
            suspicious = True
            continue
        if obj.key == key and obj.live:
            return Match(MatchStatus.FOUND, slot, w, obj)
    return Match(MatchStatus.CORRUPT if suspicious else MatchStatus.NOT_FOUND)


# ---------------------------------------------------------------------------
# Adaptive index cache
# ---------------------------------------------------------------------------

class Route(Enum):
    HIT = "HIT"
    BYPASS = "BYPASS"
    MISS = "MISS"


@dataclass
class CacheEntry:
    slot: int
    word: int
    seq: int = 0
    access_counter: int = 0
    invalid_counter: int = 0

    @property
    def kv_addr(self) -> RemoteAddr:
        return SlotWord.decode(self.word).addr

    @property
    def invalid_ratio(self) -> float:
        return self.invalid_counter / self.access_counter if self.access_counter else 0.0


class IndexCache:
    """LRU map from key to the slot and slot word last seen for it."""

    def __init__(self, capacity: int = 1024, threshold: float = 0.5):
        self.capacity = capacity
        self.threshold = threshold
        self.entries: "OrderedDict[bytes, CacheEntry]" = OrderedDict()

    def route(self, key: bytes) -> Tuple[Route, Optional[CacheEntry]]:
        entry = self.entries.get(key)
        if entry is None:
            return Route.MISS, None
        self.entries.move_to_end(key)
        bypass = entry.invalid_ratio > self.threshold
        entry.access_counter += 1
        return (Route.BYPASS if bypass else Route.HIT), entry

    def peek(self, key: bytes) -> Optional[CacheEntry]:
        return self.entries.get(key)

    def fill(self, key: bytes, slot: int, word: int, seq: int = 0):
        entry = self.entries.get(key)
        if entry is None:
            self.entries[key] = CacheEntry(slot, word, seq)
            if len(self.entries) > self.capacity:
                self.entries.popitem(last=False)
        else:
            entry.slot, entry.word, entry.seq = slot, word, seq
            self.entries.move_to_end(key)

    def invalidated(self, key: bytes, slot: Optional[int] = None, word: int = 0, seq: int = 0):
        """Count an invalidation seen on an access; refresh or drop the cached location."""
        entry = self.entries.get(key)
        if entry is None:
            return
        entry.invalid_counter = min(entry.invalid_counter + 1, entry.access_counter)
        if slot is None or not word:
            entry.word, entry.seq = 0, 0
        else:
            entry.slot, entry.word, entry.seq = slot, word, seq

    def evict(self, key: bytes):
        self.entries.pop(key, None)

    def __len__(self):
        return len(self.entries)
