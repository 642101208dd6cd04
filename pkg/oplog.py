"""
Embedded operation log
22-byte LogEntry trailing every object, the KV object codec around it,
commit/cancel/retire ops and the per-size-class recovery traversal.
"""

import logging
from dataclasses import dataclass, asdict
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional

from errors import FAIL, RecoveryBlocked
from fabric import FabricOp, Phase, RemoteAddr, WORD
from memalloc import ENTRY_BYTES, HEADER_BYTES, NULL, Allocation, Geometry, RegionMap

logger = logging.getLogger(__name__)

INSERT = 1
UPDATE = 2
DELETE = 3
OPCODES = {INSERT: "INSERT", UPDATE: "UPDATE", DELETE: "DELETE"}
RETIRED = 0x40
COMMIT_MASK = 0xA5
SENTINEL = 1

FLAG_INVALID = 0x01
FLAG_TOMBSTONE = 0x02
FLAG_PENDING = 0x04
CRC_FLAGS = FLAG_TOMBSTONE | FLAG_PENDING

_CRC8 = []
for _byte in range(256):
    _crc = _byte
    for _ in range(8):
        _crc = ((_crc << 1) ^ 0x07) & 0xFF if _crc & 0x80 else (_crc << 1) & 0xFF
    _CRC8.append(_crc)


def crc8(data: bytes) -> int:
    """CRC-8, polynomial 0x07, init 0."""
    crc = 0
    for b in data:
        crc = _CRC8[crc ^ b]
    return crc


def commit_crc(old_value: int) -> int:
    return crc8(old_value.to_bytes(WORD, "little")) ^ COMMIT_MASK


class EntryState(Enum):
    UNUSED = "UNUSED"
    INCOMPLETE = "INCOMPLETE_ENTRY"
    UNCOMMITTED = "UNCOMMITTED"
    COMMITTED = "COMMITTED"


@dataclass
class LogEntry:
    next: int = NULL
    prev: int = NULL
    old_value: int = 0
    crc: int = 0
    opcode: int = 0
    used: int = 0

    SIZE = ENTRY_BYTES

    @property
    def final_byte(self) -> int:
        return ((self.opcode & 0x7F) << 1) | (self.used & 1)

    @property
    def op(self) -> int:
        return self.opcode & ~RETIRED

    @property
    def retired(self) -> bool:
        return bool(self.opcode & RETIRED)

    @property
    def committed(self) -> bool:
        return self.crc == commit_crc(self.old_value)

    def pack(self) -> bytes:
        return (self.next.to_bytes(6, "little") + self.prev.to_bytes(6, "little")
                + self.old_value.to_bytes(WORD, "little") + bytes([self.crc, self.final_byte]))

    @classmethod
    def unpack(cls, raw: bytes) -> "LogEntry":
        if len(raw) != ENTRY_BYTES:
            raise ValueError(f"log entry must be {ENTRY_BYTES} bytes, got {len(raw)}")
        final = raw[21]
        return cls(int.from_bytes(raw[0:6], "little"), int.from_bytes(raw[6:12], "little"),
                   int.from_bytes(raw[12:20], "little"), raw[20], final >> 1, final & 1)

    def to_dict(self):
        return asdict(self)


def build_entry(opcode: int, alloc: Allocation) -> LogEntry:
    """Fresh uncommitted entry: next pre-positioned at the free-list head, prev at the last allocation."""
    return LogEntry(next=alloc.next, prev=alloc.prev, old_value=0, crc=0, opcode=opcode, used=1)


# ---------------------------------------------------------------------------
# KV object codec: 8-byte header | key | value | ... | 22-byte entry
# ---------------------------------------------------------------------------

@dataclass
class KvObject:
    key: bytes
    value: bytes
    flags: int
    seq: int
    crc_ok: bool
    entry: LogEntry

    @property
    def tombstone(self) -> bool:
        return bool(self.flags & FLAG_TOMBSTONE)

    @property
    def invalid(self) -> bool:
        return bool(self.flags & FLAG_INVALID)

    @property
    def pending(self) -> bool:
        return bool(self.flags & FLAG_PENDING)

    @property
    def readable(self) -> bool:
        return self.crc_ok and len(self.key) > 0

    @property
    def live(self) -> bool:
        """Readable and visible to readers: neither a tombstone nor an unpublished insert."""
        return self.readable and not self.flags & CRC_FLAGS


def object_size(key: bytes, value: bytes) -> int:
    return HEADER_BYTES + len(key) + len(value) + ENTRY_BYTES


def _kv_crc(key: bytes, value: bytes, flags: int, seq: int) -> int:
    return crc8(bytes([len(key), flags & CRC_FLAGS]) + len(value).to_bytes(2, "little")
                + seq.to_bytes(3, "little") + key + value)


def _header(key: bytes, value: bytes, flags: int, seq: int) -> bytes:
    return (bytes([len(key), flags, _kv_crc(key, value, flags, seq)])
            + len(value).to_bytes(2, "little") + seq.to_bytes(3, "little"))


def encode_object(key: bytes, value: bytes, alloc: Allocation, opcode: int,
                  tombstone: bool = False, logging_enabled: bool = True, pending: bool = False) -> bytes:
    if not 0 < len(key) < 256 or len(value) >= 1 << 16:
        raise ValueError("key must be 1..255 bytes and value under 64 KiB")
    if object_size(key, value) > alloc.size:
        raise ValueError(f"object of {object_size(key, value)} bytes does not fit class {alloc.size}")
    flags = (FLAG_TOMBSTONE if tombstone else 0) | (FLAG_PENDING if pending else 0)
    body = _header(key, value, flags, alloc.seq & 0xFFFFFF) + key + value
    entry = build_entry(opcode, alloc).pack() if logging_enabled else bytes(ENTRY_BYTES)
    return body + bytes(alloc.size - len(body) - ENTRY_BYTES) + entry


def decode_object(raw: bytes) -> KvObject:
    key_len, flags, crc = raw[0], raw[1], raw[2]
    value_len = int.from_bytes(raw[3:5], "little")
    seq = int.from_bytes(raw[5:8], "little")
    entry = LogEntry.unpack(raw[-ENTRY_BYTES:])
    end = HEADER_BYTES + key_len + value_len
    if key_len == 0 or end > len(raw) - ENTRY_BYTES:
        return KvObject(b"", b"", flags, seq, False, entry)
    key = bytes(raw[HEADER_BYTES:HEADER_BYTES + key_len])
    value = bytes(raw[HEADER_BYTES + key_len:end])
    ok = crc == _kv_crc(key, value, flags, seq)
    return KvObject(key, value, flags, seq, ok, entry)


def seq_of(raw: bytes) -> int:
    return int.from_bytes(raw[5:8], "little")


# ---------------------------------------------------------------------------
# Entry mutations, one op per object replica
# ---------------------------------------------------------------------------

def entry_offset(addr: RemoteAddr, size: int) -> int:
    return addr.offset + size - ENTRY_BYTES


def commit_ops(replicas: Iterable[RemoteAddr], size: int, old_value: int) -> List[FabricOp]:
    """old_value and its crc in one WRITE per replica."""
    data = old_value.to_bytes(WORD, "little") + bytes([commit_crc(old_value)])
    return [FabricOp.write(RemoteAddr(r.node, entry_offset(r, size) + 12), data) for r in replicas]


def final_byte_ops(replicas: Iterable[RemoteAddr], size: int, opcode: int, used: int) -> List[FabricOp]:
    byte = bytes([((opcode & 0x7F) << 1) | used])
    return [FabricOp.write(RemoteAddr(r.node, r.offset + size - 1), byte) for r in replicas]


def cancel_ops(replicas: Iterable[RemoteAddr], size: int, opcode: int) -> List[FabricOp]:
    return final_byte_ops(replicas, size, opcode, 0)


def cancel_entry(replicas: List[RemoteAddr], size: int, opcode: int, epoch: Optional[int] = None):
    """Generator: clear the used bit. FAIL on a crashed replica is tolerated."""
    results = yield Phase(cancel_ops(replicas, size, opcode), "cancel", epoch)
    if FAIL in results:
        logger.warning(f"cancel of {replicas[0]} hit a crashed replica")
    return results


def retire_ops(replicas: Iterable[RemoteAddr], size: int, opcode: int) -> List[FabricOp]:
    return final_byte_ops(replicas, size, opcode | RETIRED, 1)


def header_ops(replicas: Iterable[RemoteAddr], key: bytes, value: bytes, seq: int,
               tombstone: bool = False) -> List[FabricOp]:
    """Rewrite the header in place: publish a pending insert, or withdraw it as a tombstone."""
    raw = _header(key, value, FLAG_TOMBSTONE if tombstone else 0, seq & 0xFFFFFF)
    return [FabricOp.write(r, raw) for r in replicas]


def invalidate_ops(replicas: Iterable[RemoteAddr], tombstone: bool = False) -> List[FabricOp]:
    flags = bytes([FLAG_INVALID | (FLAG_TOMBSTONE if tombstone else 0)])
    return [FabricOp.write(RemoteAddr(r.node, r.offset + 1), flags) for r in replicas]


# ---------------------------------------------------------------------------
# Recovery traversal
# ---------------------------------------------------------------------------

@dataclass
class LogRecord:
    addr: RemoteAddr
    size_class: int
    seq: int
    obj: KvObject
    state: EntryState = EntryState.UNUSED

    @property
    def entry(self) -> LogEntry:
        return self.obj.entry


def classify(entry: LogEntry, is_tail: bool) -> EntryState:
    if entry.final_byte == 0 and is_tail:
        return EntryState.INCOMPLETE
    if not entry.used:
        return EntryState.UNUSED
    if not entry.committed:
        return EntryState.UNCOMMITTED
    return EntryState.COMMITTED


def read_list_heads(geometry: Geometry, cid: int, meta_nodes: List[int], label: str = "traverse"):
    """Generator: per-class list heads from the first metadata replica that answers."""
    classes = range(len(geometry.size_classes))
    ops = [FabricOp.read(RemoteAddr(n, geometry.registry_offset(cid, c))) for n in meta_nodes for c in classes]
    results = yield Phase(ops, label)
    heads = {}
    for i, node in enumerate(meta_nodes):
        for c in classes:
            raw = results[i * len(classes) + c]
            if raw is not FAIL and c not in heads:
                heads[c] = int.from_bytes(raw, "little")
    if len(heads) < len(classes):
        raise RecoveryBlocked(f"list heads of client {cid} have no alive replica")
    return heads


def traverse_log(geometry: Geometry, regions: RegionMap, alive: Callable[[], Iterable[int]],
                 cid: int, meta_nodes: List[int], label: str = "traverse"):
    """
    Generator: walk every size-class list of `cid` in allocation order.

    A link is followed only while the next object's allocation sequence grows,
    which stops the walk at the first object the client never wrote after the
    current one. Returns {class: [LogRecord, ...]} with tails classified.
    """
    heads = yield from read_list_heads(geometry, cid, meta_nodes, label)
    chains: Dict[int, List[LogRecord]] = {c: [] for c in heads}
    cursor = {c: RemoteAddr.unpack(h) for c, h in heads.items() if h != NULL}
    last_seq = {c: 0 for c in heads}
    attempt = {c: 0 for c in heads}
    visited = set()
    while cursor:
        alive_nodes = set(alive())
        want = []
        for c, addr in sorted(cursor.items()):
            g, _ = geometry.locate_block(addr.offset)
            nodes = [n for n in regions.place_region(g) if n in alive_nodes]
            if attempt[c] >= len(nodes):
                raise RecoveryBlocked(f"object {addr} of client {cid} has no alive replica")
            want.append((c, addr, addr.on(nodes[attempt[c]])))
        results = yield Phase([FabricOp.read(replica, geometry.size_classes[c]) for c, _, replica in want], label)
        for (c, addr, _), raw in zip(want, results):
            if raw is FAIL:
                attempt[c] += 1
                continue
            attempt[c] = 0
            seq = seq_of(raw)
            if seq <= last_seq[c] or addr in visited:
                del cursor[c]
                continue
            visited.add(addr)
            obj = decode_object(raw)
            chains[c].append(LogRecord(addr, c, seq, obj))
            last_seq[c] = seq
            if obj.entry.next == NULL:
                del cursor[c]
            else:
                cursor[c] = RemoteAddr.unpack(obj.entry.next)
    for c, chain in chains.items():
        for i, record in enumerate(chain):
            record.state = classify(record.entry, i == len(chain) - 1)
    return chains
