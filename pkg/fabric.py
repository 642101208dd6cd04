"""
Simulated memory-node fabric
Byte-addressed node memory with one-sided READ/WRITE/CAS/FAA, coarse ALLOC_BLOCK,
crash-stop nodes, epoch fencing and an event trace.
"""

import struct
import logging
from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional, Tuple

import mmh3

from errors import FAIL, OUT_OF_MEMORY

logger = logging.getLogger(__name__)

WORD = 8
MASK64 = (1 << 64) - 1
OFFSET_BITS = 40

READ = "READ"
WRITE = "WRITE"
CAS = "CAS"
FAA = "FAA"
ALLOC_BLOCK = "ALLOC_BLOCK"
MUTATING = (WRITE, CAS, FAA)


class RemoteAddr(NamedTuple):
    node: int
    offset: int

    def pack(self) -> int:
        """48-bit pointer: node id in the top 8 bits, byte offset below."""
        return (self.node << OFFSET_BITS) | self.offset

    @classmethod
    def unpack(cls, ptr: int) -> "RemoteAddr":
        return cls(ptr >> OFFSET_BITS, ptr & ((1 << OFFSET_BITS) - 1))

    def on(self, node: int) -> "RemoteAddr":
        return RemoteAddr(node, self.offset)

    def __add__(self, delta):
        return RemoteAddr(self.node, self.offset + delta)

    def __str__(self):
        return f"n{self.node}:{self.offset:#x}"


@dataclass(frozen=True)
class FabricOp:
    kind: str
    addr: RemoteAddr
    length: int = 0
    data: bytes = b""
    expected: int = 0
    operand: int = 0

    @classmethod
    def read(cls, addr: RemoteAddr, length: int = WORD) -> "FabricOp":
        return cls(READ, addr, length=length)

    @classmethod
    def write(cls, addr: RemoteAddr, data: bytes) -> "FabricOp":
        return cls(WRITE, addr, length=len(data), data=bytes(data))

    @classmethod
    def cas(cls, addr: RemoteAddr, expected: int, swap: int) -> "FabricOp":
        return cls(CAS, addr, length=WORD, expected=expected, operand=swap)

    @classmethod
    def faa(cls, addr: RemoteAddr, add: int) -> "FabricOp":
        return cls(FAA, addr, length=WORD, operand=add)

    @classmethod
    def set_bit(cls, addr: RemoteAddr, bit_index: int) -> "FabricOp":
        return cls.faa(addr, 1 << bit_index)

    @classmethod
    def alloc_block(cls, node: int, cid: int, size_class: int) -> "FabricOp":
        return cls(ALLOC_BLOCK, RemoteAddr(node, 0), expected=cid, operand=size_class)


class Phase:
    """A doorbell-batched group of ops. Costs one RTT however many ops it carries."""
    __slots__ = ("ops", "label", "epoch")

    def __init__(self, ops, label: str = "", epoch: Optional[int] = None):
        self.ops: Tuple[FabricOp, ...] = tuple(ops)
        self.label = label
        self.epoch = epoch

    def __repr__(self):
        return f"Phase({self.label}, {len(self.ops)} ops, e={self.epoch})"


class PhaseResult(list):
    rtt_cost = 1


class TraceEvent(NamedTuple):
    tick: int
    actor: str
    kind: str
    addr: str
    outcome: str

    def line(self) -> str:
        return f"{self.tick}, {self.actor}, {self.kind}, {self.addr}, {self.outcome}"

    @classmethod
    def parse(cls, line: str) -> "TraceEvent":
        tick, actor, kind, addr, outcome = line.split(", ", 4)
        return cls(int(tick), actor, kind, addr, outcome)


class Trace:
    """Ordered event log. Rendering is stable so equal runs give equal text."""

    def __init__(self, header: Optional[List[str]] = None):
        self.header: List[str] = list(header or [])
        self.events: List[TraceEvent] = []

    def record(self, tick: int, actor: str, kind: str, addr: str, outcome: str):
        self.events.append(TraceEvent(tick, actor, kind, addr, outcome))

    def lines(self) -> List[str]:
        return [f"# {h}" for h in self.header] + [e.line() for e in self.events]

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def of_kind(self, *kinds: str) -> List[TraceEvent]:
        return [e for e in self.events if e.kind in kinds]

    def __len__(self):
        return len(self.events)


def word_of(raw) -> int:
    """Little-endian 64-bit value of an 8-byte READ result; FAIL passes through."""
    if raw is FAIL:
        return FAIL
    return int.from_bytes(raw, "little")


def _outcome(op: FabricOp, result, epoch: Optional[int]) -> str:
    if result is FAIL or result is OUT_OF_MEMORY:
        text = repr(result)
    elif op.kind == READ:
        text = f"len={op.length}" if op.length != WORD else f"{int.from_bytes(result, 'little'):#x}"
    elif op.kind == WRITE:
        text = f"ok len={op.length}"
    elif op.kind == CAS:
        status = "ok" if result == op.expected else "miss"
        text = f"{status} {op.expected:#x}->{op.operand:#x} old={result:#x}"
    elif op.kind == FAA:
        text = f"+{op.operand:#x} old={result:#x}"
    else:
        text = str(result)
    if epoch is not None:
        text += f" e={epoch}"
    return text


class Fabric:
    """The memory-node pool. Every op applies atomically at its node."""

    def __init__(self, num_nodes: int, capacity: int, trace: Optional[Trace] = None,
                 track_digest: bool = False):
        self.num_nodes = num_nodes
        self.capacity = capacity
        self.mem: List[bytearray] = [bytearray(capacity) for _ in range(num_nodes)]
        self.crashed: set = set()
        self.trace = trace
        self.track_digest = track_digest
        self.digest = 0
        self.version = 0
        self.clock: Callable[[], int] = lambda: 0
        self.alloc_handler: Optional[Callable[[int, int, int], object]] = None
        self.fence_epoch = 0
        self.fence_range: Tuple[int, int] = (0, 0)
        self.fenced_ops = 0
        self.op_count = 0

    # ------------------------------------------------------------------
    # memory primitives (node-local, used by ops and by MN-side handlers)
    # ------------------------------------------------------------------

    def _check(self, addr: RemoteAddr, length: int):
        if not 0 <= addr.node < self.num_nodes:
            raise ValueError(f"no such node {addr.node}")
        if addr.offset <= 0 or addr.offset + length > self.capacity:
            raise ValueError(f"address {addr} (+{length}) outside node memory")

    def _mix(self, node: int, start: int, end: int):
        mem = self.mem[node]
        for w in range(start & ~7, end, WORD):
            word = mem[w:w + WORD]
            if any(word):
                self.digest ^= mmh3.hash128(struct.pack("<BQ", node, w) + bytes(word), signed=False)

    def store(self, node: int, offset: int, data: bytes):
        end = offset + len(data)
        if self.track_digest:
            self._mix(node, offset, end)
        self.mem[node][offset:end] = data
        if self.track_digest:
            self._mix(node, offset, end)
        self.version += 1

    def load(self, node: int, offset: int, length: int) -> bytes:
        return bytes(self.mem[node][offset:offset + length])

    def load_word(self, node: int, offset: int) -> int:
        return int.from_bytes(self.mem[node][offset:offset + WORD], "little")

    def store_word(self, node: int, offset: int, value: int):
        self.store(node, offset, (value & MASK64).to_bytes(WORD, "little"))

    # ------------------------------------------------------------------
    # fabric ops
    # ------------------------------------------------------------------

    def alive(self, node: int) -> bool:
        return node not in self.crashed

    def fence(self, epoch: int, start: int, end: int):
        """Reject index-area mutations tagged with an epoch older than `epoch`."""
        self.fence_epoch = epoch
        self.fence_range = (start, end)
        if self.trace is not None:
            self.trace.record(self.clock(), "fabric", "FENCE", f"index:{start:#x}-{end:#x}", f"epoch={epoch}")

    def _fenced(self, op: FabricOp, epoch: Optional[int]) -> bool:
        if epoch is None or epoch >= self.fence_epoch or op.kind not in MUTATING:
            return False
        start, end = self.fence_range
        return start <= op.addr.offset < end

    def apply(self, actor: str, op: FabricOp, epoch: Optional[int] = None):
        """Apply one op and return its result (bytes, old word, None, FAIL or OUT_OF_MEMORY)."""
        self.op_count += 1
        if op.addr.node in self.crashed:
            result = FAIL
        elif self._fenced(op, epoch):
            self.fenced_ops += 1
            result = FAIL
        elif op.kind == ALLOC_BLOCK:
            result = self.alloc_handler(op.addr.node, op.expected, op.operand)
        else:
            result = self._apply_memory(op)
        if self.trace is not None:
            addr = f"n{op.addr.node}:cls{op.operand}" if op.kind == ALLOC_BLOCK else str(op.addr)
            self.trace.record(self.clock(), actor, op.kind, addr, _outcome(op, result, epoch))
        return result

    def _apply_memory(self, op: FabricOp):
        node, offset = op.addr
        self._check(op.addr, op.length)
        if op.kind == READ:
            return self.load(node, offset, op.length)
        if op.kind == WRITE:
            self.store(node, offset, op.data)
            return None
        if offset % WORD:
            raise ValueError(f"{op.kind} at unaligned address {op.addr}")
        old = self.load_word(node, offset)
        if op.kind == CAS:
            if old == op.expected:
                self.store_word(node, offset, op.operand)
        elif op.kind == FAA:
            self.store_word(node, offset, old + op.operand)
        else:
            raise ValueError(f"unknown op kind {op.kind}")
        return old

    def crash(self, node: int):
        if node in self.crashed:
            return
        self.crashed.add(node)
        logger.info(f"Memory node {node} crashed at tick {self.clock()}")
        if self.trace is not None:
            self.trace.record(self.clock(), f"mn{node}", "CRASH", f"n{node}", "crash-stop")
