"""
KV request workflows
SEARCH, INSERT, UPDATE and DELETE built from doorbell-batched phases over the
replicated index, the SNAPSHOT slot protocol, the client allocator and the
embedded operation log.
"""

import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

from config import OP_NAMES
from errors import FAIL, LivenessError
from fabric import FabricOp, Phase, RemoteAddr, word_of
from index import IndexCache, Match, MatchStatus, ObjectReader, Route, SlotWord, encode_slot, match_slot
from memalloc import ClientAllocator, free_bit_ops, object_replicas
from oplog import (DELETE, INSERT, UPDATE, cancel_entry, commit_ops, encode_object, header_ops,
                   invalidate_ops, object_size, retire_ops)
from scheduler import AwaitEpoch, Backoff, Rpc
from slotproto import SlotSet, group_read, slot_write

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 8


class Status(Enum):
    OK = "OK"
    NOT_FOUND = "NOT_FOUND"
    EXISTS = "EXISTS"
    TABLE_FULL = "TABLE_FULL"
    ERROR = "ERROR"


@dataclass(frozen=True)
class KvRequest:
    op: str
    key: bytes
    value: bytes = b""

    def __post_init__(self):
        if self.op not in OP_NAMES:
            raise ValueError(f"unknown op {self.op}")
        if not self.key:
            raise ValueError("key must be non-empty")


@dataclass
class KvResponse:
    status: Status
    value: Optional[bytes] = None
    rtts: int = 0
    route: str = "-"
    rule: str = "-"
    verify: int = 0
    alloc: int = 0
    retries: int = 0
    master: bool = False
    install: Optional[Tuple[int, int, int]] = None

    def tokens(self) -> str:
        """Space separated key=value tokens carried on RESPOND trace events."""
        parts = [f"rtts={self.rtts}", f"route={self.route}", f"rule={self.rule}", f"verify={self.verify}",
                 f"alloc={self.alloc}", f"retries={self.retries}", f"master={int(self.master)}"]
        if self.install is not None:
            slot, word, seq = self.install
            parts.append(f"install={slot}/{word:#x}/{seq}")
        return " ".join(parts)


@dataclass
class Payload:
    """The out-of-place object a write proposes, and the slot word pointing at it."""
    addr: RemoteAddr
    size_class: int
    size: int
    seq: int
    word: int
    opcode: int
    key: bytes = b""
    value: bytes = b""


class InsertGuard:
    """
    Same-key check for an INSERT that won its slot.

    The group reads ride the phase that claims the slot, after its CASes, so
    of two inserters racing for one key in different slots at least one sees
    the other's word. A copy under a lower word, or one readers can already
    see, wins and this insert withdraws. A copy still being claimed under a
    higher word is waited out: it either withdraws or becomes visible.
    """

    def __init__(self, flow: "KvWorkflow", loc, key: bytes, payload: Payload):
        self.flow = flow
        self.loc = loc
        self.key = key
        self.payload = payload
        self.slot: Optional[int] = None
        self.checked = False
        self.conflict = False

    def watch(self, slot: int) -> tuple:
        self.slot = slot
        s = self.flow.resolve(slot)
        nodes = [b.node for b in s.backups] or [s.primary.node]
        return tuple(self.flow.table.read_group_op(n, self.loc.group) for n in nodes)

    def check(self, watched: list):
        """Generator: True when this insert must withdraw."""
        self.checked = True
        raws, primary, polls = watched, None, 0
        while True:
            rivals = yield from self._rivals(raws)
            if not rivals:
                self.conflict = False
                return False
            visible = primary is not None and any(primary.get(slot) == w and obj.live
                                                  for w, (slot, obj) in rivals.items())
            if visible or min(rivals) < self.payload.word:
                self.conflict = True
                return True
            if primary is not None:
                polls += 1
                if polls > self.flow.spin_budget:
                    raise LivenessError(f"{self.flow.name}: insert of {self.key!r} still waiting after {polls} polls")
                yield Backoff()
            raws, primary = yield from self._poll()

    def _rivals(self, raws: list):
        """Generator: other-slot words of the group holding a copy of the key, with their objects."""
        found = {}
        for raw in raws:
            if raw is FAIL:
                continue
            for slot, w in zip(self.loc.slots, self.flow.table.words(raw)):
                if slot != self.slot and w and w != self.payload.word and SlotWord.decode(w).fp == self.loc.fp:
                    found[w] = slot
        if not found:
            return {}
        words = sorted(found)
        objs = yield from self.flow.reader.read(words, "verify", self.flow.epoch)
        return {w: (found[w], obj) for w, obj in zip(words, objs)
                if obj is not None and obj.readable and obj.key == self.key and not obj.tombstone}

    def _poll(self):
        """Generator: fresh group words from the primary and the backups."""
        s = self.flow.resolve(self.slot)
        nodes = [s.primary.node, *(b.node for b in s.backups)]
        raws = yield Phase([self.flow.table.read_group_op(n, self.loc.group) for n in nodes], "verify",
                           self.flow.epoch)
        if raws[0] is FAIL:
            yield from self.flow.await_view()
            return list(raws[1:]), None
        return list(raws), dict(zip(self.loc.slots, self.flow.table.words(raws[0])))

    def before_commit(self, watched: list):
        """Generator: slot_write hook. A withdrawing winner commits its object as a tombstone."""
        conflict = yield from self.check(watched)
        return self.retract_ops() if conflict else []

    def retract_ops(self) -> List[FabricOp]:
        p = self.payload
        return header_ops(self.flow.replicas(p.addr), p.key, p.value, p.seq, tombstone=True)

    def publish_ops(self) -> List[FabricOp]:
        p = self.payload
        return header_ops(self.flow.replicas(p.addr), p.key, p.value, p.seq)


def base_rtts(op: str, route: str) -> int:
    """Locating phases a failure-free request spends before the slot protocol."""
    if op == "INSERT":
        return 1
    return 1 if route == Route.HIT.value else 2


class KvWorkflow:
    """
    Request logic shared by clients and by the master when it redoes a crashed
    client's request. Also serves as the environment the slot protocol runs in.
    """

    can_reallocate = True

    def __init__(self, name: str, cluster, cache: Optional[IndexCache] = None):
        self.name = name
        self.cluster = cluster
        self.geometry = cluster.geometry
        self.regions = cluster.regions
        self.table = cluster.table
        self.config = cluster.config
        self.spin_budget = self.config.spin_budget
        self.logging = self.config.oplog_enabled
        self.view = cluster.master.view()
        self.cache = cache
        self.reader = ObjectReader(self.geometry, self.regions, lambda: self.view.alive)
        self.current_op: Optional[str] = None
        self.background_ops: List[FabricOp] = []
        self._payload: Optional[Payload] = None
        self._slot_mark: Optional[int] = None
        self._alloc_rtts = 0

    # -- slot protocol environment ------------------------------------------

    @property
    def epoch(self) -> Optional[int]:
        return self.view.epoch

    def rtts(self) -> int:
        raise NotImplementedError

    def resolve(self, slot: int) -> SlotSet:
        return SlotSet.on_nodes(list(self.view.index_nodes), self.geometry.slot_offset(slot))

    def now(self) -> int:
        return self.cluster.sim.tick

    def preparing(self) -> bool:
        return self.cluster.master.preparing

    def await_view(self):
        yield AwaitEpoch(self.view.epoch)
        self.view = self.cluster.master.view()

    def fail_query(self, slot: int, v_old):
        word, view = yield Rpc("fail_query", slot, v_old)
        self.view = view
        return word

    def on_round(self, record):
        self.cluster.on_round(record)

    def on_install(self, slot: int, word: int):
        seq = self._payload.seq if self._payload is not None and word == self._payload.word else 0
        self.cluster.on_install(self.name, slot, word, seq)

    # -- helpers ----------------------------------------------------------------

    def replicas(self, addr: RemoteAddr) -> List[RemoteAddr]:
        return object_replicas(self.geometry, self.regions, addr, self.view.alive)

    def _route(self, key: bytes):
        if self.cache is None:
            return Route.MISS, None
        route, entry = self.cache.route(key)
        if route is Route.HIT and not entry.word:
            return Route.MISS, entry
        return route, entry

    def _installed(self, obj) -> bool:
        """An object behind a slot word has a committed entry; a reused one does not."""
        return not self.logging or obj.entry.committed

    def _allocate(self, key: bytes, value: bytes, opcode: int, tombstone: bool = False, pending: bool = False):
        """Generator: allocate and encode the proposed object. Returns (Payload, raw bytes)."""
        raise NotImplementedError

    def _claim_slot(self, loc, empty: List[int], payload: Payload):
        """Generator: the empty slot an INSERT proposes into."""
        return empty[0]
        yield

    def _kv_ops(self, payload: Payload, raw: Optional[bytes]) -> List[FabricOp]:
        if raw is None:
            return []
        return [FabricOp.write(r, raw) for r in self.replicas(payload.addr)]

    def _commit_builder(self, payload: Payload):
        if not self.logging:
            return lambda v_old: []
        return lambda v_old: commit_ops(self.replicas(payload.addr), payload.size, v_old)

    def _cancel(self, payload: Payload):
        replicas = self.replicas(payload.addr) if self.logging else []
        yield from cancel_entry(replicas, payload.size, payload.opcode, self.epoch)

    def _free_later(self, addr: RemoteAddr):
        self.background_ops.extend(free_bit_ops(self.geometry, self.regions, addr, self.view.alive))

    def _retire_later(self, payload: Payload, v_old: int, temp: bool = False):
        """Winner's post-commit work: retire the entry, invalidate and free the replaced object."""
        if self.logging:
            self.background_ops.extend(retire_ops(self.replicas(payload.addr), payload.size, payload.opcode))
        if v_old:
            old = SlotWord.decode(v_old).addr
            self.background_ops.extend(invalidate_ops(self.replicas(old)))
            self._free_later(old)
        if temp:
            self._free_later(payload.addr)

    def _read_word(self, word: int):
        objs = yield from self.reader.read([word], "verify", self.epoch)
        return objs[0]

    def _slot_write(self, payload: Payload, slot: int, v_old: int, seen: int, resp: KvResponse,
                    guard: Optional[InsertGuard] = None):
        self._payload = payload
        if self._slot_mark is None:
            self._slot_mark = self.rtts()
        else:
            resp.retries += 1
        watch = guard.watch(slot) if guard is not None else ()
        report = yield from slot_write(self, slot, payload.word, v_old=v_old,
                                       commit=self._commit_builder(payload), observed_tick=seen,
                                       watch=watch, guard=guard.before_commit if guard is not None else None)
        resp.rule = report.outcome.value
        resp.master = resp.master or report.decided_by_master
        resp.retries += report.retries
        if report.won:
            resp.install = (slot, payload.word, payload.seq)
        return report

    def _find(self, key: bytes, loc, route: Route, entry, head: List[FabricOp], label: str):
        """
        Generator: locate the current slot word of `key`.

        Phase one batches `head` (the proposed object's writes) with the index
        read: the cached primary slot and object on HIT, the whole group
        otherwise. Returns (Match, observed tick).
        """
        if route is Route.HIT:
            kv_op = self.reader.op(entry.word)
            s = self.resolve(entry.slot)
            results = yield Phase([*head, FabricOp.read(s.primary), *([kv_op] if kv_op else [])], label, self.epoch)
            seen = self.now()
            word = word_of(results[len(head)])
            if word is not FAIL and word == entry.word:
                first = list(results[len(head) + 1:]) or None
                objs = yield from self.reader.read([word], label, self.epoch, first=first)
                obj = objs[0]
                if obj is not None and obj.live and obj.key == key and obj.seq == entry.seq:
                    return Match(MatchStatus.FOUND, entry.slot, word, obj), seen
            elif word is not FAIL:
                self.cache.invalidated(key, entry.slot, word)
                if word:
                    obj = yield from self._read_word(word)
                    if obj is not None and obj.live and obj.key == key and self._installed(obj):
                        self.cache.fill(key, entry.slot, word, obj.seq)
                        return Match(MatchStatus.FOUND, entry.slot, word, obj), seen
            words, _ = yield from group_read(self, self.table, loc.group, label="verify")
        else:
            words, _ = yield from group_read(self, self.table, loc.group, tuple(head), label)
            if route is Route.BYPASS:
                current = words[entry.slot - loc.slots[0]] if entry.slot in loc.slots else 0
                if current != entry.word:
                    self.cache.invalidated(key, entry.slot, current)
        seen = self.now()
        match = yield from match_slot(self.reader, words, loc.slots, loc.fp, key, self.epoch)
        return match, seen

    def _locate(self, key: bytes, loc, route: Route, entry, head: List[FabricOp], label: str):
        """_find, repeated without `head` while the result is corrupt or points at a reused object."""
        for _ in range(MAX_ATTEMPTS):
            match, seen = yield from self._find(key, loc, route, entry, head, label)
            if match.status is MatchStatus.FOUND and not self._installed(match.obj):
                match = Match(MatchStatus.CORRUPT)
            if match.status is not MatchStatus.CORRUPT:
                return match, seen
            route, entry, head, label = Route.MISS, None, [], "verify"
        return Match(MatchStatus.CORRUPT), seen

    # -- operations ---------------------------------------------------------------

    def search(self, req: KvRequest):
        loc = self.table.locate(req.key)
        route, entry = self._route(req.key)
        resp = KvResponse(Status.NOT_FOUND, route=route.value)
        match, _ = yield from self._locate(req.key, loc, route, entry, [], "search")
        if match.status is MatchStatus.FOUND:
            resp.status, resp.value = Status.OK, match.obj.value
            if self.cache is not None:
                self.cache.fill(req.key, match.slot, match.word, match.obj.seq)
        elif match.status is MatchStatus.CORRUPT:
            logger.warning(f"{self.name}: key {req.key!r} kept resolving to unreadable objects")
            resp.status = Status.ERROR
        elif self.cache is not None:
            self.cache.evict(req.key)
        return resp

    def update(self, req: KvRequest):
        loc = self.table.locate(req.key)
        route, entry = self._route(req.key)
        resp = KvResponse(Status.OK, route=route.value)
        payload, raw = yield from self._allocate(req.key, req.value, UPDATE)
        match, seen = yield from self._locate(req.key, loc, route, entry, self._kv_ops(payload, raw), "kv_write")
        if match.status is not MatchStatus.FOUND:
            yield from self._cancel(payload)
            self._free_later(payload.addr)
            resp.status = Status.NOT_FOUND if match.status is MatchStatus.NOT_FOUND else Status.ERROR
            return resp
        report = yield from self._slot_write(payload, match.slot, match.word, seen, resp)
        if report.won:
            self._retire_later(payload, report.v_old)
            if self.cache is not None:
                self.cache.fill(req.key, match.slot, payload.word, payload.seq)
        else:
            # ordered immediately before the winner
            yield from self._cancel(payload)
            self._free_later(payload.addr)
        return resp

    def insert(self, req: KvRequest):
        loc = self.table.locate(req.key)
        resp = KvResponse(Status.OK, route=Route.MISS.value)
        # one index replica leaves nothing to claim invisibly: publish after the check
        pending = len(self.view.index_nodes) == 1
        payload, raw = yield from self._allocate(req.key, req.value, INSERT, pending=pending)
        words, _ = yield from group_read(self, self.table, loc.group, tuple(self._kv_ops(payload, raw)), "kv_write")
        seen = self.now()
        for _ in range(MAX_ATTEMPTS * 4):
            match = yield from match_slot(self.reader, words, loc.slots, loc.fp, req.key, self.epoch)
            if match.status is MatchStatus.FOUND and not self._installed(match.obj):
                match = Match(MatchStatus.CORRUPT)
            if match.status is MatchStatus.FOUND:
                resp.status = Status.EXISTS
                break
            if match.status is MatchStatus.CORRUPT:
                words, _ = yield from group_read(self, self.table, loc.group, label="verify")
                seen = self.now()
                continue
            empty = [slot for slot, w in zip(loc.slots, words) if w == 0]
            if not empty:
                resp.status = Status.TABLE_FULL
                break
            slot = yield from self._claim_slot(loc, empty, payload)
            guard = InsertGuard(self, loc, req.key, payload)
            report = yield from self._slot_write(payload, slot, 0, seen, resp, guard)
            if report.won:
                if report.watched_after_install and not guard.checked:
                    conflict = yield from guard.check(report.watched)
                    if pending and not conflict:
                        yield Phase(guard.publish_ops(), "publish", self.epoch)
                if not guard.conflict:
                    self._retire_later(payload, 0)
                    if self.cache is not None:
                        self.cache.fill(req.key, slot, payload.word, payload.seq)
                    return resp
                yield from self._clear(slot, payload.word)
                self._retire_later(payload, 0, temp=True)
                resp.install = None
                if not self.can_reallocate:
                    resp.status = Status.EXISTS
                    return resp
                payload, raw = yield from self._allocate(req.key, req.value, INSERT, pending=pending)
                words, _ = yield from group_read(self, self.table, loc.group, tuple(self._kv_ops(payload, raw)),
                                                 "verify")
                seen = self.now()
                continue
            if report.final:
                winner = yield from self._read_word(report.final)
                if winner is not None and winner.live and winner.key == req.key:
                    resp.status = Status.EXISTS
                    break
            # another key took the slot: retry with the same object
            words, _ = yield from group_read(self, self.table, loc.group, label="verify")
            seen = self.now()
        else:
            resp.status = Status.ERROR
        yield from self._cancel(payload)
        self._free_later(payload.addr)
        return resp

    def delete(self, req: KvRequest):
        loc = self.table.locate(req.key)
        route, entry = self._route(req.key)
        resp = KvResponse(Status.OK, route=route.value)
        payload, raw = yield from self._allocate(req.key, b"", DELETE, tombstone=True)
        match, seen = yield from self._locate(req.key, loc, route, entry, self._kv_ops(payload, raw), "kv_write")
        while match.status is MatchStatus.FOUND:
            report = yield from self._slot_write(payload, match.slot, match.word, seen, resp)
            if report.won:
                yield from self._clear(match.slot, payload.word)
                self._retire_later(payload, report.v_old, temp=True)
                if self.cache is not None:
                    self.cache.evict(req.key)
                return resp
            if not report.final:
                break
            current = yield from self._read_word(report.final)
            seen = self.now()
            if current is None or not current.live or current.key != req.key:
                break
            # lost against an update of the same key: delete that one instead
            match = Match(MatchStatus.FOUND, match.slot, report.final, current)
        resp.status = Status.ERROR if match.status is MatchStatus.CORRUPT else Status.NOT_FOUND
        yield from self._cancel(payload)
        self._free_later(payload.addr)
        if self.cache is not None:
            self.cache.evict(req.key)
        return resp

    def _clear(self, slot: int, tomb: int):
        """Generator: swing every replica of `slot` from the tombstone back to empty, backups first."""
        while True:
            s = self.resolve(slot)
            ops = [FabricOp.cas(b, tomb, 0) for b in s.backups] + [FabricOp.cas(s.primary, tomb, 0)]
            results = yield Phase(ops, "clear", self.epoch)
            if results[-1] == tomb:
                self.cluster.on_install(self.name, slot, 0, 0)
            if FAIL not in results:
                return
            reply = yield from self.fail_query(slot, tomb)
            if reply != tomb:
                return


class Client(KvWorkflow):
    """One compute-side client: a request queue, an index cache and a slab allocator."""

    def __init__(self, cid: int, cluster, requests: List[KvRequest],
                 allocator: Optional[ClientAllocator] = None):
        config = cluster.config
        super().__init__(f"c{cid}", cluster, IndexCache(config.cache_capacity, config.cache_threshold))
        self.cid = cid
        self.requests = deque(requests)
        self.responses: List[KvResponse] = []
        if allocator is None:
            allocator = ClientAllocator(cid, self.geometry, self.regions, lambda: self.view.alive,
                                        cluster.granter.grant_nodes(), config.refill_watermark)
            self.initialized = False
        else:
            allocator.alive = lambda: self.view.alive
            self.initialized = True
        self.allocator = allocator
        self.actor = None
        self.last_reclaim = 0

    def rtts(self) -> int:
        return self.actor.rtts if self.actor is not None else 0

    def setup(self):
        """Generator: first block grants and the list-head registry."""
        yield from self.allocator.init(list(self.view.index_nodes))
        self.initialized = True
        self.last_reclaim = self.now()

    def program(self):
        if not self.initialized:
            yield from self.setup()
        while self.requests:
            req = self.requests.popleft()
            yield from self.execute(req)
            yield from self.maintain()
        return self.responses

    def execute(self, req: KvRequest):
        """Generator: run one request between its INVOKE and RESPOND events."""
        self.view = self.cluster.master.view()
        self.current_op = req.op
        self._payload, self._slot_mark, self._alloc_rtts = None, None, 0
        self.cluster.invoke(self.name, req)
        start = self.rtts()
        resp = yield from getattr(self, req.op.lower())(req)
        resp.rtts = self.rtts() - start
        resp.alloc = self._alloc_rtts
        base = base_rtts(req.op, resp.route)
        if req.op == "SEARCH":
            resp.verify = max(0, resp.rtts - base)
        elif self._slot_mark is not None:
            resp.verify = self._slot_mark - start - base - resp.alloc
        self.cluster.respond(self.name, req, resp)
        self.responses.append(resp)
        self.current_op = None
        return resp

    def maintain(self):
        """Generator: off-critical-path work between requests."""
        if self.background_ops:
            ops, self.background_ops = self.background_ops, []
            yield Phase(ops, "background", self.epoch)
        if self.now() - self.last_reclaim >= self.config.reclaim_interval_ticks:
            self.last_reclaim = self.now()
            yield from self.allocator.reclaim_scan()
        refill = self.allocator.needs_refill()
        if refill:
            yield from self.allocator.grow(refill, label="refill")

    def _allocate(self, key: bytes, value: bytes, opcode: int, tombstone: bool = False, pending: bool = False):
        before = self.rtts()
        alloc = yield from self.allocator.client_alloc(object_size(key, value))
        self._alloc_rtts += self.rtts() - before
        raw = encode_object(key, value, alloc, opcode, tombstone, self.logging, pending)
        word = encode_slot(self.table.locate(key).fp, alloc.size_class, alloc.addr)
        return Payload(alloc.addr, alloc.size_class, alloc.size, alloc.seq, word, opcode, key, value), raw
