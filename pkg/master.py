"""
Lease-based membership master
Answers slot failure queries, resolves memory-node crashes under epoch fencing
and recovers crashed clients from their embedded operation logs. Memory-node
crashes are always settled before any client recovery starts.
"""

import logging
from collections import deque
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional

from client import KvRequest, KvWorkflow, Payload
from errors import FAIL, RecoveryBlocked
from fabric import MASK64, WORD, FabricOp, Phase, RemoteAddr, word_of
from index import IndexTable, ObjectReader, SlotWord, encode_slot
from memalloc import NULL, ClientAllocator, decode_row, free_bit_ops, object_replicas, reclaim_blocks
from oplog import (DELETE, INSERT, OPCODES, SENTINEL, EntryState, LogRecord, cancel_ops, commit_ops, decode_object,
                   invalidate_ops, read_list_heads, retire_ops, traverse_log)
from scheduler import NO_REPLY, Idle, Sleep
from slotproto import SlotSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MemberView:
    """What a client acts on: epoch, index replica nodes (primary first) and alive nodes."""
    epoch: int
    index_nodes: tuple
    alive: frozenset


@dataclass
class Membership:
    epoch: int
    index_nodes: List[int]
    alive: set
    lease_expiry: Dict[str, int] = field(default_factory=dict)

    def view(self) -> MemberView:
        return MemberView(self.epoch, tuple(self.index_nodes), frozenset(self.alive))


@dataclass
class FailQuery:
    actor: str
    slot: int
    v_old: Optional[int]
    asked_at: int
    reply: Optional[int] = None


@dataclass
class PendingCrash:
    target: int
    crashed_at: int
    detect_at: int


@dataclass
class RecoveryReport:
    kind: str
    target: object
    crashed_at: int
    detected_at: int
    finished_at: int = 0
    epoch: int = 0
    slots_fixed: int = 0
    entries_committed: int = 0
    installs: int = 0
    queries_answered: int = 0
    tails: Dict[str, int] = field(default_factory=dict)
    redone: List[str] = field(default_factory=list)
    frees_replayed: int = 0
    reclaimed: int = 0
    rebuilt: int = 0

    @property
    def duration(self) -> int:
        return self.finished_at - self.crashed_at

    def to_dict(self):
        data = asdict(self)
        data["duration"] = self.duration
        return data


class RedoWorkflow(KvWorkflow):
    """Re-executes a crashed client's uncommitted request, reusing the logged object."""

    can_reallocate = False

    def __init__(self, master: "Master", cid: int, record: LogRecord):
        super().__init__(Master.NAME, master.cluster)
        self.master = master
        self.cid = cid
        self.record = record

    @property
    def epoch(self) -> Optional[int]:
        return None

    def rtts(self) -> int:
        return self.master.actor.rtts if self.master.actor is not None else 0

    def preparing(self) -> bool:
        return False

    def await_view(self):
        yield from self.master.settle()
        self.view = self.master.view()

    def fail_query(self, slot: int, v_old):
        word = yield from self.master.decide(slot)
        self.view = self.master.view()
        return word

    def _allocate(self, key: bytes, value: bytes, opcode: int, tombstone: bool = False, pending: bool = False):
        rec = self.record
        word = encode_slot(self.table.locate(key).fp, rec.size_class, rec.addr)
        size = self.geometry.size_classes[rec.size_class]
        return Payload(rec.addr, rec.size_class, size, rec.seq, word, opcode, rec.obj.key, rec.obj.value), None
        yield

    def _claim_slot(self, loc, empty: List[int], payload: Payload):
        """Generator: the slot whose backups already hold the logged word, else the first empty one."""
        if not self.view.index_nodes[1:]:
            return empty[0]
        raws = yield Phase([self.table.read_group_op(n, loc.group) for n in self.view.index_nodes[1:]],
                           "recover_index")
        for raw in raws:
            if raw is FAIL:
                continue
            for slot, w in zip(loc.slots, self.table.words(raw)):
                if w == payload.word and slot in empty:
                    return slot
        return empty[0]


class Master:
    """Single logical master actor. Reliable by assumption."""

    NAME = "master"

    def __init__(self, cluster):
        self.cluster = cluster
        self.fabric = cluster.fabric
        self.geometry = cluster.geometry
        self.regions = cluster.regions
        self.table = cluster.table
        self.config = cluster.config
        self.membership = Membership(0, self.regions.index_nodes(), set(range(self.config.num_mns)))
        self.preparing = False
        self.busy = False
        self.mn_pending: List[PendingCrash] = []
        self.client_pending: List[PendingCrash] = []
        self.queries: deque = deque()
        self.deferred: List[FailQuery] = []
        self.reports: List[RecoveryReport] = []
        self.reader = ObjectReader(self.geometry, self.regions, lambda: self.membership.alive)
        self.actor = None

    @property
    def epoch(self) -> int:
        return self.membership.epoch

    def view(self) -> MemberView:
        return self.membership.view()

    @property
    def sim(self):
        return self.cluster.sim

    # -- scheduler hooks -----------------------------------------------------------

    def notify_mn_crash(self, node: int, tick: int):
        expiry = tick + self.config.lease_ticks
        self.membership.lease_expiry[f"mn{node}"] = expiry
        self.mn_pending.append(PendingCrash(node, tick, expiry))

    def notify_client_crash(self, cid: int, tick: int):
        expiry = tick + self.config.lease_ticks
        self.membership.lease_expiry[f"c{cid}"] = expiry
        self.client_pending.append(PendingCrash(cid, tick, expiry))

    def _due(self, pending: List[PendingCrash], tick: int) -> bool:
        return any(p.detect_at <= tick for p in pending)

    def has_work(self, tick: int) -> bool:
        if self.queries or self._due(self.mn_pending, tick):
            return True
        return not self.mn_pending and self._due(self.client_pending, tick)

    def next_wake(self) -> Optional[int]:
        ticks = [p.detect_at for p in self.mn_pending + self.client_pending]
        return min(ticks) if ticks else None

    def quiescent(self) -> bool:
        return not (self.busy or self.queries or self.deferred or self.mn_pending or self.client_pending)

    def handle_rpc(self, actor_name: str, kind: str, *args):
        if kind != "fail_query":
            raise ValueError(f"unknown master RPC {kind}")
        slot, v_old = args
        query = FailQuery(actor_name, slot, v_old, self.sim.tick)
        if self.preparing or self.mn_pending:
            self.deferred.append(query)
        else:
            self.queries.append(query)
        return NO_REPLY

    # -- main loop -------------------------------------------------------------------

    def run(self):
        while True:
            tick = self.sim.tick
            if self._due(self.mn_pending, tick) or (not self.mn_pending and self._due(self.client_pending, tick)):
                self.busy = True
                yield from self.handle_mixed()
                self.busy = False
            elif self.queries:
                self.busy = True
                yield from self._answer(self.queries.popleft())
                self.busy = False
            else:
                yield Idle()

    def handle_mixed(self):
        """Generator: every due memory-node crash first, then the due client recoveries."""
        while self._due(self.mn_pending, self.sim.tick):
            yield from self.handle_mn_crash()
        if self.mn_pending:
            return
        while True:
            due = [p for p in self.client_pending if p.detect_at <= self.sim.tick]
            if not due:
                return
            pending = due[0]
            self.client_pending.remove(pending)
            yield from self.recover_client(pending.target, pending.crashed_at, pending.detect_at)

    def _answer(self, query: FailQuery):
        s = self._slot_set(query.slot)
        results = yield Phase([FabricOp.read(s.primary)], "fail_query")
        word = word_of(results[0])
        if word is FAIL:
            self.deferred.append(query)
            return
        query.reply = word
        self.sim.reply(query.actor, (word, self.view()))

    def _slot_set(self, slot: int) -> SlotSet:
        return SlotSet.on_nodes(list(self.membership.index_nodes), self.geometry.slot_offset(slot))

    def settle(self):
        """Generator: wait out and resolve every pending memory-node crash."""
        while self.mn_pending:
            wait = min(p.detect_at for p in self.mn_pending) - self.sim.tick
            if wait > 0:
                yield Sleep(wait)
            yield from self.handle_mn_crash()

    def decide(self, slot: int):
        """Generator: the master's own answer for a slot it failed on while redoing a request."""
        while True:
            yield from self.settle()
            results = yield Phase([FabricOp.read(self._slot_set(slot).primary)], "fail_query")
            word = word_of(results[0])
            if word is not FAIL:
                return word
            yield Sleep(1)

    # -- memory-node crashes ------------------------------------------------------------

    def handle_mn_crash(self):
        """
        Generator: resolve the due memory-node crashes.

        Fence the index at the next epoch and wait one lease so no stale client
        CAS can land, then give every slot the value of its first alive backup,
        commit that value's log entry when its writer never did, move the
        primary role and re-replicate the table to a replacement node, and
        finally answer the deferred failure queries.
        """
        tick = self.sim.tick
        due = [p for p in self.mn_pending if p.detect_at <= tick]
        for p in due:
            self.mn_pending.remove(p)
        nodes = sorted(p.target for p in due)
        report = RecoveryReport("mn", nodes, min(p.crashed_at for p in due), tick)
        geo = self.geometry
        logger.info(f"Handling crash of memory node(s) {nodes} at tick {tick}")

        self.preparing = True
        new_epoch = self.membership.epoch + 1
        index_end = geo.index_base + geo.index_bytes
        self.fabric.fence(new_epoch, geo.index_base, index_end)
        yield Sleep(self.config.lease_ticks)

        self.membership.alive -= {n for n in range(self.config.num_mns) if not self.fabric.alive(n)}
        old_nodes = list(self.membership.index_nodes)
        alive_index = [n for n in old_nodes if n in self.membership.alive]
        if not alive_index:
            raise RecoveryBlocked("every index replica crashed")
        span = geo.registry_base + geo.registry_bytes - geo.index_base
        raws = yield Phase([FabricOp.read(RemoteAddr(n, geo.index_base), span) for n in alive_index],
                           "mn_read_index")
        tables, tail = {}, None
        for n, raw in zip(alive_index, raws):
            if raw is FAIL:
                continue
            tables[n] = IndexTable.words(raw[:geo.index_bytes])
            if tail is None:
                tail = raw[geo.index_bytes:]
        if not tables:
            raise RecoveryBlocked("no index replica answered")

        primary = old_nodes[0]
        backups = [n for n in old_nodes[1:] if n in tables]
        decided, suspects = [], []
        for slot in range(geo.slot_count):
            values = {n: t[slot] for n, t in tables.items()}
            chosen = values[backups[0]] if backups else values[primary]
            decided.append(chosen)
            if values.get(primary) != chosen:
                suspects.append((slot, values))

        # objects behind the decided values and their competitors
        objs = yield from self._read_objects({w for slot, values in suspects
                                              for w in (decided[slot], *values.values())})
        withdrawn = yield from self._withdrawn(suspects, decided, tables, objs)
        for slot, values in suspects:
            if slot in withdrawn:
                current = values.get(primary)
                decided[slot] = current if current is not None else 0
        fixes = [FabricOp.cas(RemoteAddr(n, geo.slot_offset(slot)), t[slot], decided[slot])
                 for slot in range(geo.slot_count) for n, t in tables.items() if t[slot] != decided[slot]]
        logger.debug(f"{len(fixes)} slot replicas disagree, {len(suspects)} slots to settle, "
                      f"{len(withdrawn)} duplicate inserts withdrawn")

        commits, installs = [], []
        for slot, values in suspects:
            chosen, current = decided[slot], values.get(primary)
            if chosen == current or (not chosen and current is None):
                continue
            obj = objs.get(chosen)
            installs.append((slot, chosen, obj.seq if obj is not None and chosen else 0))
            if not chosen or obj is None or not self.config.oplog_enabled or obj.entry.committed:
                continue
            old = self._old_value(current, chosen, values, objs)
            addr = SlotWord.decode(chosen).addr
            size = geo.size_classes[SlotWord.decode(chosen).len_class]
            commits.extend(commit_ops(object_replicas(geo, self.regions, addr, self.membership.alive), size, old))
            report.entries_committed += 1
        if commits:
            yield Phase(commits, "mn_commit")
        if fixes:
            yield Phase(fixes, "mn_fix_slots")
        report.slots_fixed = len(fixes)
        for slot, word, seq in installs:
            self.cluster.on_install(self.NAME, slot, word, seq)
        report.installs = len(installs)

        new_nodes = [n for n in old_nodes if n in tables]
        copies = []
        for _ in range(len(old_nodes) - len(new_nodes)):
            spare = self.regions.next_alive("index", set(old_nodes) | set(new_nodes), self.membership.alive)
            if spare is None:
                logger.warning(f"No spare memory node for the index, running with {len(new_nodes)} replicas")
                break
            image = b"".join((w & MASK64).to_bytes(WORD, "little") for w in decided) + tail
            copies.append(FabricOp.write(RemoteAddr(spare, geo.index_base), image))
            new_nodes.append(spare)
        if copies:
            yield Phase(copies, "mn_copy_index")

        self.membership.index_nodes = new_nodes
        self.membership.epoch = new_epoch
        self.fabric.fence(new_epoch, geo.index_base, index_end)
        self.preparing = False
        view = self.view()
        for query in self.deferred:
            query.reply = decided[query.slot]
            self.sim.reply(query.actor, (query.reply, view))
        report.queries_answered = len(self.deferred)
        self.deferred = []
        report.epoch = new_epoch
        report.finished_at = self.sim.tick
        self.reports.append(report)
        self.cluster.on_recovery(report)
        logger.info(f"Epoch {new_epoch}: index on {new_nodes}, {report.slots_fixed} slot replicas fixed, "
                    f"{report.entries_committed} entries committed")

    def _read_objects(self, words, label: str = "mn_read_objects"):
        """Generator: decoded objects behind slot words, keyed by word. Unreachable ones are left out."""
        wanted: Dict[int, FabricOp] = {}
        for w in sorted(words):
            if w:
                op = self.reader.op(w)
                if op is not None:
                    wanted[w] = op
        if not wanted:
            return {}
        order = list(wanted)
        raws = yield Phase([wanted[w] for w in order], label)
        return {w: decode_object(raw) for w, raw in zip(order, raws) if raw is not FAIL}

    def _withdrawn(self, suspects, decided: List[int], tables: Dict[int, List[int]], objs: Dict[int, object]):
        """
        Generator: suspect slots whose decided value is an unfinished INSERT of a
        key that another slot of its group already holds on some replica. Such an
        insert was never acknowledged, so it goes back to the slot's old value.
        """
        if not self.config.oplog_enabled:
            return set()
        claims = {}
        for slot, _ in suspects:
            obj = objs.get(decided[slot])
            if obj is not None and obj.live and obj.entry.op == INSERT and not obj.entry.committed:
                loc = self.table.locate(obj.key)
                rivals = {t[s] for t in tables.values() for s in loc.slots if s != slot}
                claims[slot] = (obj.key, {w for w in rivals
                                          if w and w != decided[slot] and SlotWord.decode(w).fp == loc.fp})
        unknown = {w for _, words in claims.values() for w in words} - objs.keys()
        if unknown:
            objs.update((yield from self._read_objects(unknown)))
        withdrawn = set()
        for slot, (key, words) in claims.items():
            for w in words:
                rival = objs.get(w)
                if rival is not None and rival.readable and rival.key == key and not rival.tombstone:
                    withdrawn.add(slot)
                    break
        return withdrawn

    @staticmethod
    def _old_value(current: Optional[int], chosen: int, values: Dict[int, int], objs: Dict[int, object]) -> int:
        """Previous slot value for a master commit: the live primary's, else the best guess, else the sentinel."""
        if current is not None:
            return current
        others = sorted({v for v in values.values() if v != chosen})
        if 0 in others:
            return 0
        for v in others:
            obj = objs.get(v)
            if obj is not None and obj.entry.committed:
                return v
        return SENTINEL

    # -- client crashes --------------------------------------------------------------------

    def recover_client(self, cid: int, crashed_at: int = 0, detected_at: int = 0):
        """
        Generator: memory re-management and index repair for a crashed client.

        Blocks come from the replicated allocation tables, the tail of every
        size-class log decides what the interrupted request still needs, and
        the free lists are rebuilt from used bits, free bits and index
        reachability before the client is restarted.
        """
        report = RecoveryReport("client", cid, crashed_at, detected_at or self.sim.tick)
        logger.info(f"Recovering client {cid} (crashed at tick {crashed_at})")
        geo = self.geometry
        alive = lambda: self.membership.alive
        meta = list(self.membership.index_nodes)

        blocks = yield from self._client_blocks(cid)
        heads = yield from read_list_heads(geo, cid, meta, "recover_log")
        chains = yield from traverse_log(geo, self.regions, alive, cid, meta, "recover_log")

        for size_class, chain in sorted(chains.items()):
            if not chain:
                continue
            tail = chain[-1]
            report.tails[tail.state.value] = report.tails.get(tail.state.value, 0) + 1
            if tail.state is EntryState.UNCOMMITTED:
                yield from self._redo(cid, tail, report)
            elif tail.state is EntryState.COMMITTED:
                yield from self._finish(cid, tail, report)

        report.reclaimed = yield from reclaim_blocks(geo, self.regions, alive, blocks,
                                                     lambda addrs, size_class: None, label="recover_reclaim")
        free = yield from self._rebuild(blocks, chains, heads)

        allocator = ClientAllocator(cid, geo, self.regions, alive, self.cluster.granter.grant_nodes(),
                                    self.config.refill_watermark)
        allocator.blocks = dict(blocks)
        for c, addrs in free.items():
            allocator.free[c] = deque(addrs)
            allocator.heads[c] = heads.get(c, NULL)
            chain = chains.get(c) or []
            allocator.last[c] = chain[-1].addr.pack() if chain else NULL
            allocator.seq[c] = chain[-1].seq if chain else 0
        report.rebuilt = sum(len(addrs) for addrs in free.values())
        report.finished_at = self.sim.tick
        report.epoch = self.membership.epoch
        self.reports.append(report)
        logger.info(f"Client {cid} recovered: tails {report.tails}, redone {report.redone}, "
                    f"{report.rebuilt} objects free")
        self.cluster.client_recovered(cid, allocator, report)

    def _client_blocks(self, cid: int):
        geo = self.geometry
        ops, read = [], []
        for g in range(geo.num_regions):
            nodes = [n for n in self.regions.place_region(g) if n in self.membership.alive]
            if not nodes:
                raise RecoveryBlocked(f"allocation table of region {g} has no alive replica")
            ops.append(FabricOp.read(RemoteAddr(nodes[0], geo.table_offset(g, 0)), geo.blocks_per_region * WORD))
            read.append(g)
        raws = yield Phase(ops, "recover_tables")
        blocks = {}
        for g, raw in zip(read, raws):
            if raw is FAIL:
                raise RecoveryBlocked(f"allocation table of region {g} became unreachable")
            owner_node = self.regions.place_region(g)[0]
            for k, row in enumerate(IndexTable.words(raw)):
                owner = decode_row(row)
                if owner is not None and owner[0] == cid:
                    blocks[RemoteAddr(owner_node, geo.data_offset(g, k))] = owner[1]
        return blocks

    def _replicas(self, addr: RemoteAddr) -> List[RemoteAddr]:
        return object_replicas(self.geometry, self.regions, addr, self.membership.alive)

    def _redo(self, cid: int, tail: LogRecord, report: RecoveryReport):
        obj = tail.obj
        size = self.geometry.size_classes[tail.size_class]
        withdrawn = obj.readable and tail.entry.op == INSERT and obj.tombstone
        if not obj.readable or tail.entry.op not in OPCODES or withdrawn:
            ops = cancel_ops(self._replicas(tail.addr), size, tail.entry.op)
            ops += free_bit_ops(self.geometry, self.regions, tail.addr, self.membership.alive)
            yield Phase(ops, "recover_cancel")
            report.redone.append("withdrawn:cancelled" if withdrawn else "unreadable:cancelled")
            return
        op = OPCODES[tail.entry.op]
        req = KvRequest(op, obj.key, b"" if tail.entry.op == DELETE else obj.value)
        flow = RedoWorkflow(self, cid, tail)
        resp = yield from getattr(flow, op.lower())(req)
        if flow.background_ops:
            yield Phase(flow.background_ops, "recover_frees")
        report.redone.append(f"{op}:{resp.status.value}")

    def _finish(self, cid: int, tail: LogRecord, report: RecoveryReport):
        """Committed tail: install it if the primary still holds its old value, then replay its frees."""
        entry, obj = tail.entry, tail.obj
        old = entry.old_value
        # deletes and inserts that never became visible leave nothing in the slot
        absent = entry.op == DELETE or (obj.readable and not obj.live)
        loc = self.table.locate(obj.key)
        word = encode_slot(loc.fp, tail.size_class, tail.addr)
        nodes = list(self.membership.index_nodes)
        raws = yield Phase([self.table.read_group_op(n, loc.group) for n in nodes], "recover_index")
        copies = {n: self.table.words(raw) for n, raw in zip(nodes, raws) if raw is not FAIL}
        primary = nodes[0]
        hit = next((i for i in range(len(loc.slots)) if any(c[i] == word for c in copies.values())), None)
        if hit is not None and primary in copies:
            slot = loc.slots[hit]
            current = copies[primary][hit]
            if old != SENTINEL and current == old and not (absent and entry.op == INSERT):
                results = yield Phase([FabricOp.cas(self._slot_set(slot).primary, old, word)], "recover_install")
                if results[0] == old:
                    self.cluster.on_install(self.NAME, slot, word, tail.seq)
                    report.installs += 1
                    current = word
            if absent and (current == word or (entry.op == INSERT and current == 0)):
                yield from RedoWorkflow(self, cid, tail)._clear(slot, word)
        if entry.retired:
            return
        size = self.geometry.size_classes[tail.size_class]
        ops = retire_ops(self._replicas(tail.addr), size, entry.op)
        if old not in (0, SENTINEL):
            old_addr = SlotWord.decode(old).addr
            ops += invalidate_ops(self._replicas(old_addr))
            ops += free_bit_ops(self.geometry, self.regions, old_addr, self.membership.alive)
            report.frees_replayed += 1
        if absent:
            ops += free_bit_ops(self.geometry, self.regions, tail.addr, self.membership.alive)
            report.frees_replayed += 1
        yield Phase(ops, "recover_frees")

    def _rebuild(self, blocks: Dict[RemoteAddr, int], chains: Dict[int, List[LogRecord]], heads: Dict[int, int]):
        """Generator: free lists of unused, unpending, unreachable objects, log continuation first."""
        geo = self.geometry
        primary = self.membership.index_nodes[0]
        ops = [FabricOp.read(RemoteAddr(primary, geo.index_base), geo.index_bytes)]
        plan = sorted(blocks.items())
        for block, _ in plan:
            g, k = geo.locate_block(block.offset)
            nodes = [n for n in self.regions.place_region(g) if n in self.membership.alive]
            if not nodes:
                raise RecoveryBlocked(f"block {block} has no alive replica")
            ops.append(FabricOp.read(RemoteAddr(nodes[0], geo.frame_offset(g, k)), geo.frame))
        raws = yield Phase(ops, "recover_scan")
        if FAIL in raws:
            raise RecoveryBlocked("a replica crashed during the free-list scan")
        reachable = {SlotWord.decode(w).ptr for w in IndexTable.words(raws[0]) if w}

        free: Dict[int, List[RemoteAddr]] = {c: [] for c in range(len(geo.size_classes))}
        for (block, size_class), raw in zip(plan, raws[1:]):
            g, k = geo.locate_block(block.offset)
            bitmap = int.from_bytes(raw[:geo.bitmap_words * WORD], "little")
            data = raw[geo.bitmap_bytes:]
            size = geo.size_classes[size_class]
            base = geo.data_offset(g, k)
            for addr in geo.block_objects(block.node, g, k, size_class):
                start = addr.offset - base
                used = data[start + size - 1] & 1
                pending = bitmap >> (start // geo.granule) & 1
                if not used and not pending and addr.pack() not in reachable:
                    free[size_class].append(addr)

        for c, addrs in free.items():
            chain = chains.get(c) or []
            cont = chain[-1].entry.next if chain else heads.get(c, NULL)
            if cont != NULL:
                first = RemoteAddr.unpack(cont)
                if first in addrs:
                    addrs.remove(first)
                    addrs.insert(0, first)
        return free
