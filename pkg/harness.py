"""
Scenario harness for the simulated KV store
Wires fabric, allocator, index, master and clients into a Cluster, runs
scenarios under the deterministic scheduler, writes and reads traces, and
audits a finished trace: single winner per write round, RTT contracts,
exactly-once installs, epoch fencing, allocator conservation and
linearizability.
"""

import difflib
import json
import logging
import os
import time
from collections import Counter, defaultdict
from concurrent.futures import BrokenExecutor, Future, ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
import psutil
from tqdm import tqdm

import workload
from client import Client, KvRequest, KvResponse
from config import Scenario, parse_scenario, with_overrides
from errors import DmkvError, TraceFormatError
from fabric import MUTATING, WORD, Fabric, Trace, TraceEvent
from index import IndexTable, SlotWord
from linearizability import Operation, Violation, check_history
from master import Master, RecoveryReport
from memalloc import BlockGranter, Geometry, RegionMap
from scheduler import CrashInjector, Exploration, Explorer, Simulation
from slotproto import RoundRecord, SlotSet, StaticEnv, slot_write

logger = logging.getLogger(__name__)

TRACE_MAGIC = "dmkv trace v1"
SLOT_LABELS = ("cas_backups", "read_check", "repair", "commit", "cas_primary")
RULE_RTTS = {"RULE1": 3, "RULE2": 4, "RULE3": 5}


def _hex(value: Optional[bytes]) -> str:
    return "-" if value is None else "0x" + value.hex()


def _unhex(text: str) -> Optional[bytes]:
    if text == "-":
        return None
    if not text.startswith("0x"):
        raise TraceFormatError(f"bad hex value '{text}'")
    return bytes.fromhex(text[2:])


def tokens(outcome: str) -> Dict[str, str]:
    """key=value tokens of an event outcome; bare words map to themselves."""
    out = {}
    for tok in outcome.split():
        key, sep, value = tok.partition("=")
        out[key] = value if sep else key
    return out


# ---------------------------------------------------------------------------
# Cluster
# ---------------------------------------------------------------------------

class Cluster:
    """One simulated deployment: memory nodes, master and clients sharing a trace."""

    def __init__(self, scenario: Scenario, track_digest: bool = False):
        self.scenario = scenario
        self.config = scenario.sim
        self.geometry = Geometry(self.config)
        self.regions = RegionMap(self.config.num_mns, self.config.r, self.config.ring_vnodes,
                                 self.config.hash_seed, self.geometry.num_regions)
        self.trace = Trace(trace_header(scenario))
        self.fabric = Fabric(self.config.num_mns, self.geometry.capacity, self.trace, track_digest)
        self.granter = BlockGranter(self.fabric, self.geometry, self.regions)
        self.table = IndexTable(self.geometry, self.config.index_capacity, self.config.hash_seed)
        injector = CrashInjector(scenario.crashes) if scenario.crashes else None
        self.sim = Simulation(self.fabric, scenario.seed, self.config.max_ticks, injector)
        self.sim.owner = self
        self.master = Master(self)
        self.sim.master = self.master
        self.master.actor = self.sim.spawn(Master.NAME, self.master.run(), kind="master")
        # park the master so it does not show up as a schedule choice
        self.sim.step(self.master.actor)
        self.clients: Dict[int, Client] = {}
        self.allocators: Dict[int, object] = {}
        self.reports: List[RecoveryReport] = []

    # -- clients -------------------------------------------------------------------

    def add_client(self, cid: int, requests: List[KvRequest], allocator=None) -> Client:
        client = Client(cid, self, requests, allocator)
        client.actor = self.sim.spawn(client.name, client.program(), "client", cid, owner=client)
        self.clients[cid] = client
        self.allocators[cid] = client.allocator
        return client

    def setup_client(self, client: Client):
        """Grant first blocks and register list heads before any interleaving starts."""
        self.sim.drive(client.setup(), client.actor)

    def call(self, cid: int, req: KvRequest) -> KvResponse:
        """Run one request to completion on its own, then its background work."""
        client = self.clients[cid]
        resp = self.sim.drive(client.execute(req), client.actor)
        self.sim.drive(client.maintain(), client.actor)
        return resp

    def client_recovered(self, cid: int, allocator, report: RecoveryReport):
        self.allocators[cid] = allocator
        self.on_recovery(report)
        if self.scenario.restart_crashed:
            self.restart_client(cid)

    def restart_client(self, cid: int) -> Client:
        """Respawn a recovered client with its rebuilt allocator and the requests it never started."""
        old = self.clients[cid]
        logger.info(f"Restarting client {cid} with {len(old.requests)} remaining requests")
        return self.add_client(cid, list(old.requests), self.allocators[cid])

    # -- events from clients and master -------------------------------------------------

    def record(self, actor: str, kind: str, addr: str, outcome: str):
        self.trace.record(self.sim.tick, actor, kind, addr, outcome)

    def invoke(self, actor: str, req: KvRequest):
        self.record(actor, "INVOKE", f"{req.op} {req.key.hex()}", f"value={_hex(req.value)}")
        self.sim.note_history(("invoke", actor, req.op, req.key, req.value))

    def respond(self, actor: str, req: KvRequest, resp: KvResponse):
        self.record(actor, "RESPOND", f"{req.op} {req.key.hex()}",
                    f"status={resp.status.value} value={_hex(resp.value)} {resp.tokens()}")
        self.sim.note_history(("respond", actor, resp.status.value, resp.value))

    def on_install(self, actor: str, slot: int, word: int, seq: int):
        self.record(actor, "INSTALL", f"slot{slot}", f"word={word:#x} seq={seq}")

    def on_round(self, record: RoundRecord):
        self.record(record.actor, "ROUND", f"slot{record.slot}", record.outcome_text())

    def on_recovery(self, report: RecoveryReport):
        self.reports.append(report)
        target = f"c{report.target}" if report.kind == "client" else "mn" + "+".join(map(str, report.target))
        redone = "|".join(report.redone) or "-"
        self.record(Master.NAME, "RECOVERY", target,
                    f"crashed={report.crashed_at} detected={report.detected_at} finished={report.finished_at} "
                    f"epoch={report.epoch} fixed={report.slots_fixed} committed={report.entries_committed} "
                    f"installs={report.installs} redone={redone} frees={report.frees_replayed} "
                    f"rebuilt={report.rebuilt}")

    # -- memory census ----------------------------------------------------------------

    def census(self) -> Dict[int, Dict[str, int]]:
        """
        Partition every granted object of each client into live (reachable from
        the primary index), free-listed and free-bit pending, and record one
        CENSUS event per client. Overlaps break conservation; objects in no
        class are leaked.
        """
        geo = self.geometry
        alive = self.master.membership.alive
        primary = self.master.membership.index_nodes[0]
        words = IndexTable.words(self.fabric.load(primary, geo.index_base, geo.index_bytes))
        reachable = {SlotWord.decode(w).ptr for w in words if w}
        result = {}
        for cid in sorted(self.allocators):
            allocator = self.allocators[cid]
            granted, pending = set(), set()
            for block, size_class in sorted(allocator.blocks.items()):
                g, k = geo.locate_block(block.offset)
                nodes = [n for n in self.regions.place_region(g) if n in alive]
                if not nodes:
                    continue
                bitmap = int.from_bytes(self.fabric.load(nodes[0], geo.frame_offset(g, k), geo.bitmap_words * WORD),
                                        "little")
                base = geo.data_offset(g, k)
                for addr in geo.block_objects(block.node, g, k, size_class):
                    ptr = addr.pack()
                    granted.add(ptr)
                    if bitmap >> ((addr.offset - base) // geo.granule) & 1:
                        pending.add(ptr)
            listed = [a.pack() for lst in allocator.free for a in lst]
            free = set(listed)
            live = reachable & granted
            overlap = (live & free) | (live & pending) | (free & pending) | (free - granted)
            missing = granted - live - free - pending
            counts = {"granted": len(granted), "live": len(live), "free": len(free), "pending": len(pending),
                      "overlap": len(overlap) + len(listed) - len(free), "missing": len(missing)}
            sample = ",".join(f"{p:#x}" for p in sorted(missing)[:3]) or "-"
            self.record("harness", "CENSUS", f"c{cid}",
                        " ".join(f"{k}={v}" for k, v in counts.items()) + f" sample={sample}")
            result[cid] = counts
        return result


def build(scenario: Scenario, track_digest: bool = False,
          plan: Optional[Dict[int, List[KvRequest]]] = None) -> Cluster:
    """Cluster with every client spawned, set up and preloaded. `plan` replaces the generated requests."""
    cluster = Cluster(scenario, track_digest)
    if plan is None:
        plan = workload.generate(scenario)
    for cid in range(scenario.num_clients):
        cluster.add_client(cid, plan[cid])
    for client in cluster.clients.values():
        cluster.setup_client(client)
    for cid in cluster.clients:
        for i, key in enumerate(workload.preload_keys(scenario, cid)):
            cluster.call(cid, KvRequest("INSERT", key, workload.make_value(cid, -1 - i, scenario.value_size)))
    cluster.record("harness", "START", "run", f"clients={scenario.num_clients} tick={cluster.sim.tick}")
    return cluster


# ---------------------------------------------------------------------------
# Trace I/O
# ---------------------------------------------------------------------------

def trace_header(scenario: Scenario) -> List[str]:
    return [TRACE_MAGIC] + [f"scenario {line}" for line in scenario.to_lines()]


def write_trace(path, trace: Trace) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(trace.text(), encoding="utf-8")
    logger.info(f"Trace written to {path} ({len(trace)} events)")
    return path


def parse_trace(text: str) -> Tuple[Scenario, Trace]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# {TRACE_MAGIC}":
        raise TraceFormatError(f"missing '# {TRACE_MAGIC}' header")
    header, events = [], []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        if line.startswith("# "):
            header.append(line[2:])
            continue
        try:
            events.append(TraceEvent.parse(line))
        except ValueError:
            raise TraceFormatError(f"line {lineno}: cannot parse event '{line}'")
    scenario_text = "\n".join(h[len("scenario "):] for h in header if h.startswith("scenario "))
    trace = Trace(header)
    trace.events = events
    return parse_scenario(scenario_text), trace


def read_trace(path) -> Tuple[Scenario, Trace]:
    path = Path(path)
    if not path.exists():
        raise TraceFormatError(f"trace file not found: {path}")
    return parse_trace(path.read_text(encoding="utf-8"))


def history(trace: Trace) -> List[Operation]:
    """Client operations of a trace; requests cut short by a crash stay pending."""
    ops, open_ops = [], {}
    for e in trace.events:
        if e.kind == "INVOKE":
            if e.actor in open_ops:
                ops.append(open_ops.pop(e.actor))
            op, key = e.addr.split(" ", 1)
            value = _unhex(tokens(e.outcome).get("value", "-")) or b""
            open_ops[e.actor] = Operation(e.actor, op, bytes.fromhex(key), value, invoke=e.tick)
        elif e.kind == "RESPOND":
            op = open_ops.pop(e.actor, None)
            if op is None:
                raise TraceFormatError(f"tick {e.tick}: {e.actor} responds without an invocation")
            t = tokens(e.outcome)
            op.respond, op.status, op.result = e.tick, t["status"], _unhex(t.get("value", "-"))
            ops.append(op)
    ops.extend(open_ops.values())
    return ops


def check_linearizability(trace: Trace) -> List[Violation]:
    return check_history(history(trace))


# ---------------------------------------------------------------------------
# Stats
# ---------------------------------------------------------------------------

@dataclass
class Stats:
    ops: Counter = field(default_factory=Counter)
    statuses: Counter = field(default_factory=Counter)
    routes: Counter = field(default_factory=Counter)
    rules: Counter = field(default_factory=Counter)
    rtts: Dict[str, List[int]] = field(default_factory=lambda: defaultdict(list))
    fail_queries: int = 0
    crashes: int = 0
    fabric_ops: int = 0
    failed_ops: int = 0
    ticks: int = 0
    recoveries: List[Dict[str, str]] = field(default_factory=list)

    @classmethod
    def from_trace(cls, trace: Trace) -> "Stats":
        """Counts over the measured part of a run (after the START marker)."""
        stats = cls()
        started = not any(e.kind == "START" for e in trace.events)
        for e in trace.events:
            stats.ticks = max(stats.ticks, e.tick)
            if e.kind == "START":
                started = True
                continue
            if e.kind == "RECOVERY":
                stats.recoveries.append({"target": e.addr, **tokens(e.outcome)})
            elif e.kind == "CRASH":
                stats.crashes += 1
            if not started:
                continue
            if e.kind == "RESPOND":
                op = e.addr.split(" ", 1)[0]
                t = tokens(e.outcome)
                stats.ops[op] += 1
                stats.statuses[f"{op}:{t['status']}"] += 1
                stats.routes[t.get("route", "-")] += 1
                if t.get("rule", "-") != "-":
                    stats.rules[t["rule"]] += 1
                stats.rtts[op].append(int(t["rtts"]))
            elif e.kind == "RPC" and e.addr == "fail_query":
                stats.fail_queries += 1
            elif e.kind in ("READ", "WRITE", "CAS", "FAA", "ALLOC_BLOCK"):
                stats.fabric_ops += 1
                if e.outcome.startswith("FAIL"):
                    stats.failed_ops += 1
        return stats

    def rtt_histogram(self, op: str) -> np.ndarray:
        return np.bincount(np.asarray(self.rtts.get(op, []), dtype=np.int64))

    def rtt_rows(self) -> List[list]:
        rows = []
        for op in sorted(self.rtts):
            values = np.asarray(self.rtts[op])
            hist = self.rtt_histogram(op)
            shape = " ".join(f"{i}:{n}" for i, n in enumerate(hist) if n)
            rows.append([op, len(values), f"{values.mean():.2f}", int(np.percentile(values, 50)),
                         int(np.percentile(values, 99)), int(values.max()), shape])
        return rows

    def to_dict(self):
        return {
            "ops": dict(self.ops), "statuses": dict(self.statuses), "routes": dict(self.routes),
            "rules": dict(self.rules), "fail_queries": self.fail_queries, "crashes": self.crashes,
            "fabric_ops": self.fabric_ops, "failed_ops": self.failed_ops, "ticks": self.ticks,
            "rtt_histograms": {op: self.rtt_histogram(op).tolist() for op in sorted(self.rtts)},
            "recoveries": self.recoveries,
        }


@dataclass
class RunResult:
    scenario: Scenario
    trace: Trace
    stats: Stats
    cluster: Optional[Cluster] = None
    error: Optional[str] = None


def run(scenario: Scenario, keep_cluster: bool = False) -> RunResult:
    """Build, run to completion and census one scenario. Deterministic in the seed."""
    logger.info(f"Running scenario seed={scenario.seed} clients={scenario.num_clients} "
                f"ops={scenario.ops_per_client} workload={scenario.workload} crashes={len(scenario.crashes)}")
    cluster = build(scenario)
    error = None
    try:
        cluster.sim.run()
    except DmkvError as exc:
        error = f"{type(exc).__name__}: {exc}"
        logger.error(f"Run aborted at tick {cluster.sim.tick}: {error}")
        cluster.record("harness", "ERROR", type(exc).__name__, str(exc).replace("\n", " "))
    cluster.census()
    stats = Stats.from_trace(cluster.trace)
    return RunResult(scenario, cluster.trace, stats, cluster if keep_cluster else None, error)


def replay(path) -> Tuple[Scenario, List[str]]:
    """Re-run a recorded scenario; returns the unified diff against the recorded trace (empty if equal)."""
    scenario, recorded = read_trace(path)
    result = run(scenario)
    diff = list(difflib.unified_diff(recorded.lines(), result.trace.lines(), "recorded", "replayed",
                                     lineterm="", n=1))
    return scenario, diff


# ---------------------------------------------------------------------------
# Audit
# ---------------------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""
    witnesses: List[str] = field(default_factory=list)


@dataclass
class AuditReport:
    checks: List[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failed(self) -> List[Check]:
        return [c for c in self.checks if not c.passed]

    def check(self, name: str) -> Check:
        return next(c for c in self.checks if c.name == name)

    def rows(self) -> List[list]:
        return [[c.name, "pass" if c.passed else "FAIL", c.detail] for c in self.checks]


def _check(name: str, problems: List[str], detail: str) -> Check:
    return Check(name, not problems, detail if not problems else f"{len(problems)} problem(s)", problems[:10])


def _transitions(events: List[TraceEvent]) -> Dict[int, List[Tuple[int, int, int]]]:
    """Per slot (tick, word, seq) install sequence, repeats of the same word collapsed."""
    out: Dict[int, List[Tuple[int, int, int]]] = defaultdict(list)
    for e in events:
        if e.kind != "INSTALL":
            continue
        slot = int(e.addr[4:])
        t = tokens(e.outcome)
        word, seq = int(t["word"], 16), int(t["seq"])
        seq_list = out[slot]
        if seq_list and seq_list[-1][1] == word:
            if not seq_list[-1][2] and seq:
                seq_list[-1] = (seq_list[-1][0], word, seq)
            continue
        seq_list.append((e.tick, word, seq))
    return out


def audit_winners(events: List[TraceEvent], crash_free: bool) -> Check:
    """At most one winner per write round; exactly one when nothing crashed."""
    transitions = _transitions(events)
    rounds: Dict[Tuple[int, int], List[TraceEvent]] = defaultdict(list)
    problems = []
    for e in events:
        if e.kind != "ROUND":
            continue
        slot = int(e.addr[4:])
        t = tokens(e.outcome)
        v_old, seen = int(t["v_old"], 16), int(t["seen"])
        index = -1 if v_old == 0 else None
        for i, (tick, word, _) in enumerate(transitions.get(slot, [])):
            if tick > seen:
                break
            if word == v_old:
                index = i
        if index is None:
            # a value read from a backup may reach the primary only through the master
            if t["master"] != "1":
                problems.append(f"slot{slot}: round on {v_old:#x} that was never installed ({e.actor} @ {e.tick})")
            continue
        rounds[(slot, index)].append(e)
    for (slot, index), records in sorted(rounds.items()):
        outcomes = [tokens(r.outcome) for r in records]
        winners = [r for r, t in zip(records, outcomes) if t["won"] == "1"]
        decided = {t["v_new"] for t in outcomes if t["won"] == "1"}
        if len(decided) > 1:
            problems.append(f"slot{slot} round {index}: winners " + ", ".join(r.actor for r in winners))
        elif crash_free and not winners:
            problems.append(f"slot{slot} round {index}: no winner among " + ", ".join(r.actor for r in records))
    return _check("exactly-one-winner", problems, f"{len(rounds)} rounds")


def audit_exactly_once(events: List[TraceEvent]) -> Check:
    """Each installed (word, seq) appears once in one slot; every OK winner's install happened."""
    transitions = _transitions(events)
    problems, owner, installed = [], {}, set()
    for slot, seq_list in sorted(transitions.items()):
        seen_here = set()
        for tick, word, seq in seq_list:
            installed.add((slot, word, seq))
            if not word:
                continue
            pair = (word, seq)
            if pair in seen_here:
                problems.append(f"slot{slot}: {word:#x} seq {seq} applied twice (again at tick {tick})")
            elif owner.get(pair, slot) != slot:
                problems.append(f"{word:#x} seq {seq} installed in slot{owner[pair]} and slot{slot}")
            seen_here.add(pair)
            owner.setdefault(pair, slot)
    installed_words = {(s, w) for s, w, _ in installed}
    for e in events:
        if e.kind != "RESPOND":
            continue
        install = tokens(e.outcome).get("install")
        if install is None:
            continue
        slot, word, seq = install.split("/")
        if (int(slot), int(word, 16)) not in installed_words:
            problems.append(f"{e.actor} @ {e.tick}: acknowledged install {install} never reached the primary")
    return _check("exactly-once", problems, f"{len(installed)} installs")


def audit_rtts(events: List[TraceEvent], r: int) -> Check:
    """Charged RTTs match the trace; undisturbed winners spend exactly the rule's slot phases."""
    problems, checked = [], 0
    windows: Dict[str, List[TraceEvent]] = {}
    for e in events:
        if e.kind == "INVOKE":
            windows[e.actor] = []
        elif e.kind in ("PHASE", "RPC") and e.actor in windows:
            windows[e.actor].append(e)
        elif e.kind == "CRASH":
            windows.pop(e.actor, None)
        elif e.kind == "RESPOND" and e.actor in windows:
            window = windows.pop(e.actor)
            t = tokens(e.outcome)
            op = e.addr.split(" ", 1)[0]
            if int(t["rtts"]) != len(window):
                problems.append(f"{e.actor} @ {e.tick} {op}: charged {t['rtts']} RTTs, trace shows {len(window)}")
            rule = t.get("rule")
            if rule in RULE_RTTS and t["status"] == "OK" and t["master"] == "0" and t["retries"] == "0" \
                    and "install" in t:
                checked += 1
                slot_phases = [w.addr for w in window if w.kind == "PHASE" and w.addr in SLOT_LABELS]
                expected = RULE_RTTS[rule] - (1 if r == 1 else 0)
                if len(slot_phases) != expected:
                    problems.append(f"{e.actor} @ {e.tick} {op} {rule}: {len(slot_phases)} slot phases "
                                    f"({' '.join(slot_phases)}), expected {expected}")
                if op == "DELETE" and not any(w.addr == "clear" for w in window):
                    problems.append(f"{e.actor} @ {e.tick}: DELETE winner never cleared its slot")
    return _check("rtt-contract", problems, f"{checked} winning writes")


def audit_fencing(events: List[TraceEvent]) -> Check:
    """No index mutation tagged with a superseded epoch took effect."""
    problems = []
    fence_epoch, start, end = 0, 0, 0
    for e in events:
        if e.kind == "FENCE":
            fence_epoch = int(tokens(e.outcome)["epoch"])
            lo, hi = e.addr.split(":", 1)[1].split("-")
            start, end = int(lo, 16), int(hi, 16)
        elif e.kind in MUTATING and " e=" in e.outcome:
            epoch = int(e.outcome.rsplit("e=", 1)[1])
            offset = int(e.addr.split(":", 1)[1], 16)
            if epoch < fence_epoch and start <= offset < end and not e.outcome.startswith("FAIL"):
                problems.append(f"{e.actor} @ {e.tick}: {e.kind} {e.addr} with epoch {epoch} < {fence_epoch}")
    return _check("epoch-fencing", problems, f"fence epoch {fence_epoch}")


def audit_memory(events: List[TraceEvent]) -> List[Check]:
    census = [e for e in events if e.kind == "CENSUS"]
    if not census:
        return [Check("conservation", True, "no census"), Check("leak-freedom", True, "no census")]
    overlap, missing = [], []
    granted = 0
    for e in census:
        t = tokens(e.outcome)
        granted += int(t["granted"])
        if int(t["overlap"]):
            overlap.append(f"{e.addr}: {t['overlap']} object(s) counted twice")
        if int(t["missing"]):
            missing.append(f"{e.addr}: {t['missing']} object(s) neither live, free nor pending ({t['sample']})")
    return [_check("conservation", overlap, f"{granted} objects granted"),
            _check("leak-freedom", missing, f"{len(census)} clients")]


def audit(trace: Trace, scenario: Optional[Scenario] = None, linearizability: bool = True) -> AuditReport:
    if scenario is None:
        scenario, _ = parse_trace("\n".join(trace.lines()[:len(trace.header)]))
    events = trace.events
    crash_free = not any(e.kind == "CRASH" for e in events)
    report = AuditReport([
        audit_winners(events, crash_free),
        audit_rtts(events, scenario.sim.r),
        audit_exactly_once(events),
        audit_fencing(events),
        *audit_memory(events),
    ])
    errors = [f"{e.addr}: {e.outcome}" for e in events if e.kind == "ERROR"]
    report.checks.append(_check("liveness", errors, "run completed"))
    if linearizability:
        violations = check_linearizability(trace)
        report.checks.append(_check("linearizability", [str(v) for v in violations],
                                    f"{len(history(trace))} operations"))
    return report


# ---------------------------------------------------------------------------
# Exhaustive exploration
# ---------------------------------------------------------------------------

def slot_sweep(writers: int, r: int, max_steps: int = 400) -> Exploration:
    """Every interleaving of `writers` conflicting slot writes over `r` replicas."""
    offset = WORD

    def build_sim() -> Simulation:
        fabric = Fabric(r, 2 * WORD, trace=None, track_digest=True)
        sim = Simulation(fabric)
        sets = {0: SlotSet.on_nodes(list(range(r)), offset)}
        sim.envs = []
        for i in range(writers):
            env = StaticEnv(f"w{i}", sets, clock=lambda: sim.tick)
            sim.envs.append(env)
            sim.spawn(env.name, slot_write(env, 0, (i + 1) << 8), kind="client")
        return sim

    def check(sim: Simulation) -> List[str]:
        problems = []
        rounds = defaultdict(list)
        for env in sim.envs:
            for record in env.rounds:
                rounds[record.v_old].append(record)
        for v_old, records in sorted(rounds.items()):
            winners = [rec.actor for rec in records if rec.won]
            if len(winners) != 1:
                problems.append(f"round on {v_old:#x}: winners {winners}")
        for actor in sim.actors:
            report = actor.result
            if report is None or not report.won:
                continue
            expected = RULE_RTTS[report.outcome.value] - (1 if r == 1 else 0)
            if report.rtts_used != expected:
                problems.append(f"{actor.name} {report.outcome.value} used {report.rtts_used} RTTs, "
                                f"expected {expected}")
        primary = sim.fabric.load_word(0, offset)
        installs = [word for env in sim.envs for _, word in env.installs]
        if primary not in installs:
            problems.append(f"primary holds {primary:#x}, which no writer installed")
        return problems

    return Explorer(build_sim, check, max_steps).explore()


def explore(scenario: Scenario, plan: Optional[Dict[int, List[KvRequest]]] = None,
            expect: Optional[Callable[[Cluster], List[str]]] = None) -> Exploration:
    """
    Every interleaving of a small client-level scenario, audited at each terminal state.

    `plan` fixes each client's requests; `expect` adds checks on the final cluster.
    """
    def check(sim: Simulation) -> List[str]:
        sim.owner.census()
        report = audit(sim.owner.trace, scenario)
        problems = [f"{c.name}: {w}" for c in report.failed for w in (c.witnesses or [c.detail])]
        if expect is not None:
            problems += expect(sim.owner)
        return problems

    return Explorer(lambda: build(scenario, track_digest=True, plan=plan).sim, check, scenario.max_steps).explore()


def sweep_grid(writer_counts: Iterable[int], replicas: Iterable[int], max_steps: int = 400,
               checkpoint: Optional[str] = None) -> List[dict]:
    """Slot sweeps over a writers x r grid, resumable from a JSON checkpoint."""
    done: Dict[str, dict] = {}
    if checkpoint and os.path.exists(checkpoint):
        with open(checkpoint, "r") as f:
            done = json.load(f)
        logger.info(f"Resuming sweep: {len(done)} cells already done")
    cells = [(w, r) for w in writer_counts for r in replicas]
    for w, r in tqdm(cells, desc="Sweeping slot interleavings"):
        key = f"{w}x{r}"
        if key in done:
            continue
        t0 = time.time()
        result = slot_sweep(w, r, max_steps)
        done[key] = {"writers": w, "r": r, **result.to_dict(), "seconds": round(time.time() - t0, 2)}
        logger.info(f"{key}: {result.schedules} schedules, {result.states} states, "
                    f"{len(result.violations)} violations")
        if checkpoint:
            with open(checkpoint, "w") as f:
                json.dump(done, f, indent=2)
    return [done[f"{w}x{r}"] for w, r in cells]


# ---------------------------------------------------------------------------
# Seed pool
# ---------------------------------------------------------------------------

_worker_scenario: Optional[Scenario] = None


def _worker_init(scenario_lines: List[str]) -> None:
    """Parse the scenario once per worker process."""
    global _worker_scenario
    _worker_scenario = parse_scenario("\n".join(scenario_lines))


def summarize(result: RunResult) -> dict:
    report = audit(result.trace, result.scenario)
    return {
        "seed": result.scenario.seed,
        "passed": report.passed and result.error is None,
        "failed": [c.name for c in report.failed],
        "witnesses": [w for c in report.failed for w in c.witnesses[:2]],
        "ops": sum(result.stats.ops.values()),
        "rules": dict(result.stats.rules),
        "fail_queries": result.stats.fail_queries,
        "ticks": result.stats.ticks,
        "error": result.error,
    }


def _seed_task(seed: int) -> dict:
    return summarize(run(with_overrides(_worker_scenario, seed=seed)))


def default_workers() -> int:
    configured = os.getenv("DMKV_WORKERS")
    if configured:
        return max(1, int(configured))
    return max(1, (psutil.cpu_count(logical=False) or 2) - 1)


def _save_checkpoint(checkpoint: Optional[str], results: Dict[int, dict]):
    if checkpoint:
        with open(checkpoint, "w") as f:
            json.dump({str(k): v for k, v in results.items()}, f)


def run_seeds(scenario: Scenario, seeds: Iterable[int], workers: Optional[int] = None,
              checkpoint: Optional[str] = None) -> List[dict]:
    """Run and audit one scenario under many seeds, in worker processes when workers > 1."""
    seeds = list(seeds)
    results: Dict[int, dict] = {}
    if checkpoint and os.path.exists(checkpoint):
        with open(checkpoint, "r") as f:
            results = {int(k): v for k, v in json.load(f).items()}
        logger.info(f"Resuming: {len(results)} seeds already done")
    pending = [s for s in seeds if s not in results]
    workers = workers or default_workers()

    if workers == 1 or len(pending) <= 1:
        for seed in tqdm(pending, desc="Seeds"):
            try:
                results[seed] = summarize(run(with_overrides(scenario, seed=seed)))
            except Exception as e:
                logger.error(f"Seed {seed} failed: {e}")
                results[seed] = {"seed": seed, "passed": False, "failed": ["exception"], "error": str(e)}
        _save_checkpoint(checkpoint, results)
        return [results[s] for s in seeds]

    def _make_executor():
        return ProcessPoolExecutor(max_workers=workers, max_tasks_per_child=50,
                                   initializer=_worker_init, initargs=(scenario.to_lines(),))

    logger.info(f"Seeds to run: {len(pending)} | Workers: {workers}")
    queue = list(pending)
    with tqdm(total=len(pending), desc="Seeds") as pbar:
        while queue:
            executor = _make_executor()
            active: Dict[Future, int] = {}
            try:
                for seed in queue:
                    active[executor.submit(_seed_task, seed)] = seed
                for future in list(active):
                    seed = active[future]
                    try:
                        results[seed] = future.result()
                    except BrokenExecutor:
                        raise
                    except Exception as e:
                        logger.error(f"Seed {seed} failed: {e}")
                        results[seed] = {"seed": seed, "passed": False, "failed": ["exception"], "error": str(e)}
                    pbar.update(1)
                    if len(results) % 20 == 0:
                        _save_checkpoint(checkpoint, results)
                executor.shutdown(wait=True)
                queue = []
            except BrokenExecutor:
                logger.warning("Worker pool broke, saving checkpoint and restarting pool...")
                _save_checkpoint(checkpoint, results)
                executor.shutdown(wait=False)
                queue = [s for s in queue if s not in results]
    _save_checkpoint(checkpoint, results)
    return [results[s] for s in seeds]
