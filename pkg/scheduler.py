"""
Deterministic actor scheduler for the simulated fabric
Seeded random interleaving, crash injection at phase boundaries, and an
exhaustive depth-first explorer with state memoization.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import mmh3
import numpy as np

from errors import LivenessError
from fabric import Fabric, FabricOp, Phase, PhaseResult, WRITE

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Requests an actor may yield besides a fabric Phase
# ---------------------------------------------------------------------------

class Backoff:
    """LOSE-loop yield: runnable again once fabric memory changes."""
    __slots__ = ()


class Sleep:
    __slots__ = ("ticks",)

    def __init__(self, ticks: int):
        self.ticks = ticks


class Rpc:
    """One-RTT call to the master endpoint. The reply may be deferred."""
    __slots__ = ("kind", "args")

    def __init__(self, kind: str, *args):
        self.kind = kind
        self.args = args


class AwaitEpoch:
    """Block until the membership epoch moves past `epoch`."""
    __slots__ = ("epoch",)

    def __init__(self, epoch: int):
        self.epoch = epoch


class Idle:
    __slots__ = ()


NO_REPLY = object()

READY = "ready"
IN_PHASE = "phase"
BACKOFF = "backoff"
SLEEPING = "sleep"
WAIT_RPC = "rpc"
WAIT_EPOCH = "await"
IDLE = "idle"
DONE = "done"
CRASHED = "crashed"
_FINISHED = (DONE, CRASHED)


class Actor:
    def __init__(self, name: str, gen, kind: str = "client", cid: Optional[int] = None):
        self.name = name
        self.gen = gen
        self.kind = kind
        self.cid = cid
        self.owner = None
        self.status = READY
        self.phase: Optional[Phase] = None
        self.results: Optional[PhaseResult] = None
        self.op_index = 0
        self.rtts = 0
        self.mark = None
        self.wake_at = 0
        self.await_epoch = 0
        self.reply = NO_REPLY
        self.inputs = 0
        self.result = None
        self.error: Optional[BaseException] = None

    def key(self):
        return (self.name, self.status, self.op_index, self.inputs, self.mark, self.await_epoch)

    def __repr__(self):
        return f"Actor({self.name}, {self.status}, rtts={self.rtts})"


def _chain(digest: int, token) -> int:
    return mmh3.hash128(f"{digest:x}|{token!r}", signed=False)


# ---------------------------------------------------------------------------
# Crash injection
# ---------------------------------------------------------------------------

_POINT_LABELS = {"c0": "kv_write", "c1": "commit", "c2": "cas_primary"}


class CrashInjector:
    """Fires scheduled crashes. Client crashes only land on phase boundaries."""

    def __init__(self, specs):
        self.mn_ticks = sorted((s.tick, s.target) for s in specs if s.kind == "mn")
        self.client_ticks = sorted((s.tick, s.target) for s in specs if s.kind == "client" and s.point is None)
        self.points: Dict[int, object] = {s.target: s for s in specs if s.kind == "client" and s.point}
        self.pending_clients: set = set()
        self.armed_c3: set = set()
        self.fired: List[str] = []

    def next_tick(self) -> Optional[int]:
        ticks = [t for t, _ in self.mn_ticks[:1]] + [t for t, _ in self.client_ticks[:1]]
        return min(ticks) if ticks else None

    def due(self, sim: "Simulation"):
        while self.mn_ticks and self.mn_ticks[0][0] <= sim.tick:
            _, node = self.mn_ticks.pop(0)
            self.fired.append(f"mn:{node}@{sim.tick}")
            sim.crash_mn(node)
        while self.client_ticks and self.client_ticks[0][0] <= sim.tick:
            _, cid = self.client_ticks.pop(0)
            self.pending_clients.add(cid)

    def on_issue(self, sim: "Simulation", actor: Actor, phase: Phase) -> bool:
        """Return True when the actor crashed instead of issuing `phase`."""
        cid = actor.cid
        if actor.kind != "client" or cid is None:
            return False
        if cid in self.pending_clients:
            self.pending_clients.discard(cid)
            self.fired.append(f"client:{cid}@{sim.tick}")
            sim.crash_client(actor)
            return True
        if cid in self.armed_c3:
            self.armed_c3.discard(cid)
            self.points.pop(cid, None)
            self.fired.append(f"client:{cid}@c3")
            sim.crash_client(actor)
            return True
        spec = self.points.get(cid)
        if spec is None:
            return False
        current_op = getattr(actor.owner, "current_op", None)
        if spec.op is not None and current_op != spec.op:
            return False
        if spec.point == "c3":
            if phase.label == "cas_primary":
                self.armed_c3.add(cid)
            return False
        if phase.label != _POINT_LABELS[spec.point]:
            return False
        del self.points[cid]
        self.fired.append(f"client:{cid}@{spec.point}")
        if spec.point == "c0":
            torn = next((op for op in phase.ops if op.kind == WRITE), None)
            if torn is not None:
                sim.fabric.apply(actor.name, FabricOp.write(torn.addr, torn.data[:-1]), phase.epoch)
        sim.crash_client(actor)
        return True


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

class Simulation:
    """Single logical timeline: one atomic fabric op or actor step per tick."""

    def __init__(self, fabric: Fabric, seed: int = 0, max_ticks: int = 5_000_000,
                 injector: Optional[CrashInjector] = None):
        self.fabric = fabric
        self.fabric.clock = lambda: self.tick
        self.rng = np.random.default_rng(seed)
        self.max_ticks = max_ticks
        self.injector = injector
        self.tick = 0
        self.actors: List[Actor] = []
        self.master = None
        self.history_digest = 0
        self.choices: List[int] = []

    @property
    def trace(self):
        return self.fabric.trace

    def record(self, actor: str, kind: str, addr: str, outcome: str):
        if self.fabric.trace is not None:
            self.fabric.trace.record(self.tick, actor, kind, addr, outcome)

    def note_history(self, token):
        self.history_digest = _chain(self.history_digest, token)

    # -- actor management ---------------------------------------------------

    def spawn(self, name: str, gen, kind: str = "client", cid: Optional[int] = None, owner=None) -> Actor:
        actor = Actor(name, gen, kind, cid)
        actor.owner = owner
        for i, existing in enumerate(self.actors):
            if existing.name == name:
                if existing.status not in _FINISHED:
                    raise ValueError(f"actor {name} is still running")
                self.actors[i] = actor
                break
        else:
            self.actors.append(actor)
        return actor

    def actor(self, name: str) -> Actor:
        for a in self.actors:
            if a.name == name:
                return a
        raise KeyError(name)

    def crash_mn(self, node: int):
        self.fabric.crash(node)
        if self.master is not None:
            self.master.notify_mn_crash(node, self.tick)

    def crash_client(self, actor: Actor):
        actor.status = CRASHED
        actor.gen.close()
        self.record(actor.name, "CRASH", f"cid{actor.cid}", "crash-stop")
        logger.info(f"Client {actor.cid} crashed at tick {self.tick}")
        if self.master is not None:
            self.master.notify_client_crash(actor.cid, self.tick)

    def reply(self, actor_name: str, value):
        self.actor(actor_name).reply = value

    # -- stepping -----------------------------------------------------------

    def _runnable(self, a: Actor) -> bool:
        status = a.status
        if status in (READY, IN_PHASE):
            return True
        if status == BACKOFF:
            return a.mark != self._memory_mark()
        if status == SLEEPING:
            return self.tick >= a.wake_at
        if status == WAIT_RPC:
            return a.reply is not NO_REPLY
        if status == WAIT_EPOCH:
            return self.master is not None and self.master.epoch > a.await_epoch
        if status == IDLE:
            return self.master.has_work(self.tick)
        return False

    def _memory_mark(self):
        return self.fabric.digest if self.fabric.track_digest else self.fabric.version

    def enabled(self) -> List[Actor]:
        return [a for a in self.actors if self._runnable(a)]

    def step(self, actor: Actor):
        status = actor.status
        if status == IN_PHASE:
            phase = actor.phase
            if actor.op_index < len(phase.ops):
                op = phase.ops[actor.op_index]
                result = self.fabric.apply(actor.name, op, phase.epoch)
                actor.results.append(result)
                actor.op_index += 1
                actor.inputs = _chain(actor.inputs, result)
                if actor.op_index < len(phase.ops):
                    return
            results, actor.phase, actor.results, actor.op_index = actor.results, None, None, 0
            self._resume(actor, results)
        elif status == WAIT_RPC:
            value, actor.reply = actor.reply, NO_REPLY
            actor.inputs = _chain(actor.inputs, value)
            self._resume(actor, value)
        elif status == WAIT_EPOCH:
            self._resume(actor, self.master.epoch)
        else:
            self._resume(actor, None)

    def _resume(self, actor: Actor, value):
        try:
            request = actor.gen.send(value)
        except StopIteration as stop:
            actor.status = DONE
            actor.result = stop.value
            return
        except Exception as exc:
            actor.status = DONE
            actor.error = exc
            raise
        self._accept(actor, request)

    def _accept(self, actor: Actor, request):
        if isinstance(request, Phase):
            if self.injector is not None and self.injector.on_issue(self, actor, request):
                return
            actor.rtts += 1
            actor.status = IN_PHASE
            actor.phase = request
            actor.results = PhaseResult()
            actor.op_index = 0
            self.record(actor.name, "PHASE", request.label or "-", f"ops={len(request.ops)} rtt={actor.rtts}")
        elif isinstance(request, Backoff):
            actor.status = BACKOFF
            actor.mark = self._memory_mark()
        elif isinstance(request, Sleep):
            actor.status = SLEEPING
            actor.wake_at = self.tick + max(1, request.ticks)
        elif isinstance(request, Rpc):
            actor.rtts += 1
            actor.status = WAIT_RPC
            actor.reply = NO_REPLY
            self.record(actor.name, "RPC", request.kind, " ".join(str(a) for a in request.args))
            value = self.master.handle_rpc(actor.name, request.kind, *request.args)
            if value is not NO_REPLY:
                actor.reply = value
        elif isinstance(request, AwaitEpoch):
            actor.status = WAIT_EPOCH
            actor.await_epoch = request.epoch
        elif isinstance(request, Idle):
            actor.status = IDLE
        else:
            raise TypeError(f"actor {actor.name} yielded {request!r}")

    def drive(self, gen, actor: Actor):
        """
        Run one generator to completion outside the interleaving, charging its
        phases to `actor`. Ops still advance the clock one tick each. Used for
        setup and preload, where nothing runs concurrently.
        """
        value = None
        while True:
            try:
                request = gen.send(value)
            except StopIteration as stop:
                return stop.value
            if isinstance(request, Phase):
                actor.rtts += 1
                self.record(actor.name, "PHASE", request.label or "-", f"ops={len(request.ops)} rtt={actor.rtts}")
                value = PhaseResult()
                for op in request.ops:
                    value.append(self.fabric.apply(actor.name, op, request.epoch))
                    self.tick += 1
            elif isinstance(request, (Backoff, Sleep)):
                self.tick += 1
                value = None
            else:
                raise TypeError(f"{actor.name} yielded {request!r} outside the scheduler")

    # -- random-mode driver ---------------------------------------------------

    def _next_timer(self) -> Optional[int]:
        timers = [a.wake_at for a in self.actors if a.status == SLEEPING]
        if self.master is not None:
            wake = self.master.next_wake()
            if wake is not None:
                timers.append(wake)
        if self.injector is not None:
            crash_at = self.injector.next_tick()
            if crash_at is not None:
                timers.append(crash_at)
        future = [t for t in timers if t > self.tick]
        return min(future) if future else None

    def finished(self) -> bool:
        return all(a.status in _FINISHED for a in self.actors if a.kind == "client")

    def run(self, until: Optional[Callable[[], bool]] = None):
        """Run until every client finished (or `until()` holds) and the master is idle."""
        while True:
            if until is not None and until():
                return
            if self.injector is not None:
                self.injector.due(self)
            enabled = self.enabled()
            if not enabled:
                done = self.finished()
                if done and (self.master is None or self.master.quiescent()):
                    return
                wake = self._next_timer()
                if wake is not None:
                    self.tick = wake
                    continue
                spinners = [a for a in self.actors if a.status == BACKOFF]
                if spinners:
                    for a in spinners:
                        a.mark = None
                    continue
                if done:
                    return
                blocked = ", ".join(f"{a.name}:{a.status}" for a in self.actors if a.status not in _FINISHED)
                raise LivenessError(f"no actor can make progress at tick {self.tick} ({blocked})")
            actor = enabled[int(self.rng.integers(len(enabled)))] if len(enabled) > 1 else enabled[0]
            self.step(actor)
            self.tick += 1
            if self.tick > self.max_ticks:
                raise LivenessError(f"run exceeded {self.max_ticks} ticks")

    def state_key(self):
        return (self.fabric.digest, self.history_digest, tuple(a.key() for a in self.actors))


# ---------------------------------------------------------------------------
# Exhaustive exploration
# ---------------------------------------------------------------------------

@dataclass
class Exploration:
    schedules: int = 0
    states: int = 0
    terminals: int = 0
    truncated: int = 0
    violations: List[str] = field(default_factory=list)
    witness: Optional[List[int]] = None

    def to_dict(self):
        return {"schedules": self.schedules, "states": self.states, "terminals": self.terminals,
                "truncated": self.truncated, "violations": self.violations[:10]}


class Explorer:
    """
    Enumerate every interleaving of a fresh simulation.

    `build()` returns a Simulation with its actors spawned and setup done; it
    must be deterministic. `check(sim)` is called on each distinct terminal
    state and returns a list of violation messages. Complete schedules are
    counted by dynamic programming over memoized states.
    """

    def __init__(self, build: Callable[[], Simulation], check: Callable[[Simulation], List[str]],
                 max_steps: int = 400, max_violations: int = 20):
        self.build = build
        self.check = check
        self.max_steps = max_steps
        self.max_violations = max_violations
        self.memo: Dict[tuple, int] = {}
        self.result = Exploration()

    def _replay(self, prefix: List[int]) -> Simulation:
        sim = self.build()
        for choice in prefix:
            sim.step(sim.enabled()[choice])
            sim.tick += 1
        return sim

    def _visit(self, sim: Simulation, prefix: List[int]) -> int:
        key = sim.state_key()
        if key in self.memo:
            return self.memo[key]
        self.result.states += 1
        enabled = sim.enabled()
        if not enabled or len(prefix) >= self.max_steps:
            count = self._terminal(sim, prefix, truncated=bool(enabled))
            self.memo[key] = count
            return count
        total = 0
        for i in range(len(enabled)):
            child = sim if i == len(enabled) - 1 else self._replay(prefix)
            child.step(child.enabled()[i])
            child.tick += 1
            total += self._visit(child, prefix + [i])
        self.memo[key] = total
        return total

    def _terminal(self, sim: Simulation, prefix: List[int], truncated: bool) -> int:
        if truncated:
            self.result.truncated += 1
            return 0
        self.result.terminals += 1
        problems = []
        if not sim.finished():
            stuck = [a.name for a in sim.actors if a.kind == "client" and a.status not in _FINISHED]
            problems.append(f"stuck actors {stuck}")
        problems.extend(self.check(sim))
        if problems and len(self.result.violations) < self.max_violations:
            self.result.violations.extend(problems)
            if self.result.witness is None:
                self.result.witness = list(prefix)
        return 1

    def explore(self) -> Exploration:
        sim = self.build()
        self.result.schedules = self._visit(sim, [])
        return self.result
