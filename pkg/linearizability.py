"""
Linearizability checking of KV histories
Wing-Gong search per key with memoization on (linearized set, map state).
Keys are independent, so each key's sub-history is checked on its own.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from errors import TraceFormatError

logger = logging.getLogger(__name__)

INFINITY = float("inf")


@dataclass
class Operation:
    """One request: invoked at `invoke`, answered at `respond` (None while pending)."""
    actor: str
    op: str
    key: bytes
    value: bytes = b""
    invoke: int = 0
    respond: Optional[int] = None
    status: Optional[str] = None
    result: Optional[bytes] = None

    @property
    def pending(self) -> bool:
        return self.respond is None

    def describe(self) -> str:
        end = "..." if self.pending else f"{self.respond}"
        out = f" -> {self.status}" if self.status else ""
        if self.result is not None:
            out += f" {self.result!r}"
        arg = f" {self.value!r}" if self.value else ""
        return f"[{self.invoke}..{end}] {self.actor} {self.op} {self.key!r}{arg}{out}"


@dataclass
class Violation:
    key: bytes
    ops: List[Operation] = field(default_factory=list)
    reason: str = ""

    def __str__(self):
        lines = [f"key {self.key!r} is not linearizable: {self.reason}"]
        lines.extend(f"  {op.describe()}" for op in self.ops)
        return "\n".join(lines)


def step(op: Operation, state: Optional[bytes]) -> Tuple[bool, Optional[bytes]]:
    """Sequential map semantics: (response is legal in `state`, state afterwards)."""
    status = op.status
    if op.pending:
        # a pending request that takes effect succeeded
        if op.op == "SEARCH":
            return True, state
        if op.op == "INSERT":
            return state is None, op.value
        if op.op == "UPDATE":
            return state is not None, op.value
        return state is not None, None
    if status == "TABLE_FULL":
        return True, state
    if op.op == "SEARCH":
        if status == "OK":
            return state == op.result, state
        return state is None, state
    if op.op == "INSERT":
        if status == "OK":
            return state is None, op.value
        return state is not None, state
    if op.op == "UPDATE":
        if status == "OK":
            return state is not None, op.value
        return state is None, state
    if op.op == "DELETE":
        if status == "OK":
            return state is not None, None
        return state is None, state
    raise TraceFormatError(f"unknown op {op.op}")


def check_key(key: bytes, ops: List[Operation], initial: Optional[bytes] = None) -> Optional[Violation]:
    """Search for a legal linearization of one key's operations; None when one exists."""
    ops = sorted((o for o in ops if o.status != "ERROR"), key=lambda o: (o.invoke, o.actor))
    n = len(ops)
    if n == 0:
        return None
    responds = [INFINITY if o.pending else o.respond for o in ops]
    required = 0
    for i, o in enumerate(ops):
        if not o.pending:
            required |= 1 << i

    seen = set()
    deepest: Tuple[int, int] = (-1, 0)
    stack: List[Tuple[int, Optional[bytes]]] = [(0, initial)]
    while stack:
        mask, state = stack.pop()
        if mask & required == required:
            return None
        if (mask, state) in seen:
            continue
        seen.add((mask, state))
        done = bin(mask & required).count("1")
        if done > deepest[0]:
            deepest = (done, mask)
        # an op may go next only if it was invoked before every remaining op responded
        horizon = INFINITY
        for i in range(n):
            if not mask >> i & 1 and responds[i] < horizon:
                horizon = responds[i]
        for i in range(n):
            if mask >> i & 1:
                continue
            if ops[i].invoke > horizon:
                break
            legal, after = step(ops[i], state)
            if legal:
                stack.append((mask | 1 << i, after))

    _, mask = deepest
    frontier = [o for i, o in enumerate(ops) if not mask >> i & 1]
    horizon = min((responds[i] for i in range(n) if not mask >> i & 1), default=INFINITY)
    witness = [o for o in frontier if o.invoke <= horizon]
    placed = [o for i, o in enumerate(ops) if mask >> i & 1 and not o.pending]
    if placed:
        witness.insert(0, max(placed, key=lambda o: o.respond))
    return Violation(key, witness, "no operation order fits the responses")


def by_key(ops: Iterable[Operation]) -> Dict[bytes, List[Operation]]:
    groups: Dict[bytes, List[Operation]] = defaultdict(list)
    for op in ops:
        groups[op.key].append(op)
    return groups


def check_history(ops: Iterable[Operation]) -> List[Violation]:
    """Every key's sub-history checked from an empty map."""
    violations = []
    for key, group in sorted(by_key(ops).items()):
        violation = check_key(key, group)
        if violation is not None:
            violations.append(violation)
    if violations:
        logger.warning(f"{len(violations)} key(s) failed the linearizability check")
    return violations
