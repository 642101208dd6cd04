"""
YCSB-style request generation
Key choosers (uniform, zipfian, read-latest) and per-client request lists for a scenario.
"""

import logging
from typing import Dict, List

import numpy as np

from client import KvRequest
from config import OP_NAMES, Scenario

logger = logging.getLogger(__name__)


def key_name(i: int) -> bytes:
    return f"key{i:05d}".encode()


def make_value(cid: int, n: int, size: int) -> bytes:
    """Distinct value per (client, request) so histories can tell writes apart."""
    tag = f"c{cid}n{n}:".encode()
    return (tag * (size // len(tag) + 1))[:max(size, len(tag))]


class ZipfianChooser:
    """Rank-based zipfian over `n` items: P(rank i) proportional to 1 / (i + 1) ** theta."""

    def __init__(self, n: int, theta: float, rng: np.random.Generator):
        self.n = n
        self.theta = theta
        self.rng = rng
        weights = 1.0 / np.power(np.arange(1, n + 1, dtype=np.float64), theta)
        self.zeta = weights.sum()
        self.pmf = weights / self.zeta
        # hot ranks spread over the key space
        self.perm = rng.permutation(n)

    def sample(self, count: int) -> np.ndarray:
        ranks = self.rng.choice(self.n, size=count, p=self.pmf)
        return self.perm[ranks]


class UniformChooser:
    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng

    def sample(self, count: int) -> np.ndarray:
        return self.rng.integers(0, self.n, size=count)


class LatestChooser:
    """Zipfian over recency: rank 0 is the newest key, older keys fall off with rank."""

    def __init__(self, window: int, theta: float, rng: np.random.Generator):
        self.window = window
        self.rng = rng
        weights = 1.0 / np.power(np.arange(1, window + 1, dtype=np.float64), theta)
        self.pmf = weights / weights.sum()

    def ranks(self, shape) -> np.ndarray:
        return self.rng.choice(self.window, size=shape, p=self.pmf)


def make_chooser(scenario: Scenario, rng: np.random.Generator):
    if scenario.distribution == "zipfian":
        return ZipfianChooser(scenario.keys, scenario.theta, rng)
    return UniformChooser(scenario.keys, rng)


def reads_latest(scenario: Scenario) -> bool:
    """Workload D without an explicit mix: inserts grow the key space, reads chase the newest keys."""
    return scenario.workload == "D" and not scenario.mix


def preload_keys(scenario: Scenario, cid: int) -> List[bytes]:
    """This client's share of the initial key set."""
    if not scenario.preload:
        return []
    return [key_name(i) for i in range(cid, scenario.keys, scenario.num_clients)]


def _op_table(scenario: Scenario):
    mix = scenario.op_mix()
    ops = [op for op in OP_NAMES if mix.get(op, 0) > 0]
    weights = np.array([mix[op] for op in ops], dtype=np.float64)
    return ops, weights / weights.sum()


def generate(scenario: Scenario) -> Dict[int, List[KvRequest]]:
    """Request list per client id, deterministic in the scenario seed."""
    rng = np.random.default_rng(scenario.seed)
    ops, weights = _op_table(scenario)
    if reads_latest(scenario):
        plan = _generate_latest(scenario, rng, ops, weights)
    else:
        chooser = make_chooser(scenario, rng)
        plan = {}
        for cid in range(scenario.num_clients):
            kinds = rng.choice(len(ops), size=scenario.ops_per_client, p=weights)
            keys = chooser.sample(scenario.ops_per_client)
            plan[cid] = [_request(scenario, cid, n, ops[int(kind)], int(k))
                         for n, (kind, k) in enumerate(zip(kinds, keys))]
    counts = {op: sum(r.op == op for reqs in plan.values() for r in reqs) for op in ops}
    logger.debug(f"Generated {sum(len(r) for r in plan.values())} requests: {counts}")
    return plan


def _generate_latest(scenario: Scenario, rng: np.random.Generator, ops: List[str],
                     weights: np.ndarray) -> Dict[int, List[KvRequest]]:
    """
    Read-latest plan. Every INSERT takes the next fresh key after the preloaded
    ones; other requests pick a key by recency rank from the newest one. Clients
    advance in lockstep so a request's newest key is roughly the cluster's.
    """
    shape = (scenario.num_clients, scenario.ops_per_client)
    kinds = rng.choice(len(ops), size=shape, p=weights)
    ranks = LatestChooser(scenario.keys, scenario.theta, rng).ranks(shape)
    newest = scenario.keys - 1
    plan: Dict[int, List[KvRequest]] = {cid: [] for cid in range(scenario.num_clients)}
    for n in range(scenario.ops_per_client):
        for cid in range(scenario.num_clients):
            op = ops[int(kinds[cid, n])]
            if op == "INSERT":
                newest += 1
                k = newest
            else:
                k = max(0, newest - int(ranks[cid, n]))
            plan[cid].append(_request(scenario, cid, n, op, k))
    return plan


def _request(scenario: Scenario, cid: int, n: int, op: str, k: int) -> KvRequest:
    value = make_value(cid, n, scenario.value_size) if op in ("INSERT", "UPDATE") else b""
    return KvRequest(op, key_name(k), value)
