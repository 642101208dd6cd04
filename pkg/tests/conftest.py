import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from config import Scenario, SimConfig, with_overrides  # noqa: E402
from fabric import Fabric, Phase, PhaseResult, Trace  # noqa: E402
from memalloc import BlockGranter, ClientAllocator, Geometry, RegionMap  # noqa: E402
from scheduler import Backoff, Sleep  # noqa: E402

SMALL = dict(num_mns=3, r=2, region_size=16 * 1024, block_size=1024, index_capacity=16,
             slots_per_key=4, cache_capacity=64, lease_ticks=5, reclaim_interval_ticks=50)


def small_config(**overrides) -> SimConfig:
    return SimConfig(**{**SMALL, **overrides}).validate()


def small_scenario(**overrides) -> Scenario:
    """Scaled-down scenario: 3 memory nodes, r=2, 16 index groups of 4 slots."""
    base = Scenario(seed=1, num_clients=2, ops_per_client=20, keys=12, sim=small_config())
    return with_overrides(base, **overrides)


def issue(fabric: Fabric, ops, actor: str = "t", epoch=None) -> PhaseResult:
    """Apply a whole phase back to back, outside any scheduler."""
    return PhaseResult(fabric.apply(actor, op, epoch) for op in ops)


def drive(gen, fabric: Fabric, actor: str = "t"):
    """Run one protocol generator straight against a fabric; returns its result."""
    value = None
    while True:
        try:
            request = gen.send(value)
        except StopIteration as stop:
            return stop.value
        if isinstance(request, Phase):
            value = issue(fabric, request.ops, actor, request.epoch)
        elif isinstance(request, (Backoff, Sleep)):
            value = None
        else:
            raise TypeError(f"unexpected request {request!r}")


class Pool:
    """Fabric, geometry and placement of a small cluster without clients or master."""

    def __init__(self, **overrides):
        self.config = small_config(**overrides)
        self.geometry = Geometry(self.config)
        self.regions = RegionMap(self.config.num_mns, self.config.r, self.config.ring_vnodes,
                                 self.config.hash_seed, self.geometry.num_regions)
        self.trace = Trace()
        self.fabric = Fabric(self.config.num_mns, self.geometry.capacity, self.trace)
        self.granter = BlockGranter(self.fabric, self.geometry, self.regions)
        self.alive = set(range(self.config.num_mns))

    def allocator(self, cid: int = 0) -> ClientAllocator:
        allocator = ClientAllocator(cid, self.geometry, self.regions, lambda: self.alive,
                                    self.granter.grant_nodes())
        drive(allocator.init(self.regions.index_nodes()), self.fabric)
        return allocator


@pytest.fixture
def pool():
    return Pool()


@pytest.fixture
def scenario():
    return small_scenario()
