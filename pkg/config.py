"""
Configuration for simulated disaggregated-memory KV runs
SimConfig holds geometry and protocol knobs, Scenario wraps one experiment
"""

import os
import logging
from dataclasses import dataclass, field, asdict, fields, replace
from pathlib import Path
from typing import List, Dict, Optional

from dotenv import load_dotenv

from errors import ConfigError

load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_SEED = int(os.getenv("DMKV_SEED", "7"))
DEFAULT_LOG_LEVEL = os.getenv("DMKV_LOG_LEVEL", "INFO")

WORKLOAD_MIXES: Dict[str, Dict[str, float]] = {
    # YCSB shapes: A update heavy, B read mostly, C read only, D read latest (inserts)
    "A": {"SEARCH": 0.5, "UPDATE": 0.5},
    "B": {"SEARCH": 0.95, "UPDATE": 0.05},
    "C": {"SEARCH": 1.0},
    "D": {"SEARCH": 0.95, "INSERT": 0.05},
}
OP_NAMES = ("SEARCH", "INSERT", "UPDATE", "DELETE")
CRASH_POINTS = ("c0", "c1", "c2", "c3")


@dataclass
class SimConfig:
    num_mns: int = 5
    r: int = 3
    region_size: int = 256 * 1024
    block_size: int = 4 * 1024
    num_regions: int = 0
    min_class: int = 64
    index_capacity: int = 1024
    slots_per_key: int = 8
    cache_capacity: int = 1024
    cache_threshold: float = 0.5
    lease_ticks: int = 10
    spin_budget: int = 10_000
    reclaim_interval_ticks: int = 200
    refill_watermark: int = 2
    max_clients: int = 16
    ring_vnodes: int = 16
    hash_seed: int = 0
    oplog_enabled: bool = True
    max_ticks: int = 5_000_000

    @property
    def regions(self) -> int:
        return self.num_regions or 4 * self.num_mns

    def validate(self) -> "SimConfig":
        if self.num_mns < 1:
            raise ConfigError("num_mns must be at least 1")
        if not 1 <= self.r <= self.num_mns:
            raise ConfigError(f"r={self.r} must be between 1 and num_mns={self.num_mns}")
        for name in ("region_size", "block_size", "min_class"):
            value = getattr(self, name)
            if value <= 0 or value & (value - 1):
                raise ConfigError(f"{name}={value} must be a power of two")
        if self.min_class < 64:
            raise ConfigError("min_class must be at least 64 bytes")
        if self.block_size < self.min_class or self.region_size < 4 * self.block_size:
            raise ConfigError("need min_class <= block_size and at least 4 blocks per region")
        if self.index_capacity < 1 or self.slots_per_key < 1:
            raise ConfigError("index_capacity and slots_per_key must be positive")
        if not 0.0 <= self.cache_threshold <= 1.0:
            raise ConfigError("cache_threshold must lie in [0, 1]")
        if self.num_mns > 255 or self.max_clients > 254:
            raise ConfigError("at most 255 memory nodes and 254 clients")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class CrashSpec:
    """One scheduled crash: `mn:1@500`, `client:0@1200` or `client:0@c2:UPDATE`."""
    kind: str
    target: int
    tick: Optional[int] = None
    point: Optional[str] = None
    op: Optional[str] = None

    @classmethod
    def parse(cls, text: str) -> "CrashSpec":
        try:
            who, when = text.strip().split("@", 1)
            kind, target = who.split(":")
            kind = kind.strip().lower()
            target = int(target)
        except ValueError:
            raise ConfigError(f"bad crash entry '{text}'")
        if kind not in ("mn", "client"):
            raise ConfigError(f"crash kind must be mn or client: '{text}'")
        when = when.strip()
        if when[:1] == "c" and kind == "client":
            point, _, op = when.partition(":")
            op = op.upper() or None
            if point not in CRASH_POINTS or (op is not None and op not in OP_NAMES[1:]):
                raise ConfigError(f"bad crash point in '{text}'")
            return cls(kind, target, point=point, op=op)
        try:
            return cls(kind, target, tick=int(when))
        except ValueError:
            raise ConfigError(f"bad crash tick in '{text}'")

    def __str__(self):
        if self.point:
            return f"{self.kind}:{self.target}@{self.point}" + (f":{self.op}" if self.op else "")
        return f"{self.kind}:{self.target}@{self.tick}"


@dataclass
class Scenario:
    seed: int = DEFAULT_SEED
    num_clients: int = 4
    ops_per_client: int = 100
    keys: int = 64
    workload: str = "A"
    mix: Dict[str, float] = field(default_factory=dict)
    distribution: str = "zipfian"
    theta: float = 0.99
    value_size: int = 64
    preload: bool = True
    crashes: List[CrashSpec] = field(default_factory=list)
    mode: str = "random"
    restart_crashed: bool = True
    max_steps: int = 400
    sim: SimConfig = field(default_factory=SimConfig)

    def op_mix(self) -> Dict[str, float]:
        if self.mix:
            return dict(self.mix)
        return dict(WORKLOAD_MIXES[self.workload])

    def validate(self) -> "Scenario":
        self.sim.validate()
        if self.num_clients < 1 or self.num_clients > self.sim.max_clients:
            raise ConfigError(f"num_clients must be in 1..{self.sim.max_clients}")
        if self.keys < 1 or self.ops_per_client < 0:
            raise ConfigError("keys must be positive and ops_per_client non-negative")
        if not self.mix and self.workload not in WORKLOAD_MIXES:
            raise ConfigError(f"unknown workload '{self.workload}' (use A, B, C, D or a mix)")
        mix = self.op_mix()
        if any(op not in OP_NAMES or weight < 0 for op, weight in mix.items()) or sum(mix.values()) <= 0:
            raise ConfigError(f"bad op mix {mix}")
        if self.distribution not in ("uniform", "zipfian"):
            raise ConfigError("distribution must be uniform or zipfian")
        if not 0.0 < self.theta < 1.0 and self.distribution == "zipfian":
            raise ConfigError("zipfian theta must lie in (0, 1)")
        if self.mode not in ("random", "exhaustive"):
            raise ConfigError("mode must be random or exhaustive")
        if self.mode == "exhaustive":
            if self.num_clients > 3 or self.keys > 2:
                raise ConfigError("exhaustive mode allows at most 3 clients and 2 keys")
            if self.crashes:
                raise ConfigError("exhaustive mode does not inject crashes")
        if self.crashes and not self.sim.oplog_enabled:
            raise ConfigError("crash recovery needs the operation log (oplog_enabled = true)")
        mn_crashes = sum(1 for c in self.crashes if c.kind == "mn")
        if mn_crashes > self.sim.r - 1:
            raise ConfigError(f"{mn_crashes} MN crashes exceed the r-1={self.sim.r - 1} tolerated")
        for crash in self.crashes:
            limit = self.sim.num_mns if crash.kind == "mn" else self.num_clients
            if not 0 <= crash.target < limit:
                raise ConfigError(f"crash target out of range: {crash}")
        return self

    def to_lines(self) -> List[str]:
        """Serialize as flat key = value lines, readable by parse_scenario."""
        lines = []
        for f in fields(self):
            if f.name == "sim":
                continue
            value = getattr(self, f.name)
            if f.name == "crashes":
                value = ", ".join(str(c) for c in value)
            elif f.name == "mix":
                value = ", ".join(f"{op}:{w}" for op, w in value.items())
            lines.append(f"{f.name} = {value}")
        for f in fields(self.sim):
            lines.append(f"{f.name} = {getattr(self.sim, f.name)}")
        return lines

    def to_dict(self):
        data = asdict(self)
        data["crashes"] = [str(c) for c in self.crashes]
        return data


_SCENARIO_FIELDS = {f.name: f for f in fields(Scenario)}
_SIM_FIELDS = {f.name: f for f in fields(SimConfig)}


def _coerce(name: str, raw: str, default):
    if isinstance(default, bool):
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got '{raw}'")
    try:
        if isinstance(default, int):
            raw = raw.replace("_", "")
            return int(raw, 16) if raw.lower().startswith("0x") else int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse '{raw}'")
    return raw


def parse_scenario(text: str) -> Scenario:
    """Parse flat key = value text. Unknown keys are an error."""
    scenario = Scenario()
    sim = SimConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key == "crashes" or key == "crash":
            scenario.crashes = [CrashSpec.parse(item) for item in raw.split(",") if item.strip()]
        elif key == "mix":
            mix = {}
            for item in raw.split(","):
                if not item.strip():
                    continue
                op, _, weight = item.partition(":")
                try:
                    mix[op.strip().upper()] = float(weight)
                except ValueError:
                    raise ConfigError(f"line {lineno}: bad mix entry '{item}'")
            scenario.mix = mix
        elif key in _SIM_FIELDS:
            setattr(sim, key, _coerce(key, raw, getattr(sim, key)))
        elif key in _SCENARIO_FIELDS and key != "sim":
            value = _coerce(key, raw, getattr(scenario, key))
            if key == "workload":
                value = value.upper()
            setattr(scenario, key, value)
        else:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
    scenario.sim = sim
    return scenario.validate()


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"scenario file not found: {path}")
    logger.info(f"Loading scenario from {path}")
    return parse_scenario(path.read_text(encoding="utf-8"))


def with_overrides(scenario: Scenario, **overrides) -> Scenario:
    """Copy a scenario, routing SimConfig keys into scenario.sim."""
    sim_updates = {k: v for k, v in overrides.items() if k in _SIM_FIELDS}
    top_updates = {k: v for k, v in overrides.items() if k not in _SIM_FIELDS}
    unknown = [k for k in top_updates if k not in _SCENARIO_FIELDS]
    if unknown:
        raise ConfigError(f"unknown scenario keys: {unknown}")
    return replace(scenario, sim=replace(scenario.sim, **sim_updates), **top_updates).validate()
