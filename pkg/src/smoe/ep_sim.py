"""Count-based expert-parallel load and expert-cache simulation over routing traces."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .trace import RoutingTrace


@dataclass(frozen=True)
class Placement:
    """Expert -> device map, plus the round-robin order in which tokens get home devices."""

    device_of: tuple[int, ...]
    num_devices: int
    home_order: tuple[int, ...] | None = None  # default 0, 1, ..., d-1

    def __post_init__(self):
        if self.num_devices < 1:
            raise ConfigError("need at least one device")
        if any(not 0 <= d < self.num_devices for d in self.device_of):
            raise ConfigError("placement maps an expert to a device that does not exist")
        if self.home_order is None:
            object.__setattr__(self, "home_order", tuple(range(self.num_devices)))
        if sorted(self.home_order) != list(range(self.num_devices)):
            raise ConfigError("home_order must be a permutation of the devices")

    @classmethod
    def contiguous(cls, num_experts: int, num_devices: int, experts_per_device: int | None = None) -> "Placement":
        """Experts ``[j*e, (j+1)*e)`` on device ``j``; ``e`` defaults to ceil(n / d)."""
        per = experts_per_device or -(-num_experts // num_devices)
        if per * num_devices < num_experts:
            raise ConfigError(f"{num_devices} devices x {per} experts cannot hold {num_experts} experts")
        return cls(tuple(e // per for e in range(num_experts)), num_devices)

    @classmethod
    def round_robin(cls, num_experts: int, num_devices: int) -> "Placement":
        return cls(tuple(e % num_devices for e in range(num_experts)), num_devices)

    def relabel(self, perm) -> "Placement":
        """The same placement with device ``d`` renamed to ``perm[d]`` everywhere."""
        return Placement(tuple(int(perm[d]) for d in self.device_of), self.num_devices,
                         tuple(int(perm[d]) for d in self.home_order))


@dataclass
class LoadReport:
    layer: int
    device_counts: np.ndarray
    imbalance: float
    cross_device_fraction: float

    @property
    def assignments(self) -> int:
        return int(self.device_counts.sum())


def simulate_ep(trace: RoutingTrace, placement: Placement, layer: int) -> LoadReport:
    """Replay one layer's assignments onto devices.

    Token ``i`` of the layer stream lives on home device
    ``home_order[i mod d]``; an assignment is cross-device when its expert's
    device differs from the token's home. Imbalance is max / mean of the
    per-device counts.
    """
    if len(placement.device_of) < trace.num_experts:
        raise ConfigError(f"placement covers {len(placement.device_of)} of {trace.num_experts} experts")
    _, _, experts, _ = trace.layer_view(layer)
    device_of = np.asarray(placement.device_of)
    d = placement.num_devices
    devices = device_of[experts]  # [tokens, K]
    counts = np.bincount(devices.reshape(-1), minlength=d)
    home = np.asarray(placement.home_order)[np.arange(len(experts)) % d]
    cross = float(np.mean(devices != home[:, None]))
    return LoadReport(layer, counts, float(counts.max() / counts.mean()), cross)


@dataclass(frozen=True)
class CacheConfig:
    capacity: int
    policy: str = "lru"

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError("cache capacity must be at least 1")
        if self.policy != "lru":
            raise ConfigError(f"unsupported cache policy {self.policy!r}")


@dataclass
class CacheResult:
    hits: int
    accesses: int

    @property
    def hit_rate(self) -> float:
        return self.hits / self.accesses if self.accesses else 0.0


def lru_replay(stream, capacity: int) -> CacheResult:
    """Replay expert ids through an LRU set of ``capacity`` residents; cold misses count."""
    resident: OrderedDict[int, None] = OrderedDict()
    hits = 0
    n = 0
    for e in stream:
        n += 1
        if e in resident:
            hits += 1
            resident.move_to_end(e)
        else:
            if len(resident) >= capacity:
                resident.popitem(last=False)
            resident[e] = None
    return CacheResult(hits, n)


def assignment_stream(trace: RoutingTrace, layer: int) -> list[int]:
    """The layer's expert ids in token order, K per token in rank order."""
    _, _, experts, _ = trace.layer_view(layer)
    return experts.reshape(-1).tolist()


def simulate_cache(trace: RoutingTrace, layer: int, cache: CacheConfig) -> float:
    if cache.capacity > trace.num_experts:
        raise ConfigError(f"capacity {cache.capacity} exceeds the {trace.num_experts} experts")
    return lru_replay(assignment_stream(trace, layer), cache.capacity).hit_rate


def ep_table(trace: RoutingTrace, placement: Placement) -> str:
    d = placement.num_devices
    rows = ["layer\t" + "\t".join(f"device_{j}" for j in range(d)) + "\timbalance\tcross_device_fraction"]
    for layer in sorted(int(x) for x in np.unique(trace.layer)):
        r = simulate_ep(trace, placement, layer)
        rows.append(f"{layer}\t" + "\t".join(str(int(c)) for c in r.device_counts)
                    + f"\t{r.imbalance:.6f}\t{r.cross_device_fraction:.6f}")
    return "\n".join(rows) + "\n"


def cache_table(trace: RoutingTrace, capacities, shuffled: RoutingTrace | None = None) -> str:
    cols = "layer\tcapacity\thit_rate" + ("\tshuffled_hit_rate" if shuffled is not None else "")
    rows = [cols]
    for layer in sorted(int(x) for x in np.unique(trace.layer)):
        for cap in capacities:
            line = f"{layer}\t{cap}\t{simulate_cache(trace, layer, CacheConfig(cap)):.6f}"
            if shuffled is not None:
                line += f"\t{simulate_cache(shuffled, layer, CacheConfig(cap)):.6f}"
            rows.append(line)
    return "\n".join(rows) + "\n"
