"""Two-tier machine description and the per-access cost model."""
from __future__ import annotations

from dataclasses import dataclass, replace

from ..allocator import Tier
from ..trace import PAGE_SIZE

UNBOUNDED = 1 << 50


@dataclass(frozen=True)
class TierConfig:
    name: str
    capacity_bytes: int
    bandwidth_bytes_per_s: float
    latency_ns: float

    def access_ns(self, granularity: int) -> float:
        """Cost of one access: latency plus one granule over the tier bandwidth."""
        return self.latency_ns + granularity / self.bandwidth_bytes_per_s * 1e9


@dataclass(frozen=True)
class MachineConfig:
    fast: TierConfig
    slow: TierConfig
    migration_bandwidth_bytes_per_s: float = 19e9
    access_granularity_bytes: int = 64
    profiling_slowdown: float = 4.0
    # fixed delay before a prefetch batch starts moving (page pinning, PTE updates, TLB shootdown)
    migration_latency_ns: float = 0.0

    def __post_init__(self):
        if self.fast.capacity_bytes <= 0 or self.slow.capacity_bytes <= 0:
            raise ValueError("tier capacities must be > 0")
        if self.fast.bandwidth_bytes_per_s < self.slow.bandwidth_bytes_per_s:
            raise ValueError("fast tier bandwidth must be >= slow tier bandwidth")
        if self.fast.latency_ns > self.slow.latency_ns:
            raise ValueError("fast tier latency must be <= slow tier latency")
        if self.migration_bandwidth_bytes_per_s <= 0:
            raise ValueError("migration bandwidth must be > 0")
        if self.migration_latency_ns < 0:
            raise ValueError("migration latency must be >= 0")

    @property
    def fast_access_ns(self) -> float:
        return self.fast.access_ns(self.access_granularity_bytes)

    @property
    def slow_access_ns(self) -> float:
        return self.slow.access_ns(self.access_granularity_bytes)

    @property
    def capacity(self) -> int:
        return self.fast.capacity_bytes

    def transfer_ns(self, nbytes: int) -> float:
        return nbytes / self.migration_bandwidth_bytes_per_s * 1e9

    @property
    def page_transfer_ns(self) -> float:
        return self.transfer_ns(PAGE_SIZE)

    def with_fast_capacity(self, capacity_bytes: int) -> "MachineConfig":
        return replace(self, fast=replace(self.fast, capacity_bytes=int(capacity_bytes)))

    def with_migration_bandwidth(self, bw: float) -> "MachineConfig":
        return replace(self, migration_bandwidth_bytes_per_s=bw)


def reference_hw(fast_capacity_bytes: int = UNBOUNDED, migration_latency_ns: float = 500_000.0) -> MachineConfig:
    """DDR fast tier and cross-socket slow tier (34 GB/s, 87 ns vs 19 GB/s, 182.7 ns)."""
    return MachineConfig(
        fast=TierConfig("FAST", int(fast_capacity_bytes), 34e9, 87.0),
        slow=TierConfig("SLOW", UNBOUNDED, 19e9, 182.7),
        migration_bandwidth_bytes_per_s=19e9,
        access_granularity_bytes=64,
        migration_latency_ns=migration_latency_ns,
    )


PRESETS = {"paper-hw": reference_hw}
