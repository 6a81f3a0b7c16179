"""Per-bucket compiled workload: migration units, per-layer access lists, short-lived costs."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ..allocator import MemoryPool, ReservationOverflow, group_key
from ..profiler import ObjectProfile, ProfileReport, pages_for, profile_step
from ..trace import PAGE_SIZE, Trace


@dataclass(frozen=True)
class Unit:
    """Long-lived migration unit: one large tensor or one packed small-object group."""

    uid: int
    tensor_ids: tuple[int, ...]
    npages: int
    alive_from: int
    alive_to: int
    persistent: bool
    accesses: tuple[tuple[int, int], ...]  # (layer, count)

    @property
    def nbytes(self) -> int:
        return self.npages * PAGE_SIZE

    @cached_property
    def access_layers(self) -> tuple[int, ...]:
        return tuple(layer for layer, _ in self.accesses)


@dataclass
class Workload:
    report: ProfileReport
    units: list[Unit]
    base_ns: np.ndarray
    layer_units: list[list[tuple[int, int]]]  # per layer: (uid, count)
    allocs: list[list[int]]  # per layer: step-local units allocated at its start
    frees: list[list[int]]  # per layer: step-local units freed at its end
    short_by_layer: list[list[ObjectProfile]]
    short_pages: np.ndarray  # packed short-lived pages per layer
    short_counts: np.ndarray  # short-lived accesses per layer
    _short_cost_cache: dict = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return len(self.base_ns)

    @cached_property
    def persistent_uids(self) -> tuple[int, ...]:
        return tuple(u.uid for u in self.units if u.persistent)

    @cached_property
    def largest_long_lived(self) -> int:
        return max((p.size_bytes for p in self.report.object_profiles if not p.is_short), default=0)

    def short_cost(self, layer: int, region_bytes: int, fast_ns: float, slow_ns: float) -> float:
        """Access time of the layer's short-lived objects when the region holds ``region_bytes``."""
        need = int(self.short_pages[layer]) * PAGE_SIZE
        if region_bytes >= need:
            return float(self.short_counts[layer]) * fast_ns
        key = (layer, region_bytes)
        if key not in self._short_cost_cache:
            pool = MemoryPool(max(0, region_bytes))
            fast = slow = 0
            for obj in sorted(self.short_by_layer[layer], key=lambda o: (group_key(o), o.total_accesses, o.tensor_id)):
                try:
                    pool.alloc(obj)
                    fast += obj.total_accesses
                except ReservationOverflow:
                    slow += obj.total_accesses
            self._short_cost_cache[key] = (fast, slow)
        fast, slow = self._short_cost_cache[key]
        return fast * fast_ns + slow * slow_ns

    def all_tier_time(self, access_ns: float) -> float:
        total = float(self.base_ns.sum())
        total += access_ns * float(self.short_counts.sum())
        total += access_ns * sum(c for u in self.units for _, c in u.accesses)
        return total

    def layer_access_counts(self) -> np.ndarray:
        counts = self.short_counts.astype(np.int64).copy()
        for u in self.units:
            for layer, c in u.accesses:
                counts[layer] += c
        return counts


def _make_units(profiles: list[ObjectProfile]) -> list[Unit]:
    long_lived = [p for p in profiles if not p.is_short]
    raw = []
    for p in long_lived:
        if not p.is_small:
            raw.append(((p.tensor_id,), pages_for(p.size_bytes), p.alive_from, p.alive_to, p.survives,
                        p.accesses))
    groups: dict = defaultdict(list)
    for p in long_lived:
        if p.is_small:
            groups[group_key(p)].append(p)
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda p: (p.total_accesses, p.tensor_id))
        pages, fill = 0, 4096
        for m in members:
            if fill + m.size_bytes > 4096:
                pages += 1
                fill = 0
            fill += m.size_bytes
        acc: dict[int, int] = defaultdict(int)
        for m in members:
            for layer, c in m.accesses:
                acc[layer] += c
        raw.append((tuple(m.tensor_id for m in members), pages, min(m.alive_from for m in members),
                    max(m.alive_to for m in members), any(m.survives for m in members),
                    tuple(sorted(acc.items()))))
    raw.sort(key=lambda r: min(r[0]))
    return [Unit(k, *r) for k, r in enumerate(raw)]


def compile_workload(trace: Trace, step_index: int, report: ProfileReport | None = None) -> Workload:
    from ..allocator import short_lived_layer_pages

    if report is None:
        report = profile_step(trace, step_index)
    L = report.num_layers
    profiles = list(report.object_profiles)
    units = _make_units(profiles)
    layer_units: list[list[tuple[int, int]]] = [[] for _ in range(L)]
    allocs: list[list[int]] = [[] for _ in range(L)]
    frees: list[list[int]] = [[] for _ in range(L)]
    for u in units:
        for layer, c in u.accesses:
            layer_units[layer].append((u.uid, c))
        if not u.persistent:
            allocs[u.alive_from].append(u.uid)
            frees[u.alive_to].append(u.uid)
    short_by_layer: list[list[ObjectProfile]] = [[] for _ in range(L)]
    short_counts = np.zeros(L, dtype=np.int64)
    for p in profiles:
        if p.is_short:
            short_by_layer[p.alive_from].append(p)
            short_counts[p.alive_from] += p.total_accesses
    short_pages = short_lived_layer_pages(profiles, L)
    base = np.asarray(report.base_compute_ns, dtype=float)
    return Workload(report, units, base, layer_units, allocs, frees, short_by_layer, short_pages, short_counts)
