"""Page-granular step timing for the improved-active-list baseline.

Objects live at the byte addresses a first-fit allocator hands out, so pages
are shared by unrelated objects. An object's accesses are charged in
proportion to how many of its pages sit in each tier.
"""
from __future__ import annotations

import numpy as np

from ..allocator import Tier, naive_allocate
from ..policy.ial import IALConfig, IALState, PeriodMoves, first_touch, ial_period
from ..trace import PAGE_SIZE
from .machine import MachineConfig
from .workload import Workload


class IALSimulator:
    """Static per-step quantities of one bucket under naive allocation."""

    def __init__(self, wl: Workload, machine: MachineConfig, cfg: IALConfig = IALConfig()):
        self.wl = wl
        self.m = machine
        self.cfg = cfg
        profiles = sorted(wl.report.object_profiles, key=lambda p: p.tensor_id)
        _, addrs = naive_allocate(profiles)
        start = np.array([addrs[p.tensor_id] for p in profiles], dtype=np.int64)
        size = np.array([p.size_bytes for p in profiles], dtype=np.int64)
        self.lo = start // PAGE_SIZE
        self.hi = (start + size - 1) // PAGE_SIZE + 1
        self.num_pages = int(self.hi.max()) if len(profiles) else 0
        self.counts = np.array([p.total_accesses for p in profiles], dtype=float)
        born = np.array([p.alive_from for p in profiles], dtype=np.int64)

        # accesses spread evenly over an object's pages
        density = self.counts / np.maximum(1, self.hi - self.lo)
        diff = np.zeros(self.num_pages + 1)
        np.add.at(diff, self.lo, density)
        np.add.at(diff, self.hi, -density)
        self.page_counts = np.cumsum(diff[:-1])

        touch = np.full(self.num_pages, np.iinfo(np.int64).max, dtype=np.int64)
        for k in np.argsort(born, kind="stable").tolist():
            seg = touch[self.lo[k]:self.hi[k]]
            np.minimum(seg, born[k], out=seg)
        pages = np.arange(self.num_pages)
        self.touch_order = pages[np.lexsort((pages, touch))]
        self.base_ns = float(wl.base_ns.sum())

    def initial_state(self) -> IALState:
        return first_touch(self.touch_order, self.num_pages, self.m.capacity // PAGE_SIZE)

    def step_ns(self, st: IALState) -> float:
        fast = np.concatenate(([0], np.cumsum(st.tier == Tier.FAST)))
        frac = (fast[self.hi] - fast[self.lo]) / (self.hi - self.lo)
        per = frac * self.m.fast_access_ns + (1.0 - frac) * self.m.slow_access_ns
        return self.base_ns + float(np.dot(self.counts, per))

    def period(self, st: IALState, steps_in_period: int) -> PeriodMoves:
        return ial_period(st, self.page_counts * steps_in_period, self.m.capacity // PAGE_SIZE, self.cfg)

    def transfer_ns(self, moves: PeriodMoves) -> float:
        bw = self.cfg.effective_bandwidth(self.m.migration_bandwidth_bytes_per_s)
        return moves.pages * PAGE_SIZE / bw * 1e9
