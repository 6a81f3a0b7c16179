"""Layer-serial step simulation with an asynchronous migration channel.

Layer time is base compute plus, for every (object, layer) access count, the
count times the cost of one access in the object's tier. The migration channel
moves one unit at a time at the migration bandwidth, concurrently with
compute. Each interval's prefetch batch waits a fixed start latency before
its first byte moves. Evictions go before prefetches; a prefetch reserves its FAST space
when it starts and its tier flips at the next layer boundary after it lands.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..allocator import Tier
from ..policy.sentinel import (Case, IntervalEndState, Strategy, accessed_within, classify_case,
                               interval_bounds, next_use, resident_at_start)
from ..trace import PAGE_SIZE
from .machine import MachineConfig
from .workload import Workload


class EngineError(RuntimeError):
    """Internal invariant broken (capacity overrun, inconsistent trial snapshots)."""


EVICT, PREFETCH = 0, 1


@dataclass
class Transfer:
    uid: int
    kind: int
    remaining: float  # bytes left
    admitted: bool = False

    def key(self) -> tuple:
        return (self.uid, self.kind, round(self.remaining, 3), self.admitted)


@dataclass
class SentinelState:
    """Placement and channel state carried across layer and step boundaries."""

    tier: dict[int, Tier] = field(default_factory=dict)
    queue: list[Transfer] = field(default_factory=list)
    pending_fast: set[int] = field(default_factory=set)
    used: int = 0  # FAST bytes held by long-lived units, including admitted prefetches
    open_set: tuple[int, ...] | None = None  # prefetch set for the upcoming interval
    space_blocked: bool = False
    hold_ns: float = 0.0  # prefetch start latency still to elapse

    def key(self) -> tuple:
        return (tuple(sorted((u, int(t)) for u, t in self.tier.items())),
                tuple(t.key() for t in self.queue), tuple(sorted(self.pending_fast)), self.used,
                self.open_set, self.space_blocked, round(self.hold_ns, 3))

    def snapshot(self) -> "SentinelState":
        return copy.deepcopy(self)

    def placement(self) -> dict[int, Tier]:
        return dict(self.tier)


@dataclass
class StepStats:
    time_ns: float = 0.0
    layer_ns: list[float] = field(default_factory=list)
    interval_ns: list[float] = field(default_factory=list)  # stall at its start included
    cases: list[tuple[int, Case]] = field(default_factory=list)  # (site, case) in resolution order
    stalls: dict[int, float] = field(default_factory=dict)  # site -> stall ns
    migrations: int = 0  # pages moved (both directions)
    bytes_migrated: int = 0
    prefetched_bytes: int = 0
    evicted_bytes: int = 0
    stall_ns: float = 0.0
    peak_fast: int = 0
    occupancy: list[tuple[float, int]] = field(default_factory=list)
    short_migrations: int = 0
    interval_prefetched: list[int] = field(default_factory=list)  # bytes landed while each interval ran
    interval_evicted: list[int] = field(default_factory=list)

    def case_counts(self) -> dict[Case, int]:
        out = {c: 0 for c in Case}
        for _, c in self.cases:
            out[c] += 1
        return out


def uniform_step_ns(wl: Workload, access_ns: float) -> float:
    return wl.all_tier_time(access_ns)


def profiling_step_ns(wl: Workload, machine: MachineConfig) -> float:
    """Profiled step: everything in SLOW (one object per page), times the profiling slowdown."""
    return machine.profiling_slowdown * wl.all_tier_time(machine.slow_access_ns)


class SentinelStepper:
    """Simulates steps of one bucket under the interval planner."""

    def __init__(self, wl: Workload, machine: MachineConfig, mi: int):
        self.wl = wl
        self.m = machine
        self.mi = mi
        L = wl.num_layers
        self.bounds = interval_bounds(L, mi)
        self.n = len(self.bounds)
        self.S = machine.capacity
        self.bw = machine.migration_bandwidth_bytes_per_s / 1e9  # bytes per ns
        self.fast_ns = machine.fast_access_ns
        self.slow_ns = machine.slow_access_ns
        pages = wl.short_pages
        self.rs_interval = [min(int(pages[a:b + 1].max()) * PAGE_SIZE, self.S) for a, b in self.bounds]
        # region held at layer l: the largest short-lived need over the rest of its interval
        self.region = np.zeros(L, dtype=np.int64)
        for a, b in self.bounds:
            for layer in range(a, b + 1):
                self.region[layer] = min(int(pages[layer:b + 1].max()) * PAGE_SIZE, self.S)
        self.interval_of = np.zeros(L, dtype=np.int64)
        for k, (a, b) in enumerate(self.bounds):
            self.interval_of[a:b + 1] = k
        alloc_bytes = np.zeros(L + 1, dtype=np.int64)
        for layer in range(L):
            alloc_bytes[layer + 1] = alloc_bytes[layer] + sum(wl.units[u].nbytes for u in wl.allocs[layer])
        self.alloc_prefix = alloc_bytes
        self.needed_in = [set(u.uid for u in wl.units if accessed_within(u, a, b)) for a, b in self.bounds]

    # -- channel -----------------------------------------------------------

    def _pick(self, st: SentinelState, cap: int, evict_only: bool = False) -> Transfer | None:
        for tr in st.queue:
            if tr.kind == EVICT:
                return tr
        if evict_only:
            return None
        for tr in st.queue:
            if tr.kind == PREFETCH and tr.admitted:
                return tr
        refused = False
        for tr in st.queue:
            if tr.kind == PREFETCH:
                nbytes = self.wl.units[tr.uid].nbytes
                if st.used + nbytes <= cap:
                    tr.admitted = True
                    st.used += nbytes
                    return tr
                refused = True
        if refused and st.open_set is not None:
            st.space_blocked = True
        return None

    def _complete(self, st: SentinelState, tr: Transfer, stats: StepStats) -> None:
        st.queue.remove(tr)
        u = self.wl.units[tr.uid]
        stats.migrations += u.npages
        stats.bytes_migrated += u.nbytes
        if tr.kind == EVICT:
            st.tier[tr.uid] = Tier.SLOW
            st.used -= u.nbytes
            stats.evicted_bytes += u.nbytes
            if stats.interval_evicted:
                stats.interval_evicted[-1] += u.nbytes
        else:
            st.pending_fast.add(tr.uid)
            stats.prefetched_bytes += u.nbytes
            if stats.interval_prefetched:
                stats.interval_prefetched[-1] += u.nbytes

    def _move(self, st: SentinelState, duration: float, cap: int, stats: StepStats, evict_only: bool) -> None:
        left = duration
        while left > 0:
            tr = self._pick(st, cap, evict_only)
            if tr is None:
                return
            need = tr.remaining / self.bw
            if need <= left:
                left -= need
                self._complete(st, tr, stats)
            else:
                tr.remaining -= left * self.bw
                return

    def _run_channel(self, st: SentinelState, duration: float, cap: int, stats: StepStats) -> None:
        held = min(st.hold_ns, duration)
        if held > 0:
            self._move(st, held, cap, stats, evict_only=True)
            st.hold_ns -= held
        self._move(st, duration - held, cap, stats, evict_only=False)

    def _drain_set(self, st: SentinelState, uids: set[int], cap: int, stats: StepStats) -> float:
        """Run the channel with compute stalled until ``uids`` have landed; returns the stall."""
        elapsed = st.hold_ns
        if st.hold_ns > 0:
            self._move(st, st.hold_ns, cap, stats, evict_only=True)
            st.hold_ns = 0.0
        while any(tr.kind == PREFETCH and tr.uid in uids for tr in st.queue):
            tr = self._pick(st, cap)
            if tr is None:
                break
            elapsed += tr.remaining / self.bw
            self._complete(st, tr, stats)
        return elapsed

    def _cancel(self, st: SentinelState, uids: set[int]) -> None:
        keep = []
        for tr in st.queue:
            if tr.kind == PREFETCH and tr.uid in uids:
                if tr.admitted:
                    st.used -= self.wl.units[tr.uid].nbytes
            else:
                keep.append(tr)
        st.queue = keep

    def _in_flight(self, st: SentinelState) -> set[int]:
        return {tr.uid for tr in st.queue}

    # -- step --------------------------------------------------------------

    def initial_state(self, fill: bool = True) -> SentinelState:
        """Post-reorganization placement: persistent units, first-used first, into FAST while room remains."""
        st = SentinelState()
        cap = self.S - max(self.rs_interval[0], self.rs_interval[1 % self.n])
        order = sorted(self.wl.persistent_uids, key=lambda u: (next_use(self.wl.units[u], 0, self.wl.num_layers), u))
        for uid in order:
            u = self.wl.units[uid]
            if fill and st.used + u.nbytes <= cap:
                st.tier[uid] = Tier.FAST
                st.used += u.nbytes
            else:
                st.tier[uid] = Tier.SLOW
        return st

    def step(self, st: SentinelState, strategies: dict[int, Strategy] | None = None) -> StepStats:
        strategies = strategies or {}
        wl = self.wl
        units = wl.units
        L = wl.num_layers
        stats = StepStats()
        t = 0.0
        for k, (a, b) in enumerate(self.bounds):
            nk = (k + 1) % self.n
            cap_boundary = self.S - max(int(self.region[a]), self.rs_interval[nk])
            interval_start = t
            stats.interval_prefetched.append(0)
            stats.interval_evicted.append(0)
            # resolve the prefetch that targeted this interval
            if st.open_set is not None:
                site = (k - 1) % self.n
                target = set(st.open_set)
                unfinished = {tr.uid for tr in st.queue if tr.kind == PREFETCH and tr.uid in target}
                case = classify_case(IntervalEndState(not unfinished, st.space_blocked))
                stall = 0.0
                if case is Case.CASE2:
                    self._cancel(st, unfinished)
                elif case is Case.CASE3:
                    if strategies.get(site, Strategy.LEAVE_IN_SLOW) is Strategy.CONTINUE_MIGRATION:
                        stall = self._drain_set(st, unfinished, cap_boundary, stats)
                        self._cancel(st, unfinished)
                    else:
                        self._cancel(st, unfinished)
                stats.cases.append((site, case))
                stats.stalls[site] = stall
                stats.stall_ns += stall
                t += stall
            # issue the prefetch for the next interval
            nfirst = self.bounds[nk][0]
            flying = self._in_flight(st)
            issue = []
            for uid in sorted(self.needed_in[nk]):
                u = units[uid]
                if st.tier.get(uid) is Tier.SLOW and uid not in flying and uid not in st.pending_fast \
                        and resident_at_start(u, nfirst, nk == 0):
                    first_use = min(x for x in u.access_layers if x >= nfirst and x <= self.bounds[nk][1])
                    issue.append((first_use, uid))
            issue.sort()
            for _, uid in issue:
                st.queue.append(Transfer(uid, PREFETCH, float(units[uid].nbytes)))
            st.open_set = tuple(uid for _, uid in issue)
            st.space_blocked = False
            st.hold_ns = self.m.migration_latency_ns if issue else 0.0

            for layer in range(a, b + 1):
                for uid in st.pending_fast:
                    st.tier[uid] = Tier.FAST
                st.pending_fast.clear()
                region = int(self.region[layer])
                cap = self.S - max(region, self.rs_interval[nk])
                # long-lived data not yet evicted squeezes the region; the overflow lands in SLOW
                region = max(0, min(region, self.S - st.used))
                # new long-lived allocations
                for uid in wl.allocs[layer]:
                    u = units[uid]
                    if st.used + u.nbytes <= cap:
                        st.tier[uid] = Tier.FAST
                        st.used += u.nbytes
                    else:
                        st.tier[uid] = Tier.SLOW
                        if uid in self.needed_in[nk] and nk != 0 and layer < nfirst:
                            st.queue.append(Transfer(uid, PREFETCH, float(u.nbytes)))
                            st.open_set = st.open_set + (uid,)
                self._pressure_evictions(st, layer, k, nk, cap)
                # layer compute
                dur = float(wl.base_ns[layer])
                for uid, c in wl.layer_units[layer]:
                    dur += c * (self.fast_ns if st.tier[uid] is Tier.FAST else self.slow_ns)
                dur += wl.short_cost(layer, region, self.fast_ns, self.slow_ns)
                occ = st.used + region
                if occ > self.S:
                    raise EngineError(f"FAST occupancy {occ} exceeds capacity {self.S} at layer {layer}")
                stats.occupancy.append((t, occ))
                stats.peak_fast = max(stats.peak_fast, occ)
                self._run_channel(st, dur, cap, stats)
                t += dur
                stats.layer_ns.append(dur)
                for uid in wl.frees[layer]:
                    self._free(st, uid)
            stats.interval_ns.append(t - interval_start)
        stats.time_ns = t
        return stats

    def _free(self, st: SentinelState, uid: int) -> None:
        nbytes = self.wl.units[uid].nbytes
        keep = []
        for tr in st.queue:
            if tr.uid == uid:
                if tr.kind == PREFETCH and tr.admitted:
                    st.used -= nbytes
            else:
                keep.append(tr)
        st.queue = keep
        if uid in st.pending_fast:
            st.pending_fast.discard(uid)
            st.used -= nbytes
        elif st.tier.get(uid) is Tier.FAST:
            st.used -= nbytes
        st.tier.pop(uid, None)
        if st.open_set is not None and uid in st.open_set:
            st.open_set = tuple(x for x in st.open_set if x != uid)

    def _pressure_evictions(self, st: SentinelState, layer: int, k: int, nk: int, cap: int) -> None:
        """Queue evictions of idle FAST units when pending prefetches and allocations lack room."""
        units = self.wl.units
        want = 0
        evicting = 0
        for tr in st.queue:
            if tr.kind == PREFETCH and not tr.admitted:
                want += units[tr.uid].nbytes
            elif tr.kind == EVICT:
                evicting += units[tr.uid].nbytes
        end_next = self.bounds[nk][1] if nk != 0 else self.wl.num_layers - 1
        want += int(self.alloc_prefix[end_next + 1] - self.alloc_prefix[layer + 1])
        shortfall = want - (cap - st.used) - evicting
        if shortfall <= 0:
            return
        b = self.bounds[k][1]
        flying = self._in_flight(st)
        cands = []
        for uid, tier in st.tier.items():
            if tier is not Tier.FAST or uid in flying or uid in st.pending_fast:
                continue
            u = units[uid]
            if accessed_within(u, layer, b) or uid in self.needed_in[nk]:
                continue
            cands.append((-next_use(u, layer, self.wl.num_layers), uid))
        cands.sort()
        for _, uid in cands:
            if shortfall <= 0:
                break
            st.queue.append(Transfer(uid, EVICT, float(units[uid].nbytes)))
            shortfall -= units[uid].nbytes
