"""Interval planner: constraint pruning, MI selection, interval plans, case handling.

A step's layers are cut into equal migration intervals (the last may be
shorter). At the start of each interval the long-lived data needed by the
next one is prefetched from SLOW while the current interval computes; FAST
residents with no remaining use are evicted when their space is wanted.
"""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from ..allocator import Tier
from ..trace import PAGE_SIZE, Trace


class Case(enum.IntEnum):
    CASE1 = 1  # prefetch finished
    CASE2 = 2  # fast memory lacked space
    CASE3 = 3  # ran out of time with space available


class Strategy(enum.Enum):
    CONTINUE_MIGRATION = "continue"
    LEAVE_IN_SLOW = "leave"


class BoundStatus(enum.Enum):
    OK = "OK"
    BELOW_BOUND = "BELOW_BOUND"


@dataclass(frozen=True)
class MigrationIntervalConfig:
    mi: int
    num_layers: int

    def __post_init__(self):
        if not (1 <= self.mi <= self.num_layers):
            raise ValueError(f"MI {self.mi} outside [1, {self.num_layers}]")

    @property
    def intervals(self) -> list[tuple[int, int]]:
        return interval_bounds(self.num_layers, self.mi)

    @property
    def count(self) -> int:
        return -(-self.num_layers // self.mi)


def interval_bounds(num_layers: int, mi: int) -> list[tuple[int, int]]:
    """Inclusive (first, last) layer of every interval."""
    return [(a, min(a + mi, num_layers) - 1) for a in range(0, num_layers, mi)]


# ---------------------------------------------------------------------------
# Data(MI) and T(MI)


def resident_at_start(unit, first_layer: int, wraps: bool) -> bool:
    """Whether ``unit`` already exists when the interval starting at ``first_layer`` begins."""
    if unit.persistent:
        return True
    if wraps:
        return False
    return unit.alive_from < first_layer <= unit.alive_to


def accessed_within(unit, first: int, last: int) -> bool:
    return any(first <= layer <= last for layer in unit.access_layers)


def planning_placement(workload, mi: int, interval_index: int, budget_bytes: int | None = None) -> dict[int, Tier]:
    """Steady-state placement assumed when planning for interval ``interval_index + 1``.

    Units accessed in the current interval are FAST as long as they fit in
    ``budget_bytes`` (those also needed next interval win, then earlier first
    use); every other unit that exists at the next interval's start is SLOW.
    """
    bounds = interval_bounds(workload.num_layers, mi)
    cur = bounds[interval_index]
    nxt_index = (interval_index + 1) % len(bounds)
    nxt = bounds[nxt_index]
    wraps = nxt_index == 0
    placement = {}
    hot = []
    for u in workload.units:
        if not resident_at_start(u, nxt[0], wraps):
            continue
        placement[u.uid] = Tier.SLOW
        if accessed_within(u, *cur):
            first = min(layer for layer in u.access_layers if cur[0] <= layer <= cur[1])
            hot.append((not accessed_within(u, *nxt), first, u.uid, u.nbytes))
    left = float("inf") if budget_bytes is None else budget_bytes
    for _, _, uid, nbytes in sorted(hot):
        if nbytes <= left:
            placement[uid] = Tier.FAST
            left -= nbytes
    return placement


def compute_data(workload, mi: int, interval_index: int, placement: Mapping[int, Tier]) -> int:
    """Bytes (whole pages) of long-lived units accessed in the next interval that sit in SLOW.

    Units allocated during the next interval are not counted: they do not exist yet.
    """
    bounds = interval_bounds(workload.num_layers, mi)
    nxt_index = (interval_index + 1) % len(bounds)
    nxt = bounds[nxt_index]
    total = 0
    for u in workload.units:
        if placement.get(u.uid) is Tier.SLOW and accessed_within(u, *nxt) \
                and resident_at_start(u, nxt[0], nxt_index == 0):
            total += u.nbytes
    return total


def interval_times_ns(workload, mi: int, access_ns: float) -> list[float]:
    """Interval execution time with every access served at ``access_ns``."""
    per_layer = workload.base_ns + access_ns * workload.layer_access_counts()
    return [float(per_layer[a:b + 1].sum()) for a, b in interval_bounds(workload.num_layers, mi)]


@dataclass(frozen=True)
class ConstraintInputs:
    capacity_bytes: int
    bandwidth_bytes_per_s: float
    rs: Mapping[int, int]  # MI -> reserved bytes
    data: Mapping[int, Sequence[int]]  # MI -> per-interval Data
    times_ns: Mapping[int, Sequence[float]]  # MI -> per-interval T


def constraint_inputs(workload, machine, capacity_bytes: int | None = None,
                      mis: Iterable[int] | None = None) -> ConstraintInputs:
    from ..allocator import reserve_short_lived

    L = workload.num_layers
    S = machine.capacity if capacity_bytes is None else capacity_bytes
    mis = list(range(1, L + 1)) if mis is None else list(mis)
    rs, data, times = {}, {}, {}
    for mi in mis:
        rs[mi] = reserve_short_lived(workload.report.object_profiles, mi, L, workload.short_pages)
        n = len(interval_bounds(L, mi))
        budget = max(0, S - rs[mi])
        data[mi] = [compute_data(workload, mi, k, planning_placement(workload, mi, k, budget))
                    for k in range(n)]
        times[mi] = interval_times_ns(workload, mi, machine.fast_access_ns)
    return ConstraintInputs(S, machine.migration_bandwidth_bytes_per_s, rs, data, times)


@dataclass(frozen=True)
class PruneResult:
    feasible: list[int]
    empty_feasible: bool
    fallback_mi: int | None
    violation_bytes: dict[int, float]

    @property
    def mis(self) -> list[int]:
        """Feasible MIs, or the single fallback when none is feasible."""
        if self.feasible:
            return list(self.feasible)
        return [self.fallback_mi] if self.fallback_mi is not None else []


def mi_feasible(inputs: ConstraintInputs, mi: int) -> tuple[bool, bool]:
    """(space constraint holds, time constraint holds) at the worst interval."""
    free = inputs.capacity_bytes - inputs.rs[mi]
    space_ok = max(inputs.data[mi]) < free
    bw = inputs.bandwidth_bytes_per_s
    if bw <= 0:
        time_ok = False
    else:
        time_ok = min(inputs.times_ns[mi]) / 1e9 > free / bw
    return space_ok, time_ok


def prune_mi_candidates(inputs: ConstraintInputs, num_layers: int) -> PruneResult:
    feasible = []
    violation = {}
    for mi in range(1, num_layers + 1):
        if mi not in inputs.rs:
            continue
        space_ok, time_ok = mi_feasible(inputs, mi)
        if space_ok and time_ok:
            feasible.append(mi)
        free = inputs.capacity_bytes - inputs.rs[mi]
        space_v = 0.0 if space_ok else float(max(inputs.data[mi]) - free + 1)
        moved = min(inputs.times_ns[mi]) / 1e9 * max(inputs.bandwidth_bytes_per_s, 0.0)
        time_v = 0.0 if time_ok else max(0.0, float(free - moved))
        violation[mi] = max(space_v, time_v)
    fallback = None
    if not feasible and violation:
        fallback = min(violation, key=lambda m: (violation[m], m))
    return PruneResult(feasible, not feasible, fallback, violation)


def candidate_subset(feasible: Sequence[int], cap: int = 7) -> list[int]:
    """At most ``cap`` candidates, evenly spaced over the feasible list (ends included)."""
    feasible = list(feasible)
    if len(feasible) <= cap:
        return feasible
    picks = np.linspace(0, len(feasible) - 1, cap).round().astype(int)
    return [feasible[i] for i in sorted(set(picks.tolist()))]


def select_optimal_mi(measure: Callable[[int], float], candidates: Sequence[int]) -> tuple[int, dict[int, float]]:
    """Run ``measure`` (one training step, returns throughput) per candidate; ties go to the smaller MI."""
    if not candidates:
        raise ValueError("no MI candidates")
    scores = {mi: measure(mi) for mi in candidates}
    best = max(sorted(scores), key=lambda m: scores[m])
    return best, scores


# ---------------------------------------------------------------------------
# interval plans


@dataclass(frozen=True)
class IntervalPlan:
    interval_index: int
    prefetch_set: tuple[int, ...]  # unit ids in issue order
    evict_after: dict[int, int]  # unit id -> layer after which it may be evicted
    data_bytes: int

    @property
    def evict_candidates(self) -> tuple[int, ...]:
        return tuple(sorted(self.evict_after))


def next_use(unit, layer: int, num_layers: int) -> int:
    """Layers until the unit's next access at or after ``layer`` (wrapping for persistent units)."""
    for a in unit.access_layers:
        if a >= layer:
            return a - layer
    if unit.persistent and unit.access_layers:
        return unit.access_layers[0] + num_layers - layer
    return 1 << 30


def plan_interval(workload, placement: Mapping[int, Tier], mi: int, interval_index: int) -> IntervalPlan:
    bounds = interval_bounds(workload.num_layers, mi)
    first, last = bounds[interval_index]
    nxt_index = (interval_index + 1) % len(bounds)
    nfirst, nlast = bounds[nxt_index]
    wraps = nxt_index == 0
    prefetch = []
    evict = {}
    for u in workload.units:
        tier = placement.get(u.uid)
        if tier is None:
            continue
        needed_next = accessed_within(u, nfirst, nlast)
        if tier is Tier.SLOW and needed_next and resident_at_start(u, nfirst, wraps):
            first_use = min(a for a in u.access_layers if nfirst <= a <= nlast)
            prefetch.append((first_use, u.uid))
        elif tier is Tier.FAST and not needed_next:
            uses = [a for a in u.access_layers if first <= a <= last]
            evict[u.uid] = max(uses) if uses else first - 1
    prefetch.sort()
    data = sum(workload.units[uid].nbytes for _, uid in prefetch)
    return IntervalPlan(interval_index, tuple(uid for _, uid in prefetch), evict, data)


@dataclass(frozen=True)
class IntervalEndState:
    prefetch_finished: bool
    space_blocked: bool


def classify_case(state: IntervalEndState) -> Case:
    if state.prefetch_finished:
        return Case.CASE1
    if state.space_blocked:
        return Case.CASE2
    return Case.CASE3


# ---------------------------------------------------------------------------
# test-and-trial


@dataclass(frozen=True)
class Case3Resolution:
    strategies: dict[int, Strategy]  # site (interval index) -> chosen strategy
    continue_throughput: float
    leave_throughput: float
    site_costs: dict[int, tuple[float, float]]  # site -> (continue ns, leave ns)


def resolve_trials(sites: Iterable[int], continue_costs: Mapping[int, float], leave_costs: Mapping[int, float],
                   continue_throughput: float, leave_throughput: float) -> Case3Resolution:
    """Pick per site the strategy whose trial spent less time around that site."""
    strategies, costs = {}, {}
    for s in sorted(set(sites)):
        c = continue_costs.get(s, float("inf"))
        lv = leave_costs.get(s, float("inf"))
        strategies[s] = Strategy.CONTINUE_MIGRATION if c < lv else Strategy.LEAVE_IN_SLOW
        costs[s] = (c, lv)
    return Case3Resolution(strategies, continue_throughput, leave_throughput, costs)


# ---------------------------------------------------------------------------
# lower bound and buckets


@dataclass(frozen=True)
class LowerBound:
    status: BoundStatus
    reserved_bytes: int
    largest_long_lived_bytes: int

    @property
    def bound_bytes(self) -> int:
        return self.reserved_bytes + self.largest_long_lived_bytes


def check_lower_bound(workload, capacity_bytes: int) -> LowerBound:
    """BELOW_BOUND when fast memory cannot hold the peak reservation plus the largest long-lived object."""
    rs = int(workload.short_pages.max()) * PAGE_SIZE if len(workload.short_pages) else 0
    largest = workload.largest_long_lived
    status = BoundStatus.BELOW_BOUND if capacity_bytes < rs + largest else BoundStatus.OK
    return LowerBound(status, rs, largest)


def rebucket_on_new_dataflow(trace: Trace, known_buckets: Iterable[int] = ()) -> list[int]:
    """Steps that must run the profiling pipeline: the first step of every unseen bucket."""
    seen = set(known_buckets)
    out = []
    for s, step in enumerate(trace.steps):
        if step.bucket_id not in seen:
            seen.add(step.bucket_id)
            out.append(s)
    return out


# ---------------------------------------------------------------------------
# decision log


@dataclass
class DecisionLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append(row)

    def setup_steps(self) -> int:
        return sum(1 for r in self.rows if r.get("phase") in ("profile", "select", "trial"))

    COLUMNS = ("step", "bucket", "phase", "mi", "interval", "case", "prefetched_bytes", "evicted_bytes",
               "stalled_ns", "note")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r.get(c, "") for c in self.COLUMNS])
        return buf.getvalue()
