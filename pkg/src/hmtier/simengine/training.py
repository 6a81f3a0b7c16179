"""Multi-step training runs under each policy, plus MI sweeps and policy comparisons."""
from __future__ import annotations

import csv
import enum
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from ..allocator import Tier
from ..policy.ial import IALConfig, PeriodMoves, apply_moves
from ..policy.sentinel import (BoundStatus, Case, DecisionLog, LowerBound, Strategy, candidate_subset,
                               check_lower_bound, constraint_inputs, prune_mi_candidates, resolve_trials,
                               select_optimal_mi)
from ..trace import PAGE_SIZE, Trace
from .engine import SentinelStepper, StepStats, profiling_step_ns, uniform_step_ns
from .ialsim import IALSimulator
from .machine import MachineConfig
from .workload import Workload, compile_workload


class PolicyKind(str, enum.Enum):
    SENTINEL = "sentinel"
    IAL = "ial"
    FAST_ONLY = "fast-only"
    SLOW_ONLY = "slow-only"


@dataclass
class SimResult:
    policy: str
    capacity_bytes: int
    step_ns: list[float] = field(default_factory=list)
    step_cases: list[tuple[int, int, int]] = field(default_factory=list)
    mi: dict[int, int] = field(default_factory=dict)  # bucket -> chosen MI
    migrations: int = 0  # pages moved, both directions
    bytes_migrated: int = 0
    stall_ns: float = 0.0
    peak_fast_used: int = 0
    short_lived_migrations: int = 0
    occupancy: list[tuple[float, int]] = field(default_factory=list)
    setup_steps: int = 0
    decision_log: DecisionLog = field(default_factory=DecisionLog)
    lower_bound: LowerBound | None = None
    warnings: list[str] = field(default_factory=list)
    trial_placements: list[tuple[dict, dict]] = field(default_factory=list)
    samples_per_step: float = 1.0

    @property
    def num_steps(self) -> int:
        return len(self.step_ns)

    @property
    def sim_time_ns(self) -> float:
        return float(sum(self.step_ns))

    @property
    def throughput(self) -> float:
        """Steps per simulated second over the whole run."""
        t = self.sim_time_ns
        return self.num_steps / (t / 1e9) if t > 0 else 0.0

    @property
    def steady_throughput(self) -> float:
        """Steps per second over the second half of the run (setup excluded in practice)."""
        tail = self.step_ns[len(self.step_ns) // 2:]
        t = sum(tail)
        return len(tail) / (t / 1e9) if t > 0 else 0.0

    @property
    def samples_per_s(self) -> float:
        return self.steady_throughput * self.samples_per_step

    def case_totals(self) -> tuple[int, int, int]:
        return tuple(sum(c[i] for c in self.step_cases) for i in range(3))

    def steady_cases(self) -> tuple[int, int, int]:
        return self.step_cases[-1] if self.step_cases else (0, 0, 0)

    @property
    def mi_label(self) -> str:
        return ";".join(f"{b}:{m}" for b, m in sorted(self.mi.items())) if len(self.mi) > 1 else \
            "".join(str(m) for m in self.mi.values())

    COLUMNS = ("policy", "S_bytes", "MI", "steps", "sim_time_ns", "throughput", "steady_throughput",
               "case1", "case2", "case3", "migrations", "bytes_migrated", "stall_ns", "peak_fast_used",
               "setup_steps", "lower_bound")

    def row(self) -> list:
        c1, c2, c3 = self.case_totals()
        lb = self.lower_bound.status.value if self.lower_bound else ""
        return [self.policy, self.capacity_bytes, self.mi_label, self.num_steps, f"{self.sim_time_ns:.1f}",
                f"{self.throughput:.6f}", f"{self.steady_throughput:.6f}", c1, c2, c3, self.migrations,
                self.bytes_migrated, f"{self.stall_ns:.1f}", self.peak_fast_used, self.setup_steps, lb]

    def to_csv(self) -> str:
        return _csv([self.COLUMNS, self.row()])

    def occupancy_csv(self) -> str:
        return _csv([("time_ns", "fast_bytes")] + [(f"{t:.1f}", b) for t, b in self.occupancy])


def _csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def _case_tuple(stats: StepStats) -> tuple[int, int, int]:
    cc = stats.case_counts()
    return (cc[Case.CASE1], cc[Case.CASE2], cc[Case.CASE3])


# ---------------------------------------------------------------------------
# per-bucket runners


class _Uniform:
    def __init__(self, wl: Workload, machine: MachineConfig, tier: Tier):
        ns = machine.fast_access_ns if tier is Tier.FAST else machine.slow_access_ns
        self.ns = uniform_step_ns(wl, ns)
        self.peak = wl.report.peak_memory_bytes if tier is Tier.FAST else 0

    def run_step(self, step: int, t0: float, res: SimResult) -> float:
        res.step_cases.append((0, 0, 0))
        res.peak_fast_used = max(res.peak_fast_used, self.peak)
        res.occupancy.append((t0, self.peak))
        return self.ns


class _IAL:
    def __init__(self, wl: Workload, machine: MachineConfig, cfg: IALConfig):
        self.sim = IALSimulator(wl, machine, cfg)
        self.state = self.sim.initial_state()
        self.cached_ns: float | None = None
        self.steps_in_period = 0
        self.pending: tuple[float, PeriodMoves] | None = None

    def run_step(self, step: int, t0: float, res: SimResult) -> float:
        if self.pending is not None and t0 >= self.pending[0]:
            apply_moves(self.state, self.pending[1])
            self.pending = None
            self.cached_ns = None
        if self.cached_ns is None:
            self.cached_ns = self.sim.step_ns(self.state)
        self.steps_in_period += 1
        used = self.state.fast_pages * PAGE_SIZE
        res.step_cases.append((0, 0, 0))
        res.peak_fast_used = max(res.peak_fast_used, used)
        res.occupancy.append((t0, used))
        return self.cached_ns

    def end_period(self, now: float, res: SimResult) -> None:
        if self.pending is not None:  # a late batch lands before the next one is planned
            apply_moves(self.state, self.pending[1])
            self.pending = None
            self.cached_ns = None
        if self.steps_in_period == 0:
            return
        moves = self.sim.period(self.state, self.steps_in_period)
        self.steps_in_period = 0
        if moves.pages:
            res.migrations += moves.pages
            res.bytes_migrated += moves.pages * PAGE_SIZE
            self.pending = (now + self.sim.transfer_ns(moves), moves)


class _Sentinel:
    """Profile, select an MI, run test-and-trial once, then train at steady state."""

    def __init__(self, wl: Workload, machine: MachineConfig, bucket: int, forced_mi: int | None,
                 candidate_cap: int, res: SimResult):
        self.wl = wl
        self.m = machine
        self.bucket = bucket
        self.log = res.decision_log
        ci = constraint_inputs(wl, machine)
        self.prune = prune_mi_candidates(ci, wl.num_layers)
        if forced_mi is not None:
            self.candidates = [forced_mi]
        else:
            self.candidates = candidate_subset(self.prune.mis, candidate_cap)
            if self.prune.empty_feasible:
                res.warnings.append(f"EMPTY_FEASIBLE bucket={bucket} fallback_mi={self.prune.fallback_mi}")
        self.to_measure = list(self.candidates) if len(self.candidates) > 1 else []
        self.scores: dict[int, float] = {}
        self.profiled = False
        self.stepper: SentinelStepper | None = None
        self.state = None
        self.strategies: dict[int, Strategy] = {}
        self.trials_done = False
        self.trial_sites: set[int] = set()
        self.memo = None  # (state key, stats) of a step that left the state unchanged

    def _begin_steady(self, mi: int, res: SimResult) -> None:
        self.stepper = SentinelStepper(self.wl, self.m, mi)
        self.state = self.stepper.initial_state()
        res.mi[self.bucket] = mi

    def _account(self, stats: StepStats, t0: float, res: SimResult) -> None:
        res.migrations += stats.migrations
        res.bytes_migrated += stats.bytes_migrated
        res.stall_ns += stats.stall_ns
        res.peak_fast_used = max(res.peak_fast_used, stats.peak_fast)
        res.short_lived_migrations += stats.short_migrations
        res.step_cases.append(_case_tuple(stats))
        res.occupancy.extend((t0 + t, b) for t, b in stats.occupancy)

    def run_step(self, step: int, t0: float, res: SimResult) -> float:
        if not self.profiled:
            self.profiled = True
            ns = profiling_step_ns(self.wl, self.m)
            note = f"feasible={'/'.join(map(str, self.prune.feasible)) or 'none'}"
            self.log.add(step=step, bucket=self.bucket, phase="profile", note=note)
            res.step_cases.append((0, 0, 0))
            res.setup_steps += 1
            if not self.to_measure:
                self._begin_steady(self.candidates[0], res)
            return ns
        if self.to_measure:
            mi = self.to_measure.pop(0)
            stepper = SentinelStepper(self.wl, self.m, mi)
            stats = stepper.step(stepper.initial_state())
            self.scores[mi] = 1e9 / stats.time_ns
            self.log.add(step=step, bucket=self.bucket, phase="select", mi=mi, stalled_ns=stats.stall_ns,
                         note=f"throughput={self.scores[mi]:.6f}")
            self._account(stats, t0, res)
            res.setup_steps += 1
            if not self.to_measure:
                best, _ = select_optimal_mi(self.scores.__getitem__, self.candidates)
                self._begin_steady(best, res)
            return stats.time_ns
        if self.trial_sites and not self.trials_done:
            return self._trial(step, t0, res)
        stats = self._steady(step, res)
        self._account(stats, t0, res)
        if not self.trials_done and not self.trial_sites:
            self.trial_sites = {site for site, c in stats.cases if c is Case.CASE3}
        return stats.time_ns

    def _steady(self, step: int, res: SimResult) -> StepStats:
        key = self.state.key()
        if self.memo is not None and self.memo[0] == key:
            stats = self.memo[1]
        else:
            stats = self.stepper.step(self.state, self.strategies)
            self.memo = (key, stats) if self.state.key() == key else None
        for site, case in stats.cases:
            self.log.add(step=step, bucket=self.bucket, phase="steady", mi=self.stepper.mi, interval=site,
                         case=case.name, prefetched_bytes=stats.interval_prefetched[site],
                         evicted_bytes=stats.interval_evicted[site], stalled_ns=f"{stats.stalls.get(site, 0.0):.1f}")
        return stats

    def _trial(self, step: int, t0: float, res: SimResult) -> float:
        """Two trial steps from identical snapshots; returns their summed time."""
        base = self.state.snapshot()
        cont_state, leave_state = base.snapshot(), base.snapshot()
        res.trial_placements.append((cont_state.placement(), leave_state.placement()))
        sites = sorted(self.trial_sites)
        n = self.stepper.n
        cont = self.stepper.step(cont_state, {s: Strategy.CONTINUE_MIGRATION for s in sites})
        self._account(cont, t0, res)
        leave = self.stepper.step(leave_state, {s: Strategy.LEAVE_IN_SLOW for s in sites})
        self.trials_done = True
        res.setup_steps += 2
        resolution = resolve_trials(sites, {s: cont.interval_ns[(s + 1) % n] for s in sites},
                                    {s: leave.interval_ns[(s + 1) % n] for s in sites},
                                    1e9 / cont.time_ns, 1e9 / leave.time_ns)
        self.strategies = dict(resolution.strategies)
        chosen = ",".join(f"{s}:{v.name}" for s, v in sorted(self.strategies.items()))
        self.log.add(step=step, bucket=self.bucket, phase="trial", mi=self.stepper.mi, stalled_ns=cont.stall_ns,
                     note="continue")
        self.log.add(step=step + 1, bucket=self.bucket, phase="trial", mi=self.stepper.mi,
                     stalled_ns=leave.stall_ns, note=f"leave; chosen {chosen}")
        self.state = leave_state
        self._pending_second = (leave, t0 + cont.time_ns)
        return cont.time_ns


# ---------------------------------------------------------------------------
# driver


def bucket_workloads(trace: Trace) -> dict[int, Workload]:
    out: dict[int, Workload] = {}
    for s, step in enumerate(trace.steps):
        if step.bucket_id not in out:
            out[step.bucket_id] = compile_workload(trace, s)
    return out


def run_training(trace: Trace, policy: PolicyKind | str, machine: MachineConfig, num_steps: int, *,
                 forced_mi: int | None = None, candidate_cap: int = 7, ial: IALConfig = IALConfig(),
                 samples_per_step: float = 1.0, keep_occupancy: bool = True,
                 workloads: dict[int, Workload] | None = None) -> SimResult:
    """Simulate ``num_steps`` training steps, cycling through the trace's steps."""
    policy = PolicyKind(policy)
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    workloads = workloads or bucket_workloads(trace)
    res = SimResult(policy.value, machine.capacity, samples_per_step=samples_per_step)
    runners: dict = {}

    def runner(bucket: int):
        if bucket not in runners:
            wl = workloads[bucket]
            if policy is PolicyKind.SENTINEL:
                runners[bucket] = _Sentinel(wl, machine, bucket, forced_mi, candidate_cap, res)
                if res.lower_bound is None or bucket == 0:
                    res.lower_bound = check_lower_bound(wl, machine.capacity)
                    if res.lower_bound.status is BoundStatus.BELOW_BOUND:
                        res.warnings.append(f"BELOW_BOUND bound_bytes={res.lower_bound.bound_bytes}")
            elif policy is PolicyKind.IAL:
                runners[bucket] = _IAL(wl, machine, ial)
            else:
                runners[bucket] = _Uniform(wl, machine, Tier.FAST if policy is PolicyKind.FAST_ONLY else Tier.SLOW)
        return runners[bucket]

    period_ns = ial.period_s * 1e9
    next_period = period_ns
    t = 0.0
    step = 0
    while step < num_steps:
        bucket = trace.steps[step % len(trace.steps)].bucket_id
        r = runner(bucket)
        ns = r.run_step(step, t, res)
        res.step_ns.append(ns)
        t += ns
        step += 1
        second = getattr(r, "_pending_second", None)
        if second is not None:
            r._pending_second = None
            if step < num_steps:
                stats, t0 = second
                r._account(stats, t0, res)
                res.step_ns.append(stats.time_ns)
                t += stats.time_ns
                step += 1
        if policy is PolicyKind.IAL:
            while t >= next_period:
                for rr in runners.values():
                    rr.end_period(t, res)
                next_period += period_ns
    if not keep_occupancy:
        res.occupancy = []
    return res


# ---------------------------------------------------------------------------
# experiments


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("HMTIER_WORKERS", "1")))
    except ValueError:
        return 1


def _run_one(args) -> SimResult:
    trace, policy, machine, num_steps, kwargs = args
    return run_training(trace, policy, machine, num_steps, **kwargs)


def _map(jobs: list, workers: int) -> list[SimResult]:
    if workers <= 1 or len(jobs) <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_one, jobs))


@dataclass
class ComparisonRow:
    fraction: float | None
    result: SimResult
    normalized: float  # steady throughput over FAST_ONLY steady throughput


def compare_policies(trace: Trace, machine: MachineConfig, capacities: list[int], policies: list[str],
                     num_steps: int, *, fractions: list[float | None] | None = None,
                     workers: int | None = None, **kwargs) -> list[ComparisonRow]:
    """Every policy at every FAST capacity; normalized against FAST_ONLY on the same trace."""
    workers = worker_count() if workers is None else workers
    workloads = bucket_workloads(trace)
    fractions = fractions or [None] * len(capacities)
    kwargs = dict(kwargs, keep_occupancy=False, workloads=workloads)
    ref = run_training(trace, PolicyKind.FAST_ONLY, machine, num_steps, **kwargs)
    jobs = [(trace, p, machine.with_fast_capacity(c), num_steps, kwargs) for c in capacities for p in policies]
    results = _map(jobs, workers)
    out = []
    for (frac, res) in zip([f for f in fractions for _ in policies], results):
        out.append(ComparisonRow(frac, res, res.steady_throughput / ref.steady_throughput))
    return out


def comparison_csv(rows: list[ComparisonRow]) -> str:
    header = ("fraction_of_peak",) + SimResult.COLUMNS + ("normalized",)
    body = []
    for r in rows:
        frac = "" if r.fraction is None else f"{r.fraction:g}"
        body.append([frac] + r.result.row() + [f"{r.normalized:.6f}"])
    return _csv([header] + body)


@dataclass
class SweepRow:
    mi: int
    result: SimResult
    sweet_spot: bool = False


def sweep_mi(trace: Trace, machine: MachineConfig, num_steps: int, *, mis: list[int] | None = None,
             workers: int | None = None) -> tuple[list[SweepRow], list[str]]:
    """Train once per feasible MI (bucket 0) and mark the highest steady throughput."""
    workers = worker_count() if workers is None else workers
    workloads = bucket_workloads(trace)
    first = workloads[trace.steps[0].bucket_id]
    warnings = []
    if mis is None:
        pr = prune_mi_candidates(constraint_inputs(first, machine), first.num_layers)
        mis = pr.feasible
        if pr.empty_feasible:
            warnings.append("EMPTY_FEASIBLE")
    kwargs = dict(keep_occupancy=False, workloads=workloads)
    jobs = [(trace, PolicyKind.SENTINEL, machine, num_steps, dict(kwargs, forced_mi=mi)) for mi in mis]
    rows = [SweepRow(mi, r) for mi, r in zip(mis, _map(jobs, workers))]
    if rows:
        best = max(sorted(rows, key=lambda r: r.mi), key=lambda r: r.result.steady_throughput)
        best.sweet_spot = True
    return rows, warnings


def sweep_csv(rows: list[SweepRow], warnings: list[str]) -> str:
    header = ("MI", "steady_throughput", "case1", "case2", "case3", "migrations", "stall_ns", "sweet_spot")
    body = []
    for r in rows:
        c1, c2, c3 = r.result.steady_cases()
        body.append([r.mi, f"{r.result.steady_throughput:.6f}", c1, c2, c3, r.result.migrations,
                     f"{r.result.stall_ns:.1f}", "SP" if r.sweet_spot else ""])
    for w in warnings:
        body.append(["", "", "", "", "", "", "", w])
    return _csv([header] + body)
