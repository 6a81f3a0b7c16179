import numpy as np
import pytest

from hmtier.allocator import Tier
from hmtier.policy.ial import IALConfig, IALState, apply_moves, first_touch, ial_period
from hmtier.policy.sentinel import (BoundStatus, Case, ConstraintInputs, DecisionLog, IntervalEndState,
                                    MigrationIntervalConfig, Strategy, candidate_subset, check_lower_bound,
                                    classify_case, compute_data, constraint_inputs, interval_bounds,
                                    plan_interval, prune_mi_candidates, rebucket_on_new_dataflow, resolve_trials,
                                    select_optimal_mi)
from hmtier.simengine.engine import SentinelStepper
from hmtier.simengine.machine import reference_hw
from hmtier.simengine.workload import compile_workload
from hmtier.trace import PAGE_SIZE, SynthParams, generate_synthetic, with_buckets

import oracles
from helpers import one_step, persistent, tensor

# ---------------------------------------------------------------------------
# intervals


def test_intervals_partition_layers_last_shorter():
    assert interval_bounds(10, 4) == [(0, 3), (4, 7), (8, 9)]
    cfg = MigrationIntervalConfig(3, 7)
    assert cfg.count == 3 and cfg.intervals[-1] == (6, 6)


@pytest.mark.parametrize("mi", [0, 8])
def test_interval_out_of_range(mi):
    with pytest.raises(ValueError):
        MigrationIntervalConfig(mi, 7)


# ---------------------------------------------------------------------------
# Data(MI)


def _wl(L, tensors):
    return compile_workload(one_step(L, tensors), 0)


def test_compute_data_zero_when_needed_units_are_fast():
    wl = _wl(4, [persistent(0, 8192, {2: 3}, 4)])
    assert compute_data(wl, 2, 0, {0: Tier.FAST}) == 0


def test_compute_data_one_slow_tensor():
    wl = _wl(4, [persistent(0, 8192, {2: 3}, 4)])
    assert compute_data(wl, 2, 0, {0: Tier.SLOW}) == 8192


def test_compute_data_ignores_units_born_in_next_interval():
    wl = _wl(4, [tensor(0, 8192, 2, 3, {2: 1, 3: 1})])
    assert compute_data(wl, 2, 0, {0: Tier.SLOW}) == 0


# frozen from oracles.slow_data_from_records on the default trace (seed 0)
DATA_MI8_INTERVAL3 = 2_916_352


def test_compute_data_calibrated_matches_record_scan(default_trace, default_wl):
    everything_slow = {u.uid: Tier.SLOW for u in default_wl.units}
    got = compute_data(default_wl, 8, 3, everything_slow)
    assert got == DATA_MI8_INTERVAL3
    assert got == oracles.slow_data_from_records(default_trace, 0, 8, 3)


# ---------------------------------------------------------------------------
# pruning


def test_prune_unbounded_bandwidth_leaves_only_space(default_wl):
    L = default_wl.num_layers
    long_bytes = sum(u.nbytes for u in default_wl.units)
    rs = check_lower_bound(default_wl, 0).reserved_bytes
    S = long_bytes + rs + PAGE_SIZE
    m = reference_hw(S).with_migration_bandwidth(1e30)
    ci = constraint_inputs(default_wl, m)
    pr = prune_mi_candidates(ci, L)
    expected = [mi for mi in range(1, L + 1) if max(ci.data[mi]) < S - ci.rs[mi]]
    assert pr.feasible == expected == list(range(1, L + 1))


def test_prune_zero_bandwidth_is_empty(default_wl):
    m = reference_hw(10 << 20).with_migration_bandwidth(1e-30)
    pr = prune_mi_candidates(constraint_inputs(default_wl, m), default_wl.num_layers)
    assert pr.feasible == [] and pr.empty_feasible
    assert pr.fallback_mi is not None and pr.mis == [pr.fallback_mi]


def test_prune_hand_inputs():
    ci = ConstraintInputs(100, 10.0, {1: 20, 2: 20, 3: 20}, {1: [10, 90], 2: [50], 3: [80]},
                          {1: [1e10, 1e10], 2: [1e10], 3: [1e10]})
    # free space 80: MI 1 fails on space (90), MI 3 fails (80 is not < 80); time is ample (10 s > 8 s)
    assert prune_mi_candidates(ci, 3).feasible == [2]


# frozen from oracles.feasible_mis on the default trace at 20% of peak
FEASIBLE_AT_20 = [4, 5, 6, 8, 10]


def test_prune_calibrated_matches_brute_force(default_trace, default_wl, machine20):
    pr = prune_mi_candidates(constraint_inputs(default_wl, machine20), default_wl.num_layers)
    assert pr.feasible == FEASIBLE_AT_20
    assert pr.feasible == oracles.feasible_mis(default_trace, default_wl, machine20.capacity,
                                               machine20.migration_bandwidth_bytes_per_s, machine20.fast_access_ns)


def test_candidate_subset_keeps_ends():
    assert candidate_subset([1, 2, 3], 7) == [1, 2, 3]
    picked = candidate_subset(list(range(1, 21)), 5)
    assert picked[0] == 1 and picked[-1] == 20 and len(picked) == 5


# ---------------------------------------------------------------------------
# MI selection


def test_select_single_candidate_one_measurement():
    calls = []
    best, _ = select_optimal_mi(lambda mi: calls.append(mi) or 1.0, [4])
    assert best == 4 and calls == [4]


def test_select_tie_goes_to_smaller():
    assert select_optimal_mi(lambda mi: 5.0, [9, 3, 6])[0] == 3


def test_select_empty_rejected():
    with pytest.raises(ValueError):
        select_optimal_mi(lambda mi: 1.0, [])


def test_select_calibrated_mid_range_is_interior(default_wl, machine20):
    def one_step_throughput(mi):
        s = SentinelStepper(default_wl, machine20, mi)
        return 1e9 / s.step(s.initial_state()).time_ns

    best, _ = select_optimal_mi(one_step_throughput, list(range(5, 12)))
    assert 5 < best < 11


# ---------------------------------------------------------------------------
# interval plans


def test_plan_evicts_after_last_use_in_interval():
    L = 16
    wl = _wl(L, [persistent(0, 4096, {1: 1, 3: 2}, L), persistent(1, 4096, {k: 1 for k in range(L)}, L)])
    plan = plan_interval(wl, {0: Tier.FAST, 1: Tier.FAST}, 8, 0)
    assert plan.evict_after == {0: 3}
    assert 1 not in plan.evict_candidates


def test_plan_hand_built_two_intervals():
    # layers 0-2 | 3-5
    L = 6
    wl = _wl(L, [
        persistent(0, 8192, {0: 1, 4: 1}, L),    # unit 0: used now and next
        persistent(1, 4096, {1: 2}, L),          # unit 1: idle after layer 1
        persistent(2, 4096, {5: 1}, L),          # unit 2: needed next only
        tensor(3, 5000, 1, 4, {1: 1, 3: 1}),     # unit 3: alive across the boundary, used next
        tensor(4, 4096, 4, 5, {4: 1, 5: 1}),     # unit 4: born in the next interval
        tensor(5, 64, 2, 2, {2: 1}),             # short-lived, never planned
    ])
    assert [u.tensor_ids for u in wl.units] == [(0,), (1,), (2,), (3,), (4,)]
    placement = {0: Tier.FAST, 1: Tier.FAST, 2: Tier.SLOW, 3: Tier.SLOW}
    plan = plan_interval(wl, placement, 3, 0)
    assert plan.prefetch_set == (3, 2)      # ordered by first use: layer 3 before layer 5
    assert plan.evict_after == {1: 1}
    assert plan.data_bytes == 8192 + 4096
    assert not set(plan.prefetch_set) & set(plan.evict_candidates)


def test_classify_cases():
    assert classify_case(IntervalEndState(True, False)) is Case.CASE1
    assert classify_case(IntervalEndState(False, True)) is Case.CASE2
    assert classify_case(IntervalEndState(False, False)) is Case.CASE3


def test_resolve_trials_prefers_cheaper_site():
    r = resolve_trials([2, 5], {2: 10.0, 5: 50.0}, {2: 20.0, 5: 40.0}, 1.0, 1.0)
    assert r.strategies == {2: Strategy.CONTINUE_MIGRATION, 5: Strategy.LEAVE_IN_SLOW}


# ---------------------------------------------------------------------------
# lower bound, buckets, log


def test_lower_bound():
    L = 2
    wl = _wl(L, [tensor(0, 64, 0, 0, {0: 1}), tensor(1, 64, 1, 1, {1: 1}), tensor(2, 6000, 0, 1, {0: 1, 1: 1})])
    lb = check_lower_bound(wl, 4096 + 6000)
    assert lb.status is BoundStatus.OK and lb.bound_bytes == 10096
    assert check_lower_bound(wl, 10095).status is BoundStatus.BELOW_BOUND


def test_rebucket_triggers_once_per_new_bucket():
    a = generate_synthetic(SynthParams(num_layers=6, num_tensors=40), 0, 1)
    b = generate_synthetic(SynthParams(num_layers=6, num_tensors=50), 1, 1)
    trace = with_buckets([a, b], [0, 0, 1, 0, 1])
    assert rebucket_on_new_dataflow(trace) == [0, 2]
    assert rebucket_on_new_dataflow(trace, known_buckets=[0]) == [2]


def test_decision_log_counts_setup_phases():
    log = DecisionLog()
    for phase in ("profile", "select", "select", "trial", "trial", "steady", "steady"):
        log.add(phase=phase)
    assert log.setup_steps() == 5
    assert log.to_csv().splitlines()[0].split(",") == list(DecisionLog.COLUMNS)


# ---------------------------------------------------------------------------
# IAL


def _state(tiers, order=None):
    tiers = np.array(tiers, dtype=np.int8)
    st = IALState(tiers)
    for p in (order if order is not None else range(len(tiers))):
        st.inactive[p] = None
    return st


def test_ial_hot_page_reaches_fast_and_stays():
    cfg = IALConfig()
    st = first_touch(np.array([1, 0, 2]), 3, 1)  # page 1 touched first
    assert st.tier.tolist() == [Tier.SLOW, Tier.FAST, Tier.SLOW]
    hot = np.array([50.0, 0.0, 0.0])
    for _ in range(5):
        moves = ial_period(st, hot, 1, cfg)
        apply_moves(st, moves)
        assert st.tier[0] == Tier.FAST
    assert st.fast_pages == 1


def test_ial_one_page_capacity_ping_pongs():
    cfg = IALConfig()
    st = first_touch(np.array([0, 1]), 2, 1)
    counts = [np.array([9.0, 0.0]), np.array([0.0, 9.0])]
    moved = []
    for k in range(6):
        moves = ial_period(st, counts[k % 2], 1, cfg)
        apply_moves(st, moves)
        moved.append(moves.pages)
        assert st.tier[k % 2] == Tier.FAST
        assert st.fast_pages == 1
    assert moved == [0, 2, 2, 2, 2, 2]


def test_ial_cold_pages_not_promoted():
    st = _state([Tier.SLOW, Tier.SLOW])
    moves = ial_period(st, np.array([1.0, 0.0]), 2, IALConfig())
    assert moves.pages == 0 and not st.active


def test_ial_page_in_one_list_only():
    st = _state([Tier.FAST, Tier.SLOW, Tier.SLOW, Tier.SLOW])
    for counts in ([5, 5, 0, 0], [0, 5, 5, 5], [5, 0, 0, 5]):
        apply_moves(st, ial_period(st, np.array(counts, dtype=float), 2, IALConfig()))
        assert not set(st.active) & set(st.inactive)
        assert st.fast_pages <= 2


def test_ial_bandwidth_capped_by_channel():
    cfg = IALConfig(copy_parallelism=4, per_thread_bandwidth_bytes_per_s=6e9)
    assert cfg.effective_bandwidth(19e9) == 19e9
    assert cfg.effective_bandwidth(100e9) == 24e9


@pytest.mark.parametrize("kw", [{"period_s": 0}, {"promote_threshold": 0}, {"copy_parallelism": 0}])
def test_ial_config_validation(kw):
    with pytest.raises(ValueError):
        IALConfig(**kw)
