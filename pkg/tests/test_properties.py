import math

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from hmtier.allocator import MemoryPool, ReservationOverflow, group_objects, pack_groups, reorganize
from hmtier.policy.ial import IALConfig, apply_moves, first_touch, ial_period
from hmtier.policy.sentinel import candidate_subset, interval_bounds
from hmtier.profiler import ObjectProfile, false_sharing_report, profile_step
from hmtier.trace import PAGE_SIZE, SynthParams, generate_synthetic, load_trace, save_trace, validate

SETTINGS = settings(deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow,
                                                                             HealthCheck.function_scoped_fixture])


@st.composite
def small_params(draw):
    L = draw(st.integers(1, 12))
    return SynthParams(
        num_layers=L,
        num_tensors=draw(st.integers(1, 200)),
        frac_short_lived=draw(st.floats(0, 1)),
        frac_small_of_short=draw(st.floats(0, 1)),
        num_hot=draw(st.integers(0, 2)),
        activations_per_layer=draw(st.integers(0, 3)),
    )


@st.composite
def small_objects(draw, max_size=60):
    n = draw(st.integers(1, max_size))
    out = []
    for k in range(n):
        bits = draw(st.sampled_from([0b1, 0b11, 0b110, 0b1000]))
        count = draw(st.sampled_from([1, 7, 30, 250]))
        layers = [i for i in range(4) if bits >> i & 1]
        size = draw(st.integers(1, 4095))
        out.append(ObjectProfile(k, size, len(layers), bits, ((layers[0], count),), layers[0], layers[-1], 4))
    return out


@SETTINGS
@given(small_params(), st.integers(0, 2**31), st.integers(1, 3))
def test_generated_traces_validate_and_round_trip(tmp_path, params, seed, steps):
    trace = generate_synthetic(params, seed, steps)
    assert validate(trace) == []
    assert generate_synthetic(params, seed, steps) == trace
    path = tmp_path / "t.jsonl"
    save_trace(trace, path)
    assert load_trace(path) == trace


@SETTINGS
@given(small_objects())
def test_packing_invariants(objs):
    groups = group_objects(objs)
    amap = pack_groups(groups)
    assert amap.check({o.tensor_id: o.size_bytes for o in objs}) == []
    for page in amap.pages.values():
        keys = {(o.live_bits, o.access_bucket) for o in objs if o.tensor_id in {r[0] for r in page.residents}}
        assert len(keys) == 1
    bound = 2 * math.ceil(sum(o.size_bytes for o in objs) / PAGE_SIZE) + len(groups)
    assert amap.num_pages <= bound


@SETTINGS
@given(st.lists(st.tuples(st.integers(1, 9000), st.booleans()), min_size=1, max_size=80),
       st.integers(1, 30))
def test_pool_never_exceeds_reservation(ops, pages):
    pool = MemoryPool(pages * PAGE_SIZE)
    live = []
    for k, (size, free_first) in enumerate(ops):
        if free_first and live:
            pool.free(live.pop(0))
        o = ObjectProfile(k, size, 1, 1 << (k % 3), ((0, 1),), 0, 0, 3)
        try:
            pool.alloc(o)
            live.append(o)
        except ReservationOverflow:
            pass
        assert pool.region.in_use_bytes <= pool.region.capacity_bytes


@SETTINGS
@given(st.integers(1, 200), st.integers(1, 200))
def test_intervals_partition(L, mi):
    mi = min(mi, L)
    bounds = interval_bounds(L, mi)
    covered = [layer for a, b in bounds for layer in range(a, b + 1)]
    assert covered == list(range(L))
    assert all(b - a + 1 == mi for a, b in bounds[:-1])


@SETTINGS
@given(st.lists(st.integers(1, 120), min_size=1, max_size=60, unique=True).map(sorted), st.integers(1, 10))
def test_candidate_subset(feasible, cap):
    picked = candidate_subset(feasible, cap)
    assert len(picked) <= cap and set(picked) <= set(feasible)
    assert picked[0] == feasible[0] and picked[-1] == feasible[-1] or len(picked) == 1


@SETTINGS
@given(st.integers(1, 40), st.integers(0, 40), st.lists(st.lists(st.integers(0, 6), min_size=40, max_size=40),
                                                         min_size=1, max_size=8))
def test_ial_lists_and_capacity(npages, cap, rounds):
    st_ = first_touch(np.arange(npages), npages, cap)
    for counts in rounds:
        moves = ial_period(st_, np.array(counts[:npages], dtype=float), cap, IALConfig())
        apply_moves(st_, moves)
        assert not set(st_.active) & set(st_.inactive)
        assert st_.fast_pages <= max(cap, 0)
        assert len(set(moves.promoted)) == len(moves.promoted)


@SETTINGS
@given(small_params(), st.integers(0, 1000))
def test_packed_profile_never_flags(params, seed):
    report = profile_step(generate_synthetic(params, seed, 1), 0)
    assert false_sharing_report(report, reorganize(report.object_profiles)).flagged_pages == ()


@settings(deadline=None, derandomize=True, max_examples=25)
@given(st.floats(0.05, 0.95), st.integers(0, 10_000))
def test_short_lived_fraction_fidelity(frac, seed):
    params = SynthParams(num_layers=30, num_tensors=10_000, frac_short_lived=frac)
    report = profile_step(generate_synthetic(params, seed, 1), 0)
    realized = sum(p.is_short for p in report.object_profiles) / len(report.object_profiles)
    assert abs(realized - frac) < 0.02
