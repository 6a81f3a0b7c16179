import dataclasses
import json

import pytest

from hmtier.profiler import profile_step, short_lived_fraction
from hmtier.trace import (ParamError, SynthParams, TensorSpec, Trace, TraceFormatError, TrainingStepSpec,
                          generate_synthetic, load_trace, save_trace, validate, with_buckets)

from helpers import one_step, tensor

SMALL = SynthParams(num_layers=16, num_tensors=400)


def test_default_trace_is_valid(default_trace):
    assert validate(default_trace) == []


def test_calibrated_short_lived_fraction_at_least_90_percent():
    trace = generate_synthetic(SynthParams(num_layers=64, num_tensors=12_000), 3, 1)
    assert short_lived_fraction(profile_step(trace, 0)) >= 0.90


def test_zero_short_lived_fraction_means_every_lifetime_spans_layers():
    trace = generate_synthetic(dataclasses.replace(SMALL, frac_short_lived=0.0), 1, 1)
    profiles = profile_step(trace, 0).object_profiles
    assert profiles and all(not p.is_short for p in profiles)


def test_generation_is_deterministic(tmp_path):
    a = generate_synthetic(SMALL, 7, 2)
    b = generate_synthetic(SMALL, 7, 2)
    assert a == b
    save_trace(a, tmp_path / "a.jsonl")
    save_trace(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_different_seeds_differ():
    assert generate_synthetic(SMALL, 1, 1) != generate_synthetic(SMALL, 2, 1)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_short_lived_fraction_concentrates(seed):
    params = SynthParams(num_layers=40, num_tensors=10_000, frac_short_lived=0.8)
    frac = short_lived_fraction(profile_step(generate_synthetic(params, seed, 1), 0))
    assert abs(frac - 0.8) < 0.02


def test_all_steps_identical_bucket_zero():
    trace = generate_synthetic(SMALL, 0, 3)
    assert trace.bucket_ids == (0,)
    assert validate(trace) == []


@pytest.mark.parametrize("field,value", [
    ("frac_short_lived", 1.5),
    ("frac_small_of_short", -0.1),
    ("num_layers", 0),
    ("num_tensors", 0),
    ("access_count_distribution", (0.5, 0.4, 0.0)),
    ("hot_fraction_bytes", 2.0),
    ("large_access_range", (5, 2)),
])
def test_invalid_params_name_the_field(field, value):
    with pytest.raises(ParamError) as exc:
        generate_synthetic(dataclasses.replace(SMALL, **{field: value}), 0, 1)
    assert exc.value.field == field
    assert field in str(exc.value)


def test_zero_steps_rejected():
    with pytest.raises(ParamError):
        generate_synthetic(SMALL, 0, 0)


def test_access_after_free_is_one_violation():
    bad = tensor(5, 64, 0, 1, {0: 1, 3: 2})
    trace = one_step(4, [tensor(1, 64, 0, 3, {0: 1}), bad])
    problems = validate(trace)
    assert len(problems) == 1
    assert problems[0].tensor_id == 5
    assert problems[0].rule == "access-outside-lifetime"


def test_repeatability_violation():
    first = one_step(2, [tensor(1, 64, 0, 0, {0: 1}, step=0)]).steps[0]
    second = one_step(2, [tensor(1, 64, 0, 0, {0: 1}, step=1), tensor(2, 64, 1, 1, {1: 1}, step=1)]).steps[0]
    problems = validate(Trace(steps=(first, second)))
    assert [p.rule for p in problems] == ["repeatability"]


def test_other_tensor_rules():
    trace = one_step(3, [
        TensorSpec(1, 0, (0, 0), (0, 1), ((0, 1, 0),)),
        TensorSpec(2, 8, (0, 2), (0, 1), ((2, 1, 0),)),
        TensorSpec(3, 8, (0, 0), (0, 1), ((0, 0, 0),)),
    ])
    rules = {(p.tensor_id, p.rule) for p in validate(trace)}
    assert rules == {(1, "size"), (2, "alloc-order"), (3, "no-access")}


def test_bucket_limit():
    t = one_step(1, [tensor(1, 8, 0, 0, {0: 1})])
    steps = tuple(TrainingStepSpec(t.steps[0].layers, (tensor(1, 8, 0, 0, {0: 1}, step=s),), bucket_id=s)
                  for s in range(11))
    assert any(p.rule == "bucket-count" for p in validate(Trace(steps=steps)))


def test_tensors_touched_follows_lifetimes():
    trace = one_step(3, [tensor(1, 8, 0, 1, {0: 1}), tensor(2, 8, 2, 2, {2: 1})])
    assert trace.steps[0].tensors_touched == ((1,), (1,), (2,))


def test_round_trip_small(tmp_path):
    trace = one_step(3, [
        tensor(1, 10, 0, 0, {0: 1}),
        tensor(2, 5000, 0, 2, {0: 2, 2: 1}),
        tensor(3, 64, 1, 1, {1: 4}),
        tensor(4, 64, 1, 2, {1: 1, 2: 1}),
        tensor(5, 128, 2, 2, {2: 3}),
    ])
    save_trace(trace, tmp_path / "t.jsonl")
    assert load_trace(tmp_path / "t.jsonl") == trace


def test_round_trip_generated(tmp_path):
    trace = generate_synthetic(SMALL, 4, 2)
    save_trace(trace, tmp_path / "t.jsonl")
    assert load_trace(tmp_path / "t.jsonl") == trace


def test_truncated_file_is_an_error(tmp_path):
    trace = generate_synthetic(SMALL, 4, 1)
    path = tmp_path / "t.jsonl"
    save_trace(trace, path)
    lines = path.read_text().splitlines(keepends=True)
    (tmp_path / "cut.jsonl").write_text("".join(lines[: len(lines) // 2]))
    with pytest.raises(TraceFormatError):
        load_trace(tmp_path / "cut.jsonl")
    # a record cut mid-line names its line
    (tmp_path / "mid.jsonl").write_text("".join(lines[:3]) + lines[3][:10])
    with pytest.raises(TraceFormatError) as exc:
        load_trace(tmp_path / "mid.jsonl")
    assert exc.value.line == 4


def test_malformed_record_reports_line(tmp_path):
    trace = one_step(2, [tensor(1, 8, 0, 1, {0: 1})])
    path = tmp_path / "t.jsonl"
    save_trace(trace, path)
    lines = path.read_text().splitlines(keepends=True)
    lines[2] = "{not json\n"
    path.write_text("".join(lines))
    with pytest.raises(TraceFormatError) as exc:
        load_trace(path)
    assert exc.value.line == 3


def test_unknown_fields_and_records_are_ignored(tmp_path):
    trace = one_step(2, [tensor(1, 8, 0, 1, {0: 1, 1: 1})])
    path = tmp_path / "t.jsonl"
    save_trace(trace, path)
    out = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        if rec["record"] != "end":
            rec["future_field"] = {"x": 1}
        out.append(json.dumps(rec))
    path.write_text("\n".join(out) + "\n")
    assert load_trace(path) == trace


def test_with_buckets_interleaves():
    a = generate_synthetic(SynthParams(num_layers=8, num_tensors=60), 0, 1)
    b = generate_synthetic(SynthParams(num_layers=10, num_tensors=80), 1, 1)
    trace = with_buckets([a, b], [0, 1, 0, 1])
    assert [s.bucket_id for s in trace.steps] == [0, 1, 0, 1]
    assert validate(trace) == []
