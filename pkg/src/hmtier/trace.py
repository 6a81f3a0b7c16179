"""Layered training-step workloads: types, synthetic generation, validation, file I/O.

A trace is a list of training steps. Each step is a sequence of layers (forward
then backward) plus the tensors that are alive in it. Accesses are aggregated
per (tensor, layer) as read/write counts.

Tensor positions are ``(step_index, layer_index)`` pairs. A tensor whose
``alloc_at`` and ``free_at`` fall in different steps survives the step
boundary (weights, optimizer state) and is listed in every step it spans.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

PAGE_SIZE = 4096
MAX_BUCKETS = 10
FORMAT_VERSION = 1

# access-count buckets used throughout: 1-10, 11-100, >100
ACCESS_BUCKETS = ("1-10", "11-100", ">100")


def access_bucket(count: int) -> int:
    """Index into ``ACCESS_BUCKETS`` for a total access count (0 maps to the first)."""
    if count <= 10:
        return 0
    if count <= 100:
        return 1
    return 2


@dataclass(frozen=True)
class TensorSpec:
    id: int
    size_bytes: int
    alloc_at: tuple[int, int]
    free_at: tuple[int, int]
    accesses: tuple[tuple[int, int, int], ...]  # (layer, reads, writes)

    @property
    def total_accesses(self) -> int:
        return sum(r + w for _, r, w in self.accesses)

    @property
    def spans_steps(self) -> bool:
        return self.alloc_at[0] != self.free_at[0]

    def alive_range(self, step_index: int, num_layers: int) -> tuple[int, int] | None:
        """First and last layer (inclusive) this tensor is alive in ``step_index``."""
        if step_index < self.alloc_at[0] or step_index > self.free_at[0]:
            return None
        first = self.alloc_at[1] if step_index == self.alloc_at[0] else 0
        last = self.free_at[1] if step_index == self.free_at[0] else num_layers - 1
        return first, last


@dataclass(frozen=True)
class LayerSpec:
    layer_index: int
    base_compute_ns: float


@dataclass(frozen=True)
class TrainingStepSpec:
    layers: tuple[LayerSpec, ...]
    tensors: tuple[TensorSpec, ...]
    bucket_id: int = 0

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def step_index(self) -> int | None:
        """Absolute step index, recovered from the step-local tensors (None if there are none)."""
        for t in self.tensors:
            if not t.spans_steps:
                return t.alloc_at[0]
        return None

    @cached_property
    def tensors_touched(self) -> tuple[tuple[int, ...], ...]:
        """Ids of the tensors alive in each layer."""
        idx = self.step_index()
        per_layer: list[list[int]] = [[] for _ in self.layers]
        for t in self.tensors:
            step = idx if idx is not None else t.alloc_at[0]
            rng = t.alive_range(step, self.num_layers) if not t.spans_steps else (
                _spanning_range(t, step, self.num_layers))
            if rng is None:
                continue
            for layer in range(rng[0], rng[1] + 1):
                per_layer[layer].append(t.id)
        return tuple(tuple(ids) for ids in per_layer)


def _spanning_range(t: TensorSpec, step: int | None, num_layers: int) -> tuple[int, int] | None:
    if step is None:
        return 0, num_layers - 1
    return t.alive_range(step, num_layers)


@dataclass(frozen=True)
class Trace:
    steps: tuple[TrainingStepSpec, ...]
    seed: int = 0

    @property
    def bucket_ids(self) -> tuple[int, ...]:
        seen: dict[int, None] = {}
        for s in self.steps:
            seen.setdefault(s.bucket_id, None)
        return tuple(seen)

    @property
    def num_layers(self) -> int:
        return self.steps[0].num_layers if self.steps else 0

    def step_for(self, sim_step: int) -> int:
        """Trace step replayed at simulated step ``sim_step`` (traces repeat cyclically)."""
        return sim_step % len(self.steps)


class ParamError(ValueError):
    """Invalid generator parameter; ``field`` names the offending parameter."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class SynthParams:
    """Knobs for :func:`generate_synthetic`.

    Defaults describe a ResNet-like step of 120 layers (60 forward, 60
    backward): 92% of tensors live for one layer and 98% of those are smaller
    than a page. Each forward layer saves several activations for its backward
    twin; weights persist across steps and hold close to half the footprint;
    gradients live for two backward layers.
    A couple of persistent tensors touched in every layer make up the hot
    (>100 access) bucket.
    """

    num_layers: int = 120
    num_tensors: int = 34_000
    frac_short_lived: float = 0.92
    frac_small_of_short: float = 0.98
    small_size_max: int = 4096
    # probabilities of the 1-10 / 11-100 / >100 buckets for small short-lived tensors
    access_count_distribution: tuple[float, float, float] = (0.97, 0.03, 0.0)
    # within a bucket, count c+1 is this many times as likely as count c
    count_decay: float = 0.2
    # power-of-two small sizes from 4 B; each class this many times as likely as the previous
    small_size_decay: float = 0.4
    # share of total object bytes held by the hot persistent tensors
    hot_fraction_bytes: float = 0.002
    num_hot: int = 2
    activations_per_layer: int = 4
    activation_bytes: int = 98_304
    weight_bytes: int = 327_680
    gradient_bytes: int = 65_536
    workspace_bytes: int = 65_536
    size_jitter: float = 0.25
    large_access_range: tuple[int, int] = (60, 100)
    base_compute_ns_per_layer: float | tuple[float, ...] = 55_000.0

    def validate(self) -> None:
        if not isinstance(self.num_layers, int) or self.num_layers < 1:
            raise ParamError("num_layers", "must be an integer >= 1")
        if not isinstance(self.num_tensors, int) or self.num_tensors < 1:
            raise ParamError("num_tensors", "must be an integer >= 1")
        for name in ("frac_short_lived", "frac_small_of_short", "hot_fraction_bytes", "size_jitter"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ParamError(name, f"must lie in [0, 1], got {v}")
        for name in ("count_decay", "small_size_decay"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ParamError(name, f"must lie in (0, 1], got {v}")
        if not (1 <= self.small_size_max <= PAGE_SIZE):
            raise ParamError("small_size_max", f"must lie in [1, {PAGE_SIZE}]")
        dist = self.access_count_distribution
        if len(dist) != 3 or any(p < 0 or p > 1 for p in dist):
            raise ParamError("access_count_distribution", "needs three probabilities in [0, 1]")
        if not math.isclose(sum(dist), 1.0, abs_tol=1e-9):
            raise ParamError("access_count_distribution", f"must sum to 1, got {sum(dist)}")
        for name in ("num_hot", "activations_per_layer"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 0:
                raise ParamError(name, "must be an integer >= 0")
        for name in ("activation_bytes", "weight_bytes", "gradient_bytes", "workspace_bytes"):
            if getattr(self, name) < PAGE_SIZE:
                raise ParamError(name, f"must be >= {PAGE_SIZE}")
        lo, hi = self.large_access_range
        if not (1 <= lo <= hi):
            raise ParamError("large_access_range", "needs 1 <= lo <= hi")
        base = self.base_compute_ns_per_layer
        if isinstance(base, (int, float)):
            if base < 0:
                raise ParamError("base_compute_ns_per_layer", "must be >= 0")
        else:
            if len(base) != self.num_layers or any(b < 0 for b in base):
                raise ParamError("base_compute_ns_per_layer", "needs num_layers values >= 0")

    def layer_compute(self) -> tuple[float, ...]:
        base = self.base_compute_ns_per_layer
        if isinstance(base, (int, float)):
            return (float(base),) * self.num_layers
        return tuple(float(b) for b in base)


# ---------------------------------------------------------------------------
# synthetic generation


def _split_counts(total: int, layers: Sequence[int], write_layer: int | None = None) -> tuple[tuple[int, int, int], ...]:
    """Spread ``total`` accesses over ``layers``; a third of each share are writes."""
    layers = sorted(set(layers))
    n = len(layers)
    out = []
    for k, layer in enumerate(layers):
        share = total // n + (1 if k < total % n else 0)
        share = max(share, 1)
        writes = share // 3 if write_layer is None or layer == write_layer else 0
        out.append((layer, share - writes, writes))
    return tuple(out)


_BUCKET_RANGES = ((1, 10), (11, 100), (101, 400))


class _Gen:
    def __init__(self, params: SynthParams, seed: int):
        self.p = params
        self.rng = np.random.default_rng(seed)

    def jitter(self, nominal: float, n: int | None = None):
        j = self.p.size_jitter
        k = 1 if n is None else n
        f = self.rng.uniform(1.0 - j, 1.0 + j, size=k) if j > 0 else np.ones(k)
        out = np.maximum(PAGE_SIZE, (nominal * f).astype(np.int64))
        return out if n is not None else int(out[0])

    def small_sizes(self, n: int) -> np.ndarray:
        top = max(2, int(math.log2(max(self.p.small_size_max - 1, 4))))
        ks = np.arange(2, top + 1)
        w = self.p.small_size_decay ** (ks - 2)
        sizes = 2 ** self.rng.choice(ks, size=n, p=w / w.sum())
        return np.minimum(sizes, max(1, self.p.small_size_max - 1))

    def counts_in(self, bucket: int, n: int) -> np.ndarray:
        lo, hi = _BUCKET_RANGES[bucket]
        vals = np.arange(lo, hi + 1)
        w = self.p.count_decay ** (vals - lo)
        return self.rng.choice(vals, size=n, p=w / w.sum())

    def small_counts(self, n: int) -> np.ndarray:
        buckets = self.rng.choice(3, size=n, p=np.asarray(self.p.access_count_distribution))
        out = np.empty(n, dtype=np.int64)
        for b in range(3):
            idx = np.flatnonzero(buckets == b)
            out[idx] = self.counts_in(b, len(idx))
        return out


def generate_synthetic(params: SynthParams, seed: int, num_steps: int) -> Trace:
    """Generate a repeatable ResNet-like trace with ``num_steps`` identical steps."""
    params.validate()
    if not isinstance(num_steps, int) or num_steps < 1:
        raise ParamError("num_steps", "must be an integer >= 1")
    g = _Gen(params, seed)
    L = params.num_layers
    fwd = L // 2
    n_short = int(round(params.num_tensors * params.frac_short_lived))
    n_long = params.num_tensors - n_short
    n_short_small = int(round(n_short * params.frac_small_of_short))
    n_short_large = n_short - n_short_small
    lo, hi = params.large_access_range

    # persistent: [size, accesses]; local: (size, alloc_layer, free_layer, accesses)
    persistent: list[list] = []
    local: list[tuple[int, int, int, tuple]] = []

    structural: list[tuple] = []
    for h in range(params.num_hot):
        structural.append(("hot", h, 0, 1.0))
    for i in range(fwd):
        back = L - 1 - i
        structural.append(("weight", i, back, 1.0))
        for j in range(params.activations_per_layer):
            structural.append(("activation", i, back, 1.0, j == params.activations_per_layer - 1))
        if i >= 1:
            structural.append(("gradient", i, back, 1.0))
    structural = structural[:n_long]
    hot_params = []
    for item in structural:
        kind, i, back, scale = item[:4]
        total = int(g.rng.integers(lo, hi + 1))
        if kind == "hot":
            hot_params.append(len(persistent))
            total = max(L, int(g.rng.integers(101, 401)))
            persistent.append([0, _split_counts(total, range(L))])
        elif kind == "weight":
            size = g.jitter(params.weight_bytes * scale)
            persistent.append([size, _split_counts(total, [i, back])])
        elif kind == "activation":
            size = g.jitter(params.activation_bytes * scale)
            layers = [i, i + 1, back] if item[4] else [i, back]
            local.append((size, i, back, _split_counts(total, layers, write_layer=i)))
        else:
            size = g.jitter(params.gradient_bytes * scale)
            local.append((size, back, back + 1, _split_counts(total, [back, back + 1], write_layer=back)))

    # small long-lived metadata lives across an aligned pair of layers and is rarely touched
    n_misc = n_long - len(structural)
    sizes = g.small_sizes(n_misc)
    counts = np.maximum(2, g.counts_in(0, n_misc))
    if L >= 2:
        starts = 2 * g.rng.integers(0, L // 2, size=n_misc)
        for size, count, a in zip(sizes.tolist(), counts.tolist(), starts.tolist()):
            local.append((size, a, a + 1, _split_counts(count, [a, a + 1], write_layer=a)))
    else:
        for size, count in zip(sizes.tolist(), counts.tolist()):
            persistent.append([size, _split_counts(count, [0])])

    layers = g.rng.integers(0, L, size=n_short_large)
    sizes = g.jitter(params.workspace_bytes, n_short_large)
    counts = g.counts_in(0, n_short_large)
    for layer, size, count in zip(layers.tolist(), sizes.tolist(), counts.tolist()):
        local.append((size, layer, layer, _split_counts(count, [layer], write_layer=layer)))
    layers = g.rng.integers(0, L, size=n_short_small)
    sizes = g.small_sizes(n_short_small)
    counts = g.small_counts(n_short_small)
    for layer, size, count in zip(layers.tolist(), sizes.tolist(), counts.tolist()):
        local.append((size, layer, layer, _split_counts(count, [layer], write_layer=layer)))

    # hot tensors share the byte budget set by hot_fraction_bytes
    if hot_params:
        other = sum(p[0] for p in persistent) + sum(t[0] for t in local)
        f = params.hot_fraction_bytes
        budget = other * f / (1.0 - f) if f < 1.0 else float(other)
        each = max(1, int(budget / len(hot_params)))
        for k in hot_params:
            persistent[k][0] = each

    # step-local tensors get shuffled ids so allocation order interleaves kinds
    order = g.rng.permutation(len(local))
    local = [local[k] for k in order]

    last_step = num_steps - 1
    persist_specs = tuple(
        TensorSpec(id=k, size_bytes=int(size), alloc_at=(0, 0), free_at=(last_step, L - 1), accesses=acc)
        for k, (size, acc) in enumerate(persistent)
    )
    base = params.layer_compute()
    layer_specs = tuple(LayerSpec(i, base[i]) for i in range(L))
    steps = []
    first_local = len(persistent)
    for s in range(num_steps):
        locals_s = tuple(
            TensorSpec(id=first_local + k, size_bytes=int(size), alloc_at=(s, a), free_at=(s, b), accesses=acc)
            for k, (size, a, b, acc) in enumerate(local)
        )
        steps.append(TrainingStepSpec(layers=layer_specs, tensors=persist_specs + locals_s, bucket_id=0))
    return Trace(steps=tuple(steps), seed=seed)


def with_buckets(traces: Sequence[Trace], pattern: Sequence[int]) -> Trace:
    """Interleave single-bucket traces into one multi-bucket trace.

    ``pattern[k]`` names which input trace supplies step ``k``; its bucket id is the
    position of that trace in ``traces``. Step-local tensor positions are rebased.
    """
    if len(traces) > MAX_BUCKETS:
        raise ParamError("traces", f"at most {MAX_BUCKETS} buckets")
    steps = []
    last = len(pattern) - 1
    for k, b in enumerate(pattern):
        src = traces[b].steps[0]
        tensors = []
        for t in src.tensors:
            if t.spans_steps:
                tensors.append(TensorSpec(t.id, t.size_bytes, (0, t.alloc_at[1]), (last, t.free_at[1]), t.accesses))
            else:
                tensors.append(TensorSpec(t.id, t.size_bytes, (k, t.alloc_at[1]), (k, t.free_at[1]), t.accesses))
        steps.append(TrainingStepSpec(layers=src.layers, tensors=tuple(tensors), bucket_id=b))
    return Trace(steps=tuple(steps), seed=traces[0].seed if traces else 0)


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    rule: str
    message: str
    tensor_id: int | None = None
    step: int | None = None


def _step_signature(step: TrainingStepSpec, step_index: int) -> tuple:
    tensors = []
    for t in sorted(step.tensors, key=lambda t: t.id):
        if t.spans_steps:
            life = ("spanning",)
        else:
            life = ("local", t.alloc_at[1], t.free_at[1])
        tensors.append((t.id, t.size_bytes, life, t.accesses))
    return (tuple(step.layers), tuple(tensors))


def validate(trace: Trace) -> list[Violation]:
    """Check every tensor/step/trace invariant; returns the violations (empty if valid)."""
    out: list[Violation] = []
    if not trace.steps:
        out.append(Violation("trace-empty", "trace has no steps"))
        return out
    buckets = trace.bucket_ids
    if len(buckets) > MAX_BUCKETS:
        out.append(Violation("bucket-count", f"{len(buckets)} distinct buckets, at most {MAX_BUCKETS} allowed"))
    signatures: dict[int, tuple[int, tuple]] = {}
    for s, step in enumerate(trace.steps):
        L = step.num_layers
        if L < 1:
            out.append(Violation("layers", "step has no layers", step=s))
            continue
        if [layer.layer_index for layer in step.layers] != list(range(L)):
            out.append(Violation("layers", "layer indices must be 0..L-1 in order", step=s))
        for layer in step.layers:
            if layer.base_compute_ns < 0:
                out.append(Violation("layers", f"layer {layer.layer_index} has negative compute", step=s))
        seen_ids: set[int] = set()
        for t in step.tensors:
            if t.id in seen_ids:
                out.append(Violation("duplicate-id", "tensor listed twice in one step", t.id, s))
            seen_ids.add(t.id)
            if t.size_bytes <= 0:
                out.append(Violation("size", "size_bytes must be > 0", t.id, s))
            if tuple(t.alloc_at) > tuple(t.free_at):
                out.append(Violation("alloc-order", f"alloc_at {t.alloc_at} after free_at {t.free_at}", t.id, s))
                continue
            rng = t.alive_range(s, L)
            if rng is None:
                out.append(Violation("owning-step", f"tensor not alive in step {s}", t.id, s))
                continue
            for layer, r, w in t.accesses:
                if r < 0 or w < 0:
                    out.append(Violation("access-count", f"negative count at layer {layer}", t.id, s))
                if not (rng[0] <= layer <= rng[1]):
                    out.append(Violation(
                        "access-outside-lifetime",
                        f"access at layer {layer} outside alive layers {rng[0]}..{rng[1]}", t.id, s))
            if not any(r + w > 0 for _, r, w in t.accesses):
                out.append(Violation("no-access", "tensor is never accessed", t.id, s))
        sig = _step_signature(step, s)
        if step.bucket_id in signatures:
            first, ref = signatures[step.bucket_id]
            if sig != ref:
                out.append(Violation(
                    "repeatability",
                    f"step {s} differs from step {first} of bucket {step.bucket_id}", step=s))
        else:
            signatures[step.bucket_id] = (s, sig)
    return out


# ---------------------------------------------------------------------------
# file format: UTF-8 JSON lines, header / step / tensor records, closing end record


class TraceFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def save_trace(trace: Trace, path: str | Path) -> None:
    path = Path(path)
    ids = {t.id for s in trace.steps for t in s.tensors}
    records = 0
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        def emit(obj: dict) -> None:
            nonlocal records
            f.write(json.dumps(obj, separators=(",", ":")))
            f.write("\n")
            records += 1

        emit({
            "record": "header",
            "format_version": FORMAT_VERSION,
            "num_steps": len(trace.steps),
            "num_buckets": len(trace.bucket_ids),
            "num_layers": trace.num_layers,
            "num_tensors": len(ids),
            "seed": trace.seed,
        })
        for s, step in enumerate(trace.steps):
            emit({
                "record": "step",
                "step": s,
                "bucket_id": step.bucket_id,
                "base_compute_ns": [layer.base_compute_ns for layer in step.layers],
                "num_tensors": len(step.tensors),
            })
            for t in step.tensors:
                emit({
                    "record": "tensor",
                    "step": s,
                    "id": t.id,
                    "size_bytes": t.size_bytes,
                    "alloc_at": list(t.alloc_at),
                    "free_at": list(t.free_at),
                    "accesses": [list(a) for a in t.accesses],
                })
        f.write(json.dumps({"record": "end", "num_records": records}) + "\n")
    tmp.replace(path)


def _need(rec: dict, key: str, line: int):
    if key not in rec:
        raise TraceFormatError(line, f"{rec.get('record', 'record')} record missing field '{key}'")
    return rec[key]


def _pair(value, line: int, key: str) -> tuple[int, int]:
    if not isinstance(value, list) or len(value) != 2 or not all(isinstance(v, int) for v in value):
        raise TraceFormatError(line, f"field '{key}' must be [step, layer]")
    return value[0], value[1]


def load_trace(path: str | Path) -> Trace:
    header = None
    steps: list[dict] = []
    records = 0
    ended = False
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            if ended:
                if raw.strip():
                    raise TraceFormatError(lineno, "data after end record")
                continue
            if not raw.endswith("\n"):
                raise TraceFormatError(lineno, "truncated record (no line terminator)")
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(lineno, f"malformed JSON: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise TraceFormatError(lineno, "record must be a JSON object")
            kind = rec.get("record")
            if header is None and kind != "header":
                raise TraceFormatError(lineno, "first record must be the header")
            if kind == "header":
                if header is not None:
                    raise TraceFormatError(lineno, "duplicate header")
                version = _need(rec, "format_version", lineno)
                if version != FORMAT_VERSION:
                    raise TraceFormatError(lineno, f"unsupported format_version {version}")
                header = rec
            elif kind == "step":
                idx = _need(rec, "step", lineno)
                if idx != len(steps):
                    raise TraceFormatError(lineno, f"step {idx} out of order")
                base = _need(rec, "base_compute_ns", lineno)
                steps.append({"bucket_id": int(rec.get("bucket_id", 0)), "base": base, "tensors": []})
            elif kind == "tensor":
                s = _need(rec, "step", lineno)
                if not steps or s != len(steps) - 1:
                    raise TraceFormatError(lineno, f"tensor record for step {s} outside its step block")
                acc = _need(rec, "accesses", lineno)
                try:
                    accesses = tuple((int(a[0]), int(a[1]), int(a[2])) for a in acc)
                except (TypeError, ValueError, IndexError):
                    raise TraceFormatError(lineno, "accesses must be [layer, reads, writes] triples") from None
                steps[-1]["tensors"].append(TensorSpec(
                    id=int(_need(rec, "id", lineno)),
                    size_bytes=int(_need(rec, "size_bytes", lineno)),
                    alloc_at=_pair(_need(rec, "alloc_at", lineno), lineno, "alloc_at"),
                    free_at=_pair(_need(rec, "free_at", lineno), lineno, "free_at"),
                    accesses=accesses,
                ))
            elif kind == "end":
                if _need(rec, "num_records", lineno) != records:
                    raise TraceFormatError(lineno, f"end record counts {rec['num_records']} records, read {records}")
                ended = True
                continue
            # unknown record kinds are skipped for forward compatibility
            records += 1
    if header is None:
        raise TraceFormatError(0, "empty file")
    if not ended:
        raise TraceFormatError(records + 1, "truncated file: missing end record")
    if len(steps) != header.get("num_steps", len(steps)):
        raise TraceFormatError(records + 1, "header num_steps does not match step records")
    out = []
    for st in steps:
        layers = tuple(LayerSpec(i, float(b)) for i, b in enumerate(st["base"]))
        out.append(TrainingStepSpec(layers=layers, tensors=tuple(st["tensors"]), bucket_id=st["bucket_id"]))
    return Trace(steps=tuple(out), seed=int(header.get("seed", 0)))

