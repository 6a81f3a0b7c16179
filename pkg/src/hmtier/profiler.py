"""Exact one-step profiling at tensor granularity.

Every access in the profiled step is counted; nothing is sampled. The report
carries per-object profiles, lifetime/access histograms, peak memory, and the
footprint of the one-object-per-page layout used while profiling.
"""
from __future__ import annotations

import csv
import enum
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .trace import ACCESS_BUCKETS, PAGE_SIZE, Trace, access_bucket

if TYPE_CHECKING:
    from .allocator import AllocationMap

SURVIVES_STEP = -1
SMALL_LIMIT = PAGE_SIZE


class LifetimeClass(enum.Enum):
    SHORT_LIVED = "short"
    LONG_LIVED = "long"


class SizeClass(enum.Enum):
    SMALL = "small"
    LARGE = "large"


def pages_for(size: int) -> int:
    return -(-size // PAGE_SIZE)


@dataclass(frozen=True)
class ObjectProfile:
    tensor_id: int
    size_bytes: int
    lifetime_layers: int  # SURVIVES_STEP for tensors crossing a step boundary
    live_bits: int  # bit l set iff accessed in layer l
    accesses: tuple[tuple[int, int], ...]  # sparse (layer, count), ascending layer
    alive_from: int
    alive_to: int
    num_layers: int

    @property
    def per_layer_accesses(self) -> tuple[int, ...]:
        counts = [0] * self.num_layers
        for layer, c in self.accesses:
            counts[layer] += c
        return tuple(counts)

    @property
    def total_accesses(self) -> int:
        return sum(c for _, c in self.accesses)

    @property
    def class_lifetime(self) -> LifetimeClass:
        if self.lifetime_layers != SURVIVES_STEP and self.lifetime_layers <= 1:
            return LifetimeClass.SHORT_LIVED
        return LifetimeClass.LONG_LIVED

    @property
    def class_size(self) -> SizeClass:
        return SizeClass.SMALL if self.size_bytes < SMALL_LIMIT else SizeClass.LARGE

    @property
    def is_short(self) -> bool:
        return self.class_lifetime is LifetimeClass.SHORT_LIVED

    @property
    def is_small(self) -> bool:
        return self.size_bytes < SMALL_LIMIT

    @property
    def survives(self) -> bool:
        return self.lifetime_layers == SURVIVES_STEP

    @property
    def access_bucket(self) -> int:
        return access_bucket(self.total_accesses)

    def live_bits_str(self) -> str:
        return format(self.live_bits, f"0{self.num_layers}b")[::-1]

    def accessed_in(self, first: int, last: int) -> bool:
        mask = ((1 << (last - first + 1)) - 1) << first
        return bool(self.live_bits & mask)


def lifetime_bucket_labels(num_layers: int) -> list[str]:
    edges = [1] + list(range(8, num_layers + 1, 8))
    if edges[-1] != num_layers:
        edges.append(num_layers)
    labels = ["1"]
    for lo, hi in zip(edges, edges[1:]):
        labels.append(f"{lo + 1}-{hi}" if hi > lo + 1 else str(hi))
    labels.append(f">{num_layers}")
    return labels


def lifetime_bucket(lifetime: int, num_layers: int) -> str:
    if lifetime == SURVIVES_STEP:
        return f">{num_layers}"
    if lifetime <= 1:
        return "1"
    edges = [1] + list(range(8, num_layers + 1, 8))
    if edges[-1] != num_layers:
        edges.append(num_layers)
    for lo, hi in zip(edges, edges[1:]):
        if lo < lifetime <= hi:
            return f"{lo + 1}-{hi}" if hi > lo + 1 else str(hi)
    return f">{num_layers}"


@dataclass(frozen=True)
class ProfileReport:
    step_index: int
    bucket_id: int
    num_layers: int
    object_profiles: tuple[ObjectProfile, ...]
    lifetime_histogram: dict[str, tuple[int, int]]
    access_histogram: dict[tuple[str, str], tuple[int, int]]  # (bucket, size class) -> (count, bytes)
    live_bytes_per_layer: tuple[int, ...]
    peak_memory_bytes: int
    one_object_per_page_bytes: int
    packed_bytes: int
    small_object_paged_bytes: int
    small_object_packed_bytes: int
    base_compute_ns: tuple[float, ...] = field(default=())

    def by_id(self) -> dict[int, ObjectProfile]:
        return {p.tensor_id: p for p in self.object_profiles}

    def to_csv(self, include_objects: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["histogram", "bucket", "size_class", "count", "bytes"])
        for label in lifetime_bucket_labels(self.num_layers):
            count, nbytes = self.lifetime_histogram.get(label, (0, 0))
            w.writerow(["lifetime", label, "all", count, nbytes])
        for label in ACCESS_BUCKETS:
            for sc in ("small", "large"):
                count, nbytes = self.access_histogram.get((label, sc), (0, 0))
                w.writerow(["accesses", label, sc, count, nbytes])
        w.writerow(["footprint", "peak_memory", "all", "", self.peak_memory_bytes])
        w.writerow(["footprint", "one_object_per_page", "all", "", self.one_object_per_page_bytes])
        w.writerow(["footprint", "packed", "all", "", self.packed_bytes])
        w.writerow(["footprint", "one_object_per_page", "small", "", self.small_object_paged_bytes])
        w.writerow(["footprint", "packed", "small", "", self.small_object_packed_bytes])
        if include_objects:
            w.writerow([])
            w.writerow(["tensor_id", "size_bytes", "lifetime_layers", "class_lifetime", "class_size",
                        "total_accesses", "live_bits"])
            for p in self.object_profiles:
                w.writerow([p.tensor_id, p.size_bytes, p.lifetime_layers, p.class_lifetime.value,
                            p.class_size.value, p.total_accesses, p.live_bits_str()])
        return buf.getvalue()


def _object_profiles(trace: Trace, step_index: int) -> tuple[ObjectProfile, ...]:
    step = trace.steps[step_index]
    L = step.num_layers
    end = (len(trace.steps) - 1, L - 1)
    out = []
    for t in sorted(step.tensors, key=lambda t: t.id):
        first, last = t.alive_range(step_index, L) or (0, L - 1)
        counts: dict[int, int] = defaultdict(int)
        for layer, r, w in t.accesses:
            if r + w:
                counts[layer] += r + w
        acc = tuple(sorted(counts.items()))
        bits = 0
        for layer, _ in acc:
            bits |= 1 << layer
        # a tensor held from layer 0 until the end of training outlives every step
        held = t.alloc_at[1] == 0 and t.free_at == end and first == 0
        lifetime = SURVIVES_STEP if t.spans_steps or held else last - first + 1
        out.append(ObjectProfile(t.id, t.size_bytes, lifetime, bits, acc, first, last, L))
    return tuple(out)


def group_key_of(p: ObjectProfile) -> tuple[int, int]:
    """Packing group: identical liveness bit string and access-count bucket."""
    return p.live_bits, p.access_bucket


def _layer_sweep(profiles: Sequence[ObjectProfile], L: int, weight) -> np.ndarray:
    diff = np.zeros(L + 1, dtype=np.int64)
    for p in profiles:
        w = weight(p)
        if w:
            diff[p.alive_from] += w
            diff[p.alive_to + 1] -= w
    return np.cumsum(diff[:L])


def _packed_per_layer(profiles: Sequence[ObjectProfile], L: int) -> np.ndarray:
    """Pages per layer when small objects are packed per group (group bytes rounded up)."""
    groups: dict[tuple[int, int], list[ObjectProfile]] = defaultdict(list)
    for p in profiles:
        if p.is_small:
            groups[group_key_of(p)].append(p)
    pages = np.zeros(L, dtype=np.int64)
    for members in groups.values():
        live = _layer_sweep(members, L, lambda p: p.size_bytes)
        pages += -(-live // PAGE_SIZE)
    return pages


def profile_step(trace: Trace, step_index: int) -> ProfileReport:
    """Profile one training step, counting every access exactly."""
    if not (0 <= step_index < len(trace.steps)):
        raise IndexError(f"step_index {step_index} out of range [0, {len(trace.steps)})")
    step = trace.steps[step_index]
    L = step.num_layers
    profiles = _object_profiles(trace, step_index)

    lifetime_hist: dict[str, list[int]] = {label: [0, 0] for label in lifetime_bucket_labels(L)}
    access_hist: dict[tuple[str, str], list[int]] = {
        (b, sc): [0, 0] for b in ACCESS_BUCKETS for sc in ("small", "large")}
    for p in profiles:
        h = lifetime_hist[lifetime_bucket(p.lifetime_layers, L)]
        h[0] += 1
        h[1] += p.size_bytes
        a = access_hist[(ACCESS_BUCKETS[p.access_bucket], p.class_size.value)]
        a[0] += 1
        a[1] += p.size_bytes

    live = _layer_sweep(profiles, L, lambda p: p.size_bytes)
    paged = _layer_sweep(profiles, L, lambda p: pages_for(p.size_bytes) * PAGE_SIZE)
    small = [p for p in profiles if p.is_small]
    small_paged = _layer_sweep(small, L, lambda p: PAGE_SIZE)
    small_packed = _packed_per_layer(small, L) * PAGE_SIZE
    large_paged = _layer_sweep([p for p in profiles if not p.is_small], L,
                               lambda p: pages_for(p.size_bytes) * PAGE_SIZE)
    packed = large_paged + small_packed

    return ProfileReport(
        step_index=step_index,
        bucket_id=step.bucket_id,
        num_layers=L,
        object_profiles=profiles,
        lifetime_histogram={k: (v[0], v[1]) for k, v in lifetime_hist.items()},
        access_histogram={k: (v[0], v[1]) for k, v in access_hist.items()},
        live_bytes_per_layer=tuple(int(x) for x in live),
        peak_memory_bytes=int(live.max()) if L else 0,
        one_object_per_page_bytes=int(paged.max()) if L else 0,
        packed_bytes=int(packed.max()) if L else 0,
        small_object_paged_bytes=int(small_paged.max()) if L else 0,
        small_object_packed_bytes=int(small_packed.max()) if L else 0,
        base_compute_ns=tuple(layer.base_compute_ns for layer in step.layers),
    )


def classify(profiles: Iterable[ObjectProfile]) -> tuple[list[ObjectProfile], list[ObjectProfile]]:
    short, long_ = [], []
    for p in profiles:
        (short if p.is_short else long_).append(p)
    return short, long_


def profiling_footprint(report: ProfileReport) -> tuple[int, int]:
    """(one-object-per-page footprint, packed footprint estimate), both at peak concurrency."""
    return report.one_object_per_page_bytes, report.packed_bytes


def short_lived_fraction(report: ProfileReport) -> float:
    short, _ = classify(report.object_profiles)
    return len(short) / max(1, len(report.object_profiles))


# ---------------------------------------------------------------------------
# page-level false sharing audit


class CoverageError(KeyError):
    def __init__(self, tensor_id: int):
        super().__init__(f"tensor {tensor_id} is not covered by the allocation map")
        self.tensor_id = tensor_id


@dataclass(frozen=True)
class FalseSharingReport:
    object_bytes: dict[str, int]  # access bucket -> bytes of objects in it
    page_bytes: dict[str, int]  # access bucket -> bytes of pages whose page-level count falls in it
    flagged_pages: tuple[int, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bucket", "object_bytes", "page_bytes"])
        for b in ACCESS_BUCKETS:
            w.writerow([b, self.object_bytes[b], self.page_bytes[b]])
        w.writerow(["flagged_pages", len(self.flagged_pages), ""])
        return buf.getvalue()


def false_sharing_report(report: ProfileReport, alloc: "AllocationMap") -> FalseSharingReport:
    """Compare object-level and page-level access buckets under ``alloc``.

    A page's access count is the sum of its residents' counts (a multi-page
    object contributes its count to every page it touches). A page is flagged
    when its residents disagree on access bucket or liveness bit string.
    """
    profiles = report.by_id()
    for tid in profiles:
        if tid not in alloc.placements:
            raise CoverageError(tid)
    object_bytes = {b: 0 for b in ACCESS_BUCKETS}
    for p in profiles.values():
        object_bytes[ACCESS_BUCKETS[p.access_bucket]] += p.size_bytes
    page_bytes = {b: 0 for b in ACCESS_BUCKETS}
    flagged = []
    for page_id in sorted(alloc.pages):
        page = alloc.pages[page_id]
        residents = [profiles[tid] for tid, _, _ in page.residents if tid in profiles]
        if not residents:
            continue
        count = sum(p.total_accesses for p in {p.tensor_id: p for p in residents}.values())
        page_bytes[ACCESS_BUCKETS[access_bucket(count)]] += PAGE_SIZE
        if len({p.access_bucket for p in residents}) > 1 or len({p.live_bits for p in residents}) > 1:
            flagged.append(page_id)
    return FalseSharingReport(object_bytes, page_bytes, tuple(flagged))
