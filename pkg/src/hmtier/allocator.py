"""Page-level data layout: group packing, a naive byte allocator, and the short-lived pool.

Small objects with the same liveness bit string and access bucket are packed
together, ascending by access count, so a page never mixes objects with
different access behaviour. Large objects get dedicated page runs.
"""
from __future__ import annotations

import bisect
import csv
import enum
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .trace import PAGE_SIZE, access_bucket


class Tier(enum.IntEnum):
    SLOW = 0
    FAST = 1


class ObjectLike(Protocol):
    tensor_id: int
    size_bytes: int
    live_bits: int

    @property
    def total_accesses(self) -> int: ...


@dataclass(frozen=True, order=True)
class GroupKey:
    live_bits: int
    access_bucket: int = 0


def group_key(obj: ObjectLike) -> GroupKey:
    return GroupKey(obj.live_bits, access_bucket(obj.total_accesses))


@dataclass
class Page:
    page_id: int
    tier: Tier = Tier.SLOW
    residents: list[tuple[int, int, int]] = field(default_factory=list)  # (tensor_id, offset, length)
    group_key: GroupKey | None = None
    size: int = PAGE_SIZE

    @property
    def used_bytes(self) -> int:
        return sum(n for _, _, n in self.residents)


@dataclass
class AllocationMap:
    placements: dict[int, list[tuple[int, int, int]]] = field(default_factory=dict)  # tid -> (page, off, len)
    pages: dict[int, Page] = field(default_factory=dict)

    def pages_of(self, tensor_id: int) -> list[int]:
        seen: dict[int, None] = {}
        for page_id, _, _ in self.placements[tensor_id]:
            seen.setdefault(page_id, None)
        return list(seen)

    @property
    def num_pages(self) -> int:
        return len(self.pages)

    def check(self, sizes: dict[int, int] | None = None) -> list[str]:
        """Return invariant violations (empty when the map is consistent)."""
        problems = []
        for page in self.pages.values():
            spans = sorted((off, off + n) for _, off, n in page.residents)
            if page.used_bytes > PAGE_SIZE and page.group_key is not None:
                problems.append(f"page {page.page_id} overfull")
            for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
                if b0 < a1 and page.group_key is not None:
                    problems.append(f"page {page.page_id} has overlapping residents")
            if spans and (spans[0][0] < 0 or spans[-1][1] > PAGE_SIZE):
                problems.append(f"page {page.page_id} resident outside page bounds")
        if sizes is not None:
            for tid, size in sizes.items():
                mapped = sum(n for _, _, n in self.placements.get(tid, ()))
                if mapped != size:
                    problems.append(f"tensor {tid} maps {mapped} of {size} bytes")
                if size >= PAGE_SIZE:
                    for page_id in self.pages_of(tid):
                        others = {r[0] for r in self.pages[page_id].residents} - {tid}
                        if others:
                            problems.append(f"large tensor {tid} shares page {page_id}")
        return problems

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tensor_id", "page_id", "offset", "length", "tier"])
        for tid in sorted(self.placements):
            for page_id, off, n in self.placements[tid]:
                w.writerow([tid, page_id, off, n, self.pages[page_id].tier.name])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# grouping and packing


def group_objects(profiles: Iterable[ObjectLike]) -> list[tuple[GroupKey, list[ObjectLike]]]:
    """Partition small objects by (live_bits, access bucket); members ascend by access count."""
    groups: dict[GroupKey, list[ObjectLike]] = defaultdict(list)
    for p in profiles:
        if p.size_bytes < PAGE_SIZE:
            groups[group_key(p)].append(p)
    out = []
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda p: (p.total_accesses, p.tensor_id))
        out.append((key, members))
    return out


def pack_groups(groups: Sequence[tuple[GroupKey, Sequence[ObjectLike]]],
                large: Iterable[ObjectLike] = ()) -> AllocationMap:
    """First-fit sequential packing of each group into fresh pages.

    Objects never straddle a page; a group never shares a page with another
    group. Each large object (>= one page) gets its own run of pages.
    """
    amap = AllocationMap()
    next_page = 0

    def new_page(key: GroupKey | None) -> Page:
        nonlocal next_page
        page = Page(next_page, group_key=key)
        amap.pages[next_page] = page
        next_page += 1
        return page

    for key, members in groups:
        page = None
        fill = 0
        for obj in members:
            if page is None or fill + obj.size_bytes > PAGE_SIZE:
                page = new_page(key)
                fill = 0
            page.residents.append((obj.tensor_id, fill, obj.size_bytes))
            amap.placements[obj.tensor_id] = [(page.page_id, fill, obj.size_bytes)]
            fill += obj.size_bytes
    for obj in sorted(large, key=lambda p: p.tensor_id):
        chunks = []
        remaining = obj.size_bytes
        while remaining > 0:
            n = min(PAGE_SIZE, remaining)
            page = new_page(None)
            page.residents.append((obj.tensor_id, 0, n))
            chunks.append((page.page_id, 0, n))
            remaining -= n
        amap.placements[obj.tensor_id] = chunks
    return amap


def reorganize(profiles: Sequence[ObjectLike]) -> AllocationMap:
    """Group-pack small objects and give large ones dedicated pages."""
    return pack_groups(group_objects(profiles), large=[p for p in profiles if p.size_bytes >= PAGE_SIZE])


# ---------------------------------------------------------------------------
# naive allocation (what an unmodified framework allocator produces)


class _FirstFitArena:
    """Byte-granular first-fit allocator over a growing address space with coalescing."""

    def __init__(self, align: int = 8):
        self.align = align
        self.starts: list[int] = []  # sorted free-block starts
        self.ends: list[int] = []
        self.top = 0

    def alloc(self, size: int) -> int:
        size = -(-size // self.align) * self.align
        for k, (s, e) in enumerate(zip(self.starts, self.ends)):
            if e - s >= size:
                if e - s == size:
                    del self.starts[k]
                    del self.ends[k]
                else:
                    self.starts[k] = s + size
                return s
        addr = self.top
        self.top += size
        return addr

    def free(self, addr: int, size: int) -> None:
        size = -(-size // self.align) * self.align
        end = addr + size
        k = bisect.bisect_left(self.starts, addr)
        if k > 0 and self.ends[k - 1] == addr:
            k -= 1
            addr = self.starts[k]
            del self.starts[k]
            del self.ends[k]
        if k < len(self.starts) and self.starts[k] == end:
            end = self.ends[k]
            del self.starts[k]
            del self.ends[k]
        if end == self.top:
            self.top = addr
            return
        self.starts.insert(k, addr)
        self.ends.insert(k, end)


def naive_allocate(profiles: Sequence[ObjectLike], align: int = 8) -> tuple[AllocationMap, dict[int, int]]:
    """Replay one step's allocations through a first-fit byte allocator.

    Objects are placed at byte addresses in allocation order and freed space is
    reused, so unrelated objects end up sharing (and straddling) pages. Returns
    the page map and each object's start address.
    """
    arena = _FirstFitArena(align)
    events = []
    for p in profiles:
        events.append((p.alive_from, 0, p.tensor_id, p))
        events.append((p.alive_to, 1, p.tensor_id, p))
    events.sort(key=lambda e: (e[0], e[1], e[2]))
    addrs: dict[int, int] = {}
    for _, kind, tid, p in events:
        if kind == 0:
            addrs[tid] = arena.alloc(p.size_bytes)
        else:
            arena.free(addrs[tid], p.size_bytes)
    amap = AllocationMap()
    for p in sorted(profiles, key=lambda p: p.tensor_id):
        addr = addrs[p.tensor_id]
        chunks = []
        pos, end = addr, addr + p.size_bytes
        while pos < end:
            page_id = pos // PAGE_SIZE
            stop = min(end, (page_id + 1) * PAGE_SIZE)
            off = pos - page_id * PAGE_SIZE
            page = amap.pages.setdefault(page_id, Page(page_id))
            page.residents.append((p.tensor_id, off, stop - pos))
            chunks.append((page_id, off, stop - pos))
            pos = stop
        amap.placements[p.tensor_id] = chunks
    return amap, addrs


def page_ranges(addrs: dict[int, int], sizes: dict[int, int]) -> dict[int, tuple[int, int]]:
    """First and one-past-last page index covered by each object."""
    out = {}
    for tid, addr in addrs.items():
        out[tid] = (addr // PAGE_SIZE, (addr + sizes[tid] - 1) // PAGE_SIZE + 1)
    return out


# ---------------------------------------------------------------------------
# reserved region for short-lived objects


def _packed_pages(objs: Sequence[ObjectLike]) -> int:
    """Pages used by first-fit group packing of ``objs`` (large ones get dedicated runs)."""
    pages = 0
    for _, members in group_objects(objs):
        fill = PAGE_SIZE
        for m in members:
            if fill + m.size_bytes > PAGE_SIZE:
                pages += 1
                fill = 0
            fill += m.size_bytes
    for o in objs:
        if o.size_bytes >= PAGE_SIZE:
            pages += -(-o.size_bytes // PAGE_SIZE)
    return pages


def short_lived_layer_pages(profiles: Sequence, num_layers: int) -> np.ndarray:
    """Packed page count of the short-lived objects alive in each layer."""
    per_layer: list[list] = [[] for _ in range(num_layers)]
    for p in profiles:
        if p.is_short:
            per_layer[p.alive_from].append(p)
    return np.array([_packed_pages(objs) for objs in per_layer], dtype=np.int64)


def reserve_short_lived(profiles: Sequence, mi: int, num_layers: int | None = None,
                        layer_pages: np.ndarray | None = None) -> int:
    """Bytes reserved for short-lived objects under interval length ``mi``.

    The reservation is the largest packed short-lived footprint of any layer of
    any interval. Short-lived objects live within one layer, so layers of one
    interval reuse the same pages.
    """
    if num_layers is None:
        num_layers = profiles[0].num_layers if profiles else 1
    if not (1 <= mi <= num_layers):
        raise IndexError(f"MI {mi} outside [1, {num_layers}]")
    if layer_pages is None:
        layer_pages = short_lived_layer_pages(profiles, num_layers)
    peaks = interval_reservations(layer_pages, mi)
    return int(peaks.max()) * PAGE_SIZE if len(peaks) else 0


def interval_reservations(layer_pages: np.ndarray, mi: int) -> np.ndarray:
    """Per-interval peak short-lived page count."""
    n = len(layer_pages)
    return np.array([layer_pages[a:a + mi].max() for a in range(0, n, mi)], dtype=np.int64)


class ReservationOverflow(RuntimeError):
    """The reserved region has no room for a short-lived allocation."""


@dataclass
class ReservedRegion:
    capacity_bytes: int
    in_use_bytes: int = 0
    pages: list[int] = field(default_factory=list)
    high_water_bytes: int = 0


class MemoryPool:
    """Page-block pool backing the reserved region.

    Small objects fill an open page of their group; large objects take a run of
    blocks. Blocks whose last resident is freed return to the free list (the
    region shrinks) but are never handed back to the system.
    """

    def __init__(self, capacity_bytes: int):
        self.region = ReservedRegion(capacity_bytes)
        self.free_blocks: list[int] = []
        self._next_block = 0
        self._open: dict[GroupKey, tuple[int, int]] = {}  # group -> (block, fill)
        self._live: dict[int, int] = {}  # block -> resident count
        self._where: dict[int, list[int]] = {}  # tensor -> blocks

    def _take_block(self) -> int:
        r = self.region
        if r.in_use_bytes + PAGE_SIZE > r.capacity_bytes:
            raise ReservationOverflow(
                f"reserved region full ({r.in_use_bytes} of {r.capacity_bytes} bytes in use)")
        if self.free_blocks:
            block = self.free_blocks.pop()
        else:
            block = self._next_block
            self._next_block += 1
            r.pages.append(block)
        self._live[block] = 0
        r.in_use_bytes += PAGE_SIZE
        r.high_water_bytes = max(r.high_water_bytes, r.in_use_bytes)
        return block

    def _release_block(self, block: int) -> None:
        del self._live[block]
        self.free_blocks.append(block)
        self.region.in_use_bytes -= PAGE_SIZE
        for key, (b, _) in list(self._open.items()):
            if b == block:
                del self._open[key]

    def alloc(self, obj: ObjectLike) -> list[tuple[int, int, int]]:
        size = obj.size_bytes
        if size >= PAGE_SIZE:
            n = -(-size // PAGE_SIZE)
            if self.region.in_use_bytes + n * PAGE_SIZE > self.region.capacity_bytes:
                raise ReservationOverflow(f"no room for {n} pages of tensor {obj.tensor_id}")
            blocks = [self._take_block() for _ in range(n)]
            for b in blocks:
                self._live[b] = 1
            self._where[obj.tensor_id] = blocks
            out, remaining = [], size
            for b in blocks:
                out.append((b, 0, min(PAGE_SIZE, remaining)))
                remaining -= PAGE_SIZE
            return out
        key = group_key(obj)
        block, fill = self._open.get(key, (None, PAGE_SIZE))
        if block is None or fill + size > PAGE_SIZE:
            block, fill = self._take_block(), 0
        self._live[block] += 1
        self._open[key] = (block, fill + size)
        self._where[obj.tensor_id] = [block]
        return [(block, fill, size)]

    def free(self, obj: ObjectLike) -> None:
        for block in self._where.pop(obj.tensor_id):
            self._live[block] -= 1
            if self._live[block] == 0:
                self._release_block(block)

    def reset(self, capacity_bytes: int) -> None:
        """Re-establish the reservation (interval start)."""
        self.region.capacity_bytes = capacity_bytes


def pool_alloc(pool: MemoryPool, obj: ObjectLike) -> list[tuple[int, int, int]]:
    return pool.alloc(obj)


def pool_free(pool: MemoryPool, obj: ObjectLike) -> None:
    pool.free(obj)
