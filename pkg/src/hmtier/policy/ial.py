"""Improved-active-list baseline: page-granular FIFO lists with periodic promotion.

Pages carry no object semantics. New pages sit on the inactive list in
first-touch order. At the end of every period, pages touched at least
``promote_threshold`` times move to the tail of the active list, the lists are
balanced by deactivating the oldest active pages, and active pages that sit
in SLOW are exchanged with the oldest inactive pages in FAST.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ..allocator import Tier


@dataclass(frozen=True)
class IALConfig:
    period_s: float = 5.0
    promote_threshold: int = 2
    copy_parallelism: int = 4
    per_thread_bandwidth_bytes_per_s: float = 6e9

    def __post_init__(self):
        if self.period_s <= 0:
            raise ValueError("period_s must be > 0")
        if self.promote_threshold < 1:
            raise ValueError("promote_threshold must be >= 1")
        if self.copy_parallelism < 1 or self.per_thread_bandwidth_bytes_per_s <= 0:
            raise ValueError("copy parallelism and per-thread bandwidth must be positive")

    def effective_bandwidth(self, channel_bytes_per_s: float) -> float:
        return min(self.copy_parallelism * self.per_thread_bandwidth_bytes_per_s, channel_bytes_per_s)


@dataclass
class IALState:
    """Page tiers plus the two LRU-ordered lists (insertion order = age)."""

    tier: np.ndarray  # int8 per page, Tier values
    active: OrderedDict = field(default_factory=OrderedDict)
    inactive: OrderedDict = field(default_factory=OrderedDict)

    @property
    def fast_pages(self) -> int:
        return int(np.count_nonzero(self.tier == Tier.FAST))


def first_touch(order: np.ndarray, num_pages: int, capacity_pages: int) -> IALState:
    """FAST goes to the first ``capacity_pages`` pages in touch ``order``; all start inactive."""
    tier = np.full(num_pages, Tier.SLOW, dtype=np.int8)
    tier[order[:max(0, capacity_pages)]] = Tier.FAST
    st = IALState(tier)
    for p in order.tolist():
        st.inactive[p] = None
    return st


@dataclass
class PeriodMoves:
    promoted: list[int]
    demoted: list[int]

    @property
    def pages(self) -> int:
        return len(self.promoted) + len(self.demoted)


def ial_period(st: IALState, page_counts: np.ndarray, capacity_pages: int, cfg: IALConfig) -> PeriodMoves:
    """List maintenance for one period; returns the page moves (tiers are not flipped here)."""
    for p in np.flatnonzero(page_counts >= cfg.promote_threshold).tolist():
        if p in st.inactive:
            del st.inactive[p]
            st.active[p] = None
        elif p not in st.active:
            st.active[p] = None
    while len(st.active) > max(1, len(st.inactive)):
        p, _ = st.active.popitem(last=False)
        st.inactive[p] = None

    free = capacity_pages - st.fast_pages
    victims = (p for p in st.inactive if st.tier[p] == Tier.FAST)
    promoted, demoted = [], []
    for p in st.active:
        if st.tier[p] == Tier.FAST:
            continue
        if free <= 0:
            v = next(victims, None)
            if v is None:
                break
            demoted.append(v)
            free += 1
        promoted.append(p)
        free -= 1
    return PeriodMoves(promoted, demoted)


def apply_moves(st: IALState, moves: PeriodMoves) -> None:
    st.tier[moves.demoted] = Tier.SLOW
    st.tier[moves.promoted] = Tier.FAST
