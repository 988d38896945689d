"""Bandwidth-proportional placement of subgroups across storage tiers.

Each tier receives ``ceil(M * B_i / sum(B))`` subgroups, then the ceiling
overshoot is removed one subgroup at a time from the tier whose
``T_i / B_i`` (time to serve its share) is currently worst. A final pass
moves single subgroups from the worst tier to any tier that would still
finish earlier, which makes ``max T_i / B_i`` minimal. Tier bandwidths
are re-estimated from observed transfers with an exponential moving average.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .errors import InvalidBandwidthError

HOST = None  # destination marker: keep the subgroup in host memory
_REL_EPS = 1e-9


@dataclass(frozen=True)
class AllocationVector:
    counts: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.counts)

    def __iter__(self):
        return iter(self.counts)

    def __len__(self):
        return len(self.counts)

    def __getitem__(self, i):
        return self.counts[i]


def _ceil_share(m: int, b: float, total: float) -> int:
    q = m * b / total
    r = round(q)
    # snap near-integers so c*B gives the same answer as B
    if abs(q - r) <= _REL_EPS * max(1.0, q):
        return int(r)
    return math.ceil(q)


def assign_subgroups(m: int, bandwidths: Sequence[float]) -> AllocationVector:
    """Split ``m`` subgroups across tiers proportionally to ``bandwidths``."""
    if m < 1:
        raise ValueError("need at least one subgroup")
    bw = [float(b) for b in bandwidths]
    if not bw or any(b < 0 or math.isnan(b) for b in bw):
        raise InvalidBandwidthError(f"invalid bandwidths {bandwidths!r}")
    total = sum(bw)
    if total <= 0:
        raise InvalidBandwidthError("all tier bandwidths are zero")
    counts = [_ceil_share(m, b, total) if b > 0 else 0 for b in bw]
    excess = sum(counts) - m
    while excess > 0:
        worst, worst_ratio = -1, -1.0
        for i, (t, b) in enumerate(zip(counts, bw)):
            if t == 0:
                continue
            ratio = t / b
            # ties (within rounding) go to the higher tier id
            if ratio >= worst_ratio * (1 - _REL_EPS):
                worst, worst_ratio = i, ratio
        counts[worst] -= 1
        excess -= 1
    _rebalance(counts, bw)
    return AllocationVector(tuple(counts))


def _rebalance(counts: list[int], bw: list[float]) -> None:
    """Move subgroups off the worst tier while some tier can take one more
    and still finish earlier. At the fixed point no vector with the same
    total has a smaller ``max T_i / B_i``.
    """
    live = [i for i, b in enumerate(bw) if b > 0]
    while True:
        worst = max((i for i in live if counts[i] > 0),
                    key=lambda i: (counts[i] / bw[i], i))
        top = counts[worst] / bw[worst]
        target = min(live, key=lambda j: ((counts[j] + 1) / bw[j], j))
        if (counts[target] + 1) / bw[target] >= top * (1 - _REL_EPS):
            return
        counts[worst] -= 1
        counts[target] += 1


def completion_ratio(alloc: Sequence[int], bandwidths: Sequence[float]) -> float:
    """``max_i T_i / B_i`` over tiers that received subgroups."""
    return max((t / b for t, b in zip(alloc, bandwidths) if t > 0), default=0.0)


@dataclass
class BandwidthEstimate:
    """Per-tier read and write bandwidth tracked with an EMA."""

    read_bw: list[float]
    write_bw: list[float]
    alpha: float = 0.5
    sample_count: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if len(self.read_bw) != len(self.write_bw):
            raise ValueError("read/write vectors differ in length")
        if not self.sample_count:
            self.sample_count = [0] * len(self.read_bw)

    @classmethod
    def from_tiers(cls, specs, alpha: float = 0.5) -> "BandwidthEstimate":
        return cls([s.read_bw for s in specs], [s.write_bw for s in specs], alpha)

    @property
    def effective_bw(self) -> list[float]:
        return [min(r, w) for r, w in zip(self.read_bw, self.write_bw)]


def _mean_rate(stats) -> Optional[float]:
    rates = [s.bytes / s.duration for s in stats if s.duration > 0 and s.bytes > 0]
    return sum(rates) / len(rates) if rates else None


def update_bandwidth_estimates(est: BandwidthEstimate,
                               observed: Mapping[int, Mapping[str, Sequence]]
                               ) -> BandwidthEstimate:
    """Blend observed transfer rates into ``est``; returns a new estimate.

    ``observed`` maps tier id to ``{"read": [IOStats...], "write": [...]}``.
    Directions without observations keep their previous value.
    """
    a = est.alpha
    read, write = list(est.read_bw), list(est.write_bw)
    counts = list(est.sample_count)
    for tier_id, by_dir in observed.items():
        r = _mean_rate(by_dir.get("read", ()))
        w = _mean_rate(by_dir.get("write", ()))
        if r is not None:
            read[tier_id] = (1 - a) * read[tier_id] + a * r
        if w is not None:
            write[tier_id] = (1 - a) * write[tier_id] + a * w
        counts[tier_id] += len(by_dir.get("read", ())) + len(by_dir.get("write", ()))
    return BandwidthEstimate(read, write, a, counts)


def assign_storage_tiers(order: Sequence[int], bandwidths: Sequence[float],
                         retain: int, tier_ids: Optional[Sequence[int]] = None
                         ) -> dict[int, Optional[int]]:
    """Flush destination for every subgroup in ``order``.

    The last ``retain`` subgroups of ``order`` stay in host memory
    (:data:`HOST`). The others are flushed; the allocation for them is
    ``assign_subgroups(len(order) - retain, bandwidths)``, handed out in
    update order by smooth weighted round-robin so every prefix of the
    order is split across tiers close to the allocation ratio.
    """
    tier_ids = list(range(len(bandwidths))) if tier_ids is None else list(tier_ids)
    m = len(order)
    retain = max(0, min(retain, m))
    flushed = list(order[:m - retain])
    dest: dict[int, Optional[int]] = {i: HOST for i in order[m - retain:]}
    if flushed:
        alloc = list(assign_subgroups(len(flushed), bandwidths))
        credit = [0] * len(alloc)
        for i in flushed:
            for j, a in enumerate(alloc):
                credit[j] += a
            k = max(range(len(alloc)), key=lambda j: (credit[j], -j))
            credit[k] -= len(flushed)
            dest[i] = tier_ids[k]
    return dest


def assign_storage_tier(subgroup_id: int, destinations: Mapping[int, Optional[int]]
                        ) -> Optional[int]:
    """Destination tier of ``subgroup_id`` in a plan, or ``None`` to retain."""
    return destinations[subgroup_id]
