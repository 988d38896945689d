"""Metrics recomputed from the event trace."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

from ..optimizer import update_throughput
from ..trace import EventTrace, interval_union_length, overlapping_pairs


@dataclass
class SubgroupIO:
    worker_id: int
    subgroup_id: int
    size: int          # optimizer state bytes
    read_time: float   # seconds spent fetching (state and, if any, gradients)
    write_time: float


def effective_io_throughput(records: Iterable[SubgroupIO]) -> Optional[float]:
    """Mean over transferred subgroups of ``2 * size / (read + write)``.

    Subgroups without any I/O (host retained) are excluded; returns
    ``None`` when nothing was transferred.
    """
    vals = [2 * r.size / (r.read_time + r.write_time)
            for r in records if r.read_time + r.write_time > 0]
    return sum(vals) / len(vals) if vals else None


def subgroup_io(trace: EventTrace, iteration: int,
                worker_id: Optional[int] = None) -> list[SubgroupIO]:
    crit = {"iteration": iteration, "phase": "update"}
    if worker_id is not None:
        crit["worker_id"] = worker_id
    acc: dict[tuple, SubgroupIO] = {}

    def rec(span):
        key = (span.worker_id, span.subgroup_id)
        if key not in acc:
            acc[key] = SubgroupIO(span.worker_id, span.subgroup_id, 0, 0.0, 0.0)
        return acc[key]

    for s in trace.spans("prefetch_start", **crit):
        r = rec(s)
        r.read_time += s.duration_s
        if s.payload == "state":
            r.size = s.bytes
    for s in trace.spans("flush_start", **crit):
        r = rec(s)
        r.write_time += s.duration_s
        r.size = s.bytes
    return sorted(acc.values(), key=lambda r: (r.worker_id, r.subgroup_id))


def tier_busy_seconds(trace: EventTrace, iteration: int, phase: str = "update"
                      ) -> dict[int, float]:
    """Per tier, the time covered by at least one transfer."""
    spans = defaultdict(list)
    for kind in ("prefetch_start", "flush_start"):
        for s in trace.spans(kind, iteration=iteration, phase=phase):
            spans[s.tier_id].append((s.start_ns, s.end_ns))
    return {t: interval_union_length(iv) / 1e9 for t, iv in sorted(spans.items())}


def tier_bytes(trace: EventTrace, iteration: int, phase: str, kind: str) -> dict[int, int]:
    out: dict[int, int] = defaultdict(int)
    for ev in trace.filter(kind=kind, iteration=iteration, phase=phase):
        out[ev.tier_id] += ev.bytes
    return dict(sorted(out.items()))


def lock_overlaps(trace: EventTrace) -> dict[int, list]:
    """Overlapping held-lock intervals per tier (empty lists when exclusive)."""
    by_tier = defaultdict(list)
    for s in trace.spans("lock_acquire"):
        by_tier[s.tier_id].append((s.start_ns, s.end_ns, s.worker_id))
    return {t: overlapping_pairs(iv) for t, iv in sorted(by_tier.items())}


def compute_seconds(trace: EventTrace, iteration: int, worker_id: Optional[int] = None
                    ) -> float:
    crit = {"iteration": iteration}
    if worker_id is not None:
        crit["worker_id"] = worker_id
    total = 0.0
    for kind in ("update_start", "grad_upscale_start", "h2d_start"):
        total += sum(s.duration_s for s in trace.spans(kind, **crit))
    return total


@dataclass
class IterationReport:
    iteration: int
    forward_s: float
    backward_s: float
    update_s: float
    update_throughput_mps: float
    effective_io_bps: Optional[float]
    tier_bytes_read: dict
    tier_bytes_written: dict
    backward_tier_write_bytes: int
    tier_busy_s: dict
    distribution: dict
    allocation: list
    cache_hits: int
    fp16_overflows: int
    skipped: bool
    compute_s: float

    @property
    def iter_s(self) -> float:
        return self.forward_s + self.backward_s + self.update_s

    def to_dict(self) -> dict:
        d = asdict(self)
        d["iter_s"] = self.iter_s
        return d


def build_iteration_report(trace: EventTrace, iteration: int, forward_s: float,
                           backward_phases: Sequence, update_phases: Sequence,
                           distributions: Sequence[dict], params_per_worker: Sequence[int]
                           ) -> IterationReport:
    """Combine per-worker phase results and the trace into one report.

    Phase wall times span from the earliest worker start to the latest end.
    """
    def wall(phases):
        if not phases:
            return 0.0
        return (max(p.end_ns for p in phases) - min(p.start_ns for p in phases)) / 1e9

    update_s = wall(update_phases)
    skipped = any(p.skipped for p in update_phases)
    n_params = 0 if skipped else sum(params_per_worker)
    total_params = sum(params_per_worker)
    host = sum(d["host"] * n for d, n in zip(distributions, params_per_worker)) / total_params
    tier_pct: dict = defaultdict(float)
    for d, n in zip(distributions, params_per_worker):
        for t, pct in d["tiers"].items():
            tier_pct[t] += pct * n / total_params
    alloc: list = []
    for p in update_phases:
        for t, c in enumerate(p.allocation):
            if t >= len(alloc):
                alloc.append(0)
            alloc[t] += c
    return IterationReport(
        iteration=iteration,
        forward_s=forward_s,
        backward_s=wall(backward_phases),
        update_s=update_s,
        update_throughput_mps=update_throughput(n_params, update_s) if update_s > 0 else 0.0,
        effective_io_bps=effective_io_throughput(subgroup_io(trace, iteration)),
        tier_bytes_read=tier_bytes(trace, iteration, "update", "prefetch_end"),
        tier_bytes_written=tier_bytes(trace, iteration, "update", "flush_end"),
        backward_tier_write_bytes=sum(
            tier_bytes(trace, iteration, "backward", "flush_end").values()),
        tier_busy_s=tier_busy_seconds(trace, iteration),
        distribution={"host": host, "tiers": dict(sorted(tier_pct.items()))},
        allocation=alloc,
        cache_hits=sum(p.cache_hits for p in update_phases),
        fp16_overflows=sum(p.fp16_overflows for p in update_phases),
        skipped=skipped,
        compute_s=compute_seconds(trace, iteration),
    )
