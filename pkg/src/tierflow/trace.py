"""Append-only event trace shared by the engine, the tiers and the harness.

Every timing and byte metric the harness reports is recomputed from these
events, so the trace is the single source of truth for a run.
"""

from __future__ import annotations

import csv
import json
import threading
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Iterator, Optional

EVENT_KINDS = (
    "prefetch_start", "prefetch_end",
    "update_start", "update_end",
    "flush_start", "flush_end",
    "lock_acquire", "lock_release",
    "h2d_start", "h2d_end",
    "grad_upscale_start", "grad_upscale_end",
    "cache_hit",
)

# start kind -> end kind
SPAN_KINDS = {
    "prefetch_start": "prefetch_end",
    "update_start": "update_end",
    "flush_start": "flush_end",
    "lock_acquire": "lock_release",
    "h2d_start": "h2d_end",
    "grad_upscale_start": "grad_upscale_end",
}


def now_ns() -> int:
    # CLOCK_MONOTONIC is system-wide on Linux, so traces from several
    # processes on one host can be merged and compared directly.
    return time.monotonic_ns()


@dataclass(frozen=True)
class Event:
    timestamp_ns: int
    worker_id: int
    kind: str
    subgroup_id: int = -1
    tier_id: int = -1
    bytes: int = 0
    iteration: int = -1
    phase: str = ""
    payload: str = ""


@dataclass(frozen=True)
class Span:
    """A matched start/end pair."""

    kind: str
    start_ns: int
    end_ns: int
    worker_id: int
    subgroup_id: int
    tier_id: int
    bytes: int
    iteration: int
    phase: str
    payload: str

    @property
    def duration_s(self) -> float:
        return (self.end_ns - self.start_ns) / 1e9


class EventTrace:
    """Thread-safe, append-only list of :class:`Event`."""

    def __init__(self, events: Optional[Iterable[Event]] = None):
        self._events: list[Event] = list(events or [])
        self._lock = threading.Lock()
        self.last_progress_ns = now_ns()

    def record(self, kind: str, worker_id: int = 0, subgroup_id: int = -1,
               tier_id: int = -1, nbytes: int = 0, iteration: int = -1,
               phase: str = "", payload: str = "",
               timestamp_ns: Optional[int] = None) -> Event:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        ts = now_ns() if timestamp_ns is None else timestamp_ns
        ev = Event(ts, worker_id, kind, subgroup_id, tier_id, nbytes,
                   iteration, phase, payload)
        with self._lock:
            self._events.append(ev)
            self.last_progress_ns = ts
        return ev

    def extend(self, events: Iterable[Event]) -> None:
        with self._lock:
            self._events.extend(events)

    def __len__(self) -> int:
        return len(self._events)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.snapshot())

    def snapshot(self) -> list[Event]:
        with self._lock:
            return list(self._events)

    def filter(self, **criteria) -> list[Event]:
        return [e for e in self.snapshot()
                if all(getattr(e, k) == v for k, v in criteria.items())]

    def spans(self, start_kind: str, **criteria) -> list[Span]:
        """Match ``start_kind`` events with their end events.

        Pairs are matched per (worker, subgroup, tier, iteration, phase,
        payload) key in FIFO order. Raises if any start is left unmatched.
        """
        end_kind = SPAN_KINDS[start_kind]
        open_: dict[tuple, list[Event]] = {}
        out: list[Span] = []
        for ev in sorted(self.snapshot(), key=lambda e: e.timestamp_ns):
            if any(getattr(ev, k) != v for k, v in criteria.items()):
                continue
            key = (ev.worker_id, ev.subgroup_id, ev.tier_id, ev.iteration,
                   ev.phase, ev.payload)
            if ev.kind == start_kind:
                open_.setdefault(key, []).append(ev)
            elif ev.kind == end_kind:
                pending = open_.get(key)
                if not pending:
                    raise ValueError(f"{end_kind} without {start_kind}: {ev}")
                st = pending.pop(0)
                out.append(Span(start_kind.rsplit("_", 1)[0], st.timestamp_ns,
                                ev.timestamp_ns, ev.worker_id, ev.subgroup_id,
                                ev.tier_id, max(st.bytes, ev.bytes),
                                ev.iteration, ev.phase, ev.payload))
        leftover = [e for v in open_.values() for e in v]
        if leftover:
            raise ValueError(f"unmatched {start_kind} events: {leftover[:3]}")
        return out

    # -- serialization -------------------------------------------------
    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for ev in self.snapshot():
                f.write(json.dumps(asdict(ev), sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        names = [f.name for f in fields(Event)]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(names)
            for ev in self.snapshot():
                w.writerow([getattr(ev, n) for n in names])

    def write(self, path) -> None:
        """Write as CSV when the suffix is ``.csv``, otherwise JSON lines."""
        if Path(path).suffix == ".csv":
            self.write_csv(path)
        else:
            self.write_jsonl(path)

    @classmethod
    def read(cls, path) -> "EventTrace":
        path = Path(path)
        events = []
        if path.suffix == ".csv":
            types = {f.name: f.type for f in fields(Event)}
            with open(path, newline="") as f:
                for row in csv.DictReader(f):
                    events.append(Event(**{
                        k: (v if types[k] == "str" else int(v))
                        for k, v in row.items()}))
        else:
            with open(path) as f:
                events = [Event(**json.loads(line)) for line in f if line.strip()]
        return cls(events)


def interval_union_length(intervals: Iterable[tuple[int, int]]) -> int:
    """Total length covered by a set of half-open [start, end) intervals."""
    total = 0
    cur_s = cur_e = None
    for s, e in sorted(intervals):
        if cur_e is None or s > cur_e:
            if cur_e is not None:
                total += cur_e - cur_s
            cur_s, cur_e = s, e
        else:
            cur_e = max(cur_e, e)
    if cur_e is not None:
        total += cur_e - cur_s
    return total


def overlapping_pairs(intervals: list[tuple[int, int, int]]) -> list[tuple]:
    """Return pairs of (start, end, owner) intervals that overlap in time."""
    out = []
    ordered = sorted(intervals)
    for a, b in zip(ordered, ordered[1:]):
        if b[0] < a[1]:
            out.append((a, b))
    return out
