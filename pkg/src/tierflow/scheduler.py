"""Overlapped prefetch / update / flush pipeline over multiple storage tiers.

One :class:`OffloadEngine` drives the update phase for one worker's shard.
The coordinator (the caller's thread) walks the subgroups in plan order:
wait for the subgroup to be host resident, upscale its FP16 gradients,
run Adam, push FP16 params to the (emulated) device, then either retain
it in host memory or hand it to a tier's I/O worker for a lazy flush.
Prefetches of upcoming subgroups are issued whenever a host buffer slot
is free, so transfers on different tiers proceed in parallel with the
update of the current subgroup.

The four feature flags reproduce the ablation steps. With all of them off
the engine behaves like the ZeRO-3 data flow: a single tier, ascending
order every iteration, no host retention, FP32 gradients flushed during
backward and fetched back alongside the optimizer state.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import logging
import threading
import time
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import placement
from .errors import CancelledError, GradientOverflowError, SchedulingError
from .locks import TierLockManager
from .optimizer import AdamHyper, Residency, Subgroup, adam_step
from .precision import GradBufferF16, downscale_f32_to_f16, upscale_f16_to_f32
from .tier import IOStats, Tier, gradient_filename, read_gradient, read_subgroup, \
    subgroup_filename, write_gradient, write_subgroup
from .trace import EventTrace, now_ns

log = logging.getLogger(__name__)

PREFETCH_PRIORITY = 0
FLUSH_PRIORITY = 1
MIN_POOL_SLOTS = 3


@dataclass(frozen=True)
class EngineFlags:
    """Feature switches; all on is the full engine, all off the baseline."""

    enable_caching: bool = True
    skip_gradients: bool = True
    atomic_rw: bool = True
    multi_path: bool = True

    @classmethod
    def engine(cls) -> "EngineFlags":
        return cls()

    @classmethod
    def baseline(cls) -> "EngineFlags":
        return cls(False, False, False, False)

    @property
    def is_baseline(self) -> bool:
        return not any((self.enable_caching, self.skip_gradients,
                        self.atomic_rw, self.multi_path))


# -- plans --------------------------------------------------------------------

@dataclass
class UpdatePlan:
    iteration: int
    order: list[int]
    tier_origin: dict[int, Optional[int]]
    tier_destination: dict[int, Optional[int]]

    @property
    def ascending(self) -> bool:
        return self.order == sorted(self.order)


def update_order(iteration: int, m: int, alternate: bool = True) -> list[int]:
    """Ascending on the first update phase, then alternating."""
    asc = list(range(m))
    if alternate and (iteration - 1) % 2 == 1:
        return asc[::-1]
    return asc


def next_subgroup(i: int, plan: UpdatePlan) -> Optional[int]:
    pos = plan.order.index(i)
    return plan.order[pos + 1] if pos + 1 < len(plan.order) else None


# -- host buffer pool ---------------------------------------------------------

class SlotState(str, enum.Enum):
    FREE = "free"
    PREFETCHING = "prefetching"
    UPDATING = "updating"
    FLUSHING = "flushing"
    CACHED = "cached"


class HostBufferPool:
    """Fixed set of host slots, each large enough for one subgroup's
    params, momentum, variance and an FP32 gradient row."""

    def __init__(self, slot_count: int, slot_params: int):
        if slot_count < MIN_POOL_SLOTS:
            raise ValueError(f"pool needs at least {MIN_POOL_SLOTS} slots")
        self.slot_count = slot_count
        self.slot_params = slot_params
        self.buffers = np.zeros((slot_count, 4, slot_params), dtype=np.float32)
        self.state = [SlotState.FREE] * slot_count
        self.owner: list[Optional[int]] = [None] * slot_count
        self._cv = threading.Condition()

    def views(self, slot: int, n: int) -> tuple[np.ndarray, ...]:
        """(params, momentum, variance, grad) views of length ``n``."""
        row = self.buffers[slot]
        return row[0, :n], row[1, :n], row[2, :n], row[3, :n]

    def try_reserve(self, owner: int, state=SlotState.PREFETCHING) -> Optional[int]:
        with self._cv:
            for k, st in enumerate(self.state):
                if st is SlotState.FREE:
                    self.state[k], self.owner[k] = state, owner
                    return k
        return None

    def reserve(self, owner: int, state=SlotState.PREFETCHING,
                timeout: Optional[float] = None) -> int:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while True:
                for k, st in enumerate(self.state):
                    if st is SlotState.FREE:
                        self.state[k], self.owner[k] = state, owner
                        return k
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    raise SchedulingError(
                        f"no free host slot for subgroup {owner}: {self.state}")
                self._cv.wait(left)

    def set_state(self, slot: int, state: SlotState) -> None:
        with self._cv:
            if self.state[slot] is SlotState.FREE:
                raise RuntimeError(f"slot {slot} is not reserved")
            self.state[slot] = state

    def release(self, slot: int) -> None:
        with self._cv:
            self.state[slot], self.owner[slot] = SlotState.FREE, None
            self._cv.notify_all()

    def wait_change(self, timeout: float) -> None:
        with self._cv:
            self._cv.wait(timeout)

    def count(self, state: SlotState) -> int:
        with self._cv:
            return sum(1 for s in self.state if s is state)


# -- per-tier I/O workers -----------------------------------------------------

class TierIOWorker:
    """Background threads executing one tier's transfers.

    Jobs run in priority order (prefetches before flushes). With
    ``exclusive`` set, each job runs while holding the node-level tier lock.
    """

    def __init__(self, tier: Tier, locks: Optional[TierLockManager], worker_id: int,
                 threads: int = 1, exclusive: bool = True):
        self.tier = tier
        self.locks = locks
        self.worker_id = worker_id
        self.exclusive = exclusive and locks is not None
        self._heap: list = []
        self._seq = itertools.count()
        self._cv = threading.Condition()
        self._closed = False
        self._threads = [threading.Thread(target=self._run, daemon=True,
                                          name=f"io-w{worker_id}-t{tier.tier_id}-{k}")
                         for k in range(threads)]
        for t in self._threads:
            t.start()

    def submit(self, priority: int, fn: Callable[[], object], **lock_fields) -> Future:
        fut: Future = Future()
        with self._cv:
            if self._closed:
                fut.set_exception(CancelledError("I/O worker is shut down"))
                return fut
            heapq.heappush(self._heap, (priority, next(self._seq), fut, fn, lock_fields))
            self._cv.notify()
        return fut

    def _run(self) -> None:
        while True:
            with self._cv:
                while not self._heap and not self._closed:
                    self._cv.wait()
                if not self._heap:
                    return
                _, _, fut, fn, lock_fields = heapq.heappop(self._heap)
            if not fut.set_running_or_notify_cancel():
                continue
            try:
                if self.exclusive:
                    with self.locks.acquire(self.tier.tier_id, self.worker_id,
                                            **lock_fields):
                        result = fn()
                else:
                    result = fn()
            except BaseException as exc:  # propagated to the awaiting coordinator
                fut.set_exception(exc)
            else:
                fut.set_result(result)

    def shutdown(self) -> None:
        with self._cv:
            self._closed = True
            for _, _, fut, _, _ in self._heap:
                if fut.set_running_or_notify_cancel():
                    fut.set_exception(CancelledError("I/O worker shut down"))
            self._heap.clear()
            self._cv.notify_all()
        for t in self._threads:
            t.join()


# -- gradient source ----------------------------------------------------------

class SyntheticGradients:
    """Deterministic FP16 gradients keyed by (seed, iteration, micro-step,
    subgroup). ``poison`` lists (iteration, subgroup_id) pairs whose
    gradients get an Inf, for exercising the overflow path."""

    def __init__(self, seed: int = 0, scale: float = 1e-2,
                 poison: Sequence[tuple[int, int]] = ()):
        self.seed = seed
        self.scale = scale
        self.poison = set(map(tuple, poison))

    def __call__(self, subgroup_id: int, iteration: int, micro: int, n: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, iteration, micro, subgroup_id])
        g = rng.standard_normal(n, dtype=np.float32)
        g *= np.float32(self.scale)
        g16 = g.astype(np.float16)
        if (iteration, subgroup_id) in self.poison:
            g16[0] = np.inf
        return g16


# -- engine -------------------------------------------------------------------

@dataclass
class PhaseResult:
    """Per-phase outcome returned to the harness; detailed metrics come
    from the trace."""

    iteration: int
    phase: str
    wall_s: float
    start_ns: int
    end_ns: int
    skipped: bool = False
    cache_hits: int = 0
    fp16_overflows: int = 0
    destinations: dict = field(default_factory=dict)
    allocation: tuple = ()
    io: dict = field(default_factory=dict)


@dataclass
class _Pending:
    futures: list
    slot: int


class OffloadEngine:
    """Multi-tier offloading engine for one worker's shard of subgroups."""

    def __init__(self, tiers: Sequence[Tier], param_counts: Sequence[int],
                 hyper: AdamHyper = AdamHyper(), flags: EngineFlags = EngineFlags(),
                 pool_slots: int = 4, retain: Optional[int] = None,
                 worker_id: int = 0, id_offset: int = 0,
                 locks: Optional[TierLockManager] = None,
                 trace: Optional[EventTrace] = None,
                 alpha: float = 0.5, ratio: Optional[Sequence[float]] = None,
                 adaptive: bool = True, seed: int = 0,
                 deadlock_timeout: float = 30.0,
                 compute_threads: Optional[int] = None,
                 poll_interval: float = 0.002):
        if not tiers:
            raise ValueError("need at least one tier")
        self.tiers = list(tiers)
        self.flags = flags
        self.hyper = hyper
        self.worker_id = worker_id
        self.trace = trace if trace is not None else EventTrace()
        if locks is None and flags.atomic_rw:
            locks = TierLockManager(trace=self.trace)
        elif locks is not None and locks.trace is None:
            locks.trace = self.trace
        self.locks = locks
        self.active_tiers = self.tiers if flags.multi_path else self.tiers[:1]
        self.ratio = list(ratio) if ratio else None
        if self.ratio and len(self.ratio) < len(self.active_tiers):
            raise ValueError("placement ratio needs one entry per active tier")
        self.adaptive = adaptive and self.ratio is None
        self.estimate = placement.BandwidthEstimate.from_tiers(
            [t.spec for t in self.tiers], alpha)
        self.seed = seed
        self.deadlock_timeout = deadlock_timeout
        self.compute_threads = compute_threads
        self.poll_interval = poll_interval

        m = len(param_counts)
        if m < 1:
            raise ValueError("need at least one subgroup")
        self.subgroups = [Subgroup(id_offset + k, int(p)) for k, p in enumerate(param_counts)]
        self.grad_buffers = [GradBufferF16(int(p)) for p in param_counts]
        self.device_params = [np.zeros(int(p), dtype=np.float16) for p in param_counts]
        self.pool = HostBufferPool(pool_slots, max(param_counts))
        if flags.enable_caching:
            default_retain = pool_slots - MIN_POOL_SLOTS
            self.retain = default_retain if retain is None else min(retain, default_retain)
        else:
            self.retain = 0
        io_threads = {}
        for t in self.active_tiers:
            # without tier locks, prefetch and flush streams may hit a tier at once
            io_threads[t.tier_id] = 1 if flags.atomic_rw else max(2, t.spec.io_parallelism)
        self.io = {t.tier_id: TierIOWorker(t, self.locks, worker_id, io_threads[t.tier_id],
                                           exclusive=flags.atomic_rw)
                   for t in self.active_tiers}
        self._tier_by_id = {t.tier_id: t for t in self.tiers}
        self._pending: dict[int, _Pending] = {}
        self._flushes: list[Future] = []
        self._io_log: list[tuple[int, str, IOStats]] = []
        self._io_lock = threading.Lock()
        self.overflow_skip = False
        self.last_plan: Optional[UpdatePlan] = None
        self.closed = False

    # -- bookkeeping --------------------------------------------------------
    @property
    def m(self) -> int:
        return len(self.subgroups)

    def _record(self, kind, sg: Optional[Subgroup] = None, **kw):
        if sg is not None:
            kw.setdefault("subgroup_id", sg.subgroup_id)
        return self.trace.record(kind, self.worker_id, **kw)

    def _log_io(self, tier_id: int, direction: str, stats: IOStats) -> None:
        with self._io_lock:
            self._io_log.append((tier_id, direction, stats))

    def _take_io_log(self) -> dict:
        with self._io_lock:
            log_, self._io_log = self._io_log, []
        out: dict[int, dict[str, list]] = {}
        for tier_id, direction, stats in log_:
            out.setdefault(tier_id, {"read": [], "write": []})[direction].append(stats)
        return out

    def _bandwidths(self) -> list[float]:
        if self.ratio:
            return [float(r) for r in self.ratio[:len(self.active_tiers)]]
        eff = self.estimate.effective_bw
        return [eff[t.tier_id] for t in self.active_tiers]

    def _check_progress(self, what: str) -> None:
        idle = (now_ns() - self.trace.last_progress_ns) / 1e9
        if idle > self.deadlock_timeout:
            raise SchedulingError(
                f"worker {self.worker_id}: no progress for {idle:.1f}s while {what}; "
                f"slots={[s.value for s in self.pool.state]}")

    def _wait(self, futures: Sequence[Future], what: str, pump=None) -> list:
        while True:
            if pump is not None:
                pump()
            if all(f.done() for f in futures):
                return [f.result() for f in futures]
            pending = [f for f in futures if not f.done()]
            try:
                pending[0].result(timeout=self.poll_interval)
            except FutureTimeout:
                self._check_progress(what)
            except Exception:
                # surfaced by the result() loop above once everything settles
                if all(f.done() for f in futures):
                    return [f.result() for f in futures]

    # -- setup ----------------------------------------------------------------
    def initialize(self, params: Optional[Sequence[np.ndarray]] = None) -> PhaseResult:
        """Create every subgroup on the host and flush it to its tier.

        Parameters are seeded per subgroup id unless given explicitly.
        """
        t0 = now_ns()
        order = list(range(self.m))
        dest = placement.assign_storage_tiers(
            order, self._bandwidths(), 0, [t.tier_id for t in self.active_tiers])
        futures = []
        for k in order:
            sg = self.subgroups[k]
            rng = np.random.default_rng([self.seed, sg.subgroup_id])
            fresh = Subgroup.allocate(sg.subgroup_id, sg.param_count, rng)
            if params is not None:
                fresh.params[...] = params[k]
            sg.bind(fresh.params, fresh.momentum, fresh.variance)
            sg.residency = Residency.HOST_CACHED
            futures.append(self._enqueue_flush(sg, dest[k], iteration=0, phase="init",
                                               slot=None))
        self._wait(futures, "initial flush")
        self._take_io_log()
        t1 = now_ns()
        return PhaseResult(0, "init", (t1 - t0) / 1e9, t0, t1, destinations=dest)

    # -- I/O --------------------------------------------------------------------
    def _enqueue_flush(self, sg: Subgroup, tier_id: int, iteration: int,
                       phase: str = "update", slot: Optional[int] = None) -> Future:
        tier = self._tier_by_id[tier_id]
        old_tier = sg.tier_id
        sg.transition(Residency.IN_FLIGHT)
        if slot is not None:
            self.pool.set_state(slot, SlotState.FLUSHING)
        nbytes = sg.state_bytes

        def job():
            self._record("flush_start", sg, tier_id=tier_id, nbytes=nbytes,
                         iteration=iteration, phase=phase, payload="state")
            stats = write_subgroup(tier, sg)
            self._record("flush_end", sg, tier_id=tier_id, nbytes=nbytes,
                         iteration=iteration, phase=phase, payload="state")
            self._log_io(tier_id, "write", stats)
            if old_tier is not None and old_tier != tier_id:
                self._tier_by_id[old_tier].delete(subgroup_filename(sg.subgroup_id))
            sg.transition(Residency.ON_TIER, tier_id)
            sg.unbind()
            if slot is not None:
                self.pool.release(slot)
            return stats

        return self.io[tier_id].submit(FLUSH_PRIORITY, job, subgroup_id=sg.subgroup_id,
                                       iteration=iteration, phase=phase)

    def async_h2f_flush(self, sg: Subgroup, tier_id: int, iteration: int) -> Future:
        fut = self._enqueue_flush(sg, tier_id, iteration, slot=sg.slot)
        self._flushes.append(fut)
        return fut

    def _grad_row(self, k: int) -> np.ndarray:
        sg = self.subgroups[k]
        return self.pool.views(sg.slot, sg.param_count)[3]

    def _enqueue_grad_read(self, k: int, slot: int, iteration: int) -> Future:
        sg = self.subgroups[k]
        tier = self.tiers[0]
        out = self.pool.views(slot, sg.param_count)[3]
        nbytes = 4 * sg.param_count

        def job():
            self._record("prefetch_start", sg, tier_id=tier.tier_id, nbytes=nbytes,
                         iteration=iteration, phase="update", payload="grad")
            stats = read_gradient(tier, sg.subgroup_id, out)
            self._record("prefetch_end", sg, tier_id=tier.tier_id, nbytes=nbytes,
                         iteration=iteration, phase="update", payload="grad")
            self._log_io(tier.tier_id, "read", stats)
            return stats

        return self.io[tier.tier_id].submit(PREFETCH_PRIORITY, job,
                                            subgroup_id=sg.subgroup_id,
                                            iteration=iteration, phase="update")

    def async_f2h_prefetch(self, k: int, iteration: int,
                           slot: Optional[int] = None) -> Optional[_Pending]:
        """Queue the transfer of subgroup ``k`` into host memory.

        Reads from the subgroup's actual tier. Host-resident subgroups need
        no state transfer (and in gradient-fetch mode only their FP32
        gradient row is read). Returns ``None`` when no slot is free.
        """
        if k in self._pending:
            return self._pending[k]
        sg = self.subgroups[k]
        futures = []
        if sg.residency is Residency.HOST_CACHED:
            slot = sg.slot
        else:
            if slot is None:
                slot = self.pool.try_reserve(k)
                if slot is None:
                    return None
            origin = sg.tier_id
            tier = self._tier_by_id[origin]
            p, mo, v, _ = self.pool.views(slot, sg.param_count)
            nbytes = sg.state_bytes
            sg.transition(Residency.IN_FLIGHT)

            def job():
                self._record("prefetch_start", sg, tier_id=origin, nbytes=nbytes,
                             iteration=iteration, phase="update", payload="state")
                _, stats = read_subgroup(tier, sg.subgroup_id, sg.param_count,
                                         out=(p, mo, v))
                self._record("prefetch_end", sg, tier_id=origin, nbytes=nbytes,
                             iteration=iteration, phase="update", payload="state")
                self._log_io(origin, "read", stats)
                return stats

            if origin in self.io:
                futures.append(self.io[origin].submit(
                    PREFETCH_PRIORITY, job, subgroup_id=sg.subgroup_id,
                    iteration=iteration, phase="update"))
            else:
                # state left on a tier that is not active in this run
                futures.append(self._direct(tier, job))
        if not self.flags.skip_gradients:
            futures.append(self._enqueue_grad_read(k, slot, iteration))
        pending = _Pending(futures, slot)
        self._pending[k] = pending
        return pending

    def _direct(self, tier: Tier, job) -> Future:
        fut: Future = Future()
        try:
            if self.locks is not None:
                with self.locks.acquire(tier.tier_id, self.worker_id):
                    fut.set_result(job())
            else:
                fut.set_result(job())
        except BaseException as exc:
            fut.set_exception(exc)
        return fut

    def f2h_prefetch_wait_subgroup(self, k: int, iteration: int, pump=None) -> Subgroup:
        """Block until subgroup ``k`` is host resident and return it."""
        sg = self.subgroups[k]
        # only retained subgroups are HOST_CACHED before their wait completes
        hit = sg.residency is Residency.HOST_CACHED
        if hit:
            self._record("cache_hit", sg, tier_id=-1, iteration=iteration,
                         phase="update")
        pending = self._pending.get(k)
        if pending is None and not (hit and self.flags.skip_gradients):
            slot = None
            if sg.residency is not Residency.HOST_CACHED:
                slot = self.pool.reserve(k, timeout=self.deadlock_timeout)
            pending = self.async_f2h_prefetch(k, iteration, slot)
        if pending is not None:
            self._wait(pending.futures, f"prefetching subgroup {sg.subgroup_id}", pump)
            del self._pending[k]
            if sg.residency is Residency.IN_FLIGHT:
                p, mo, v, _ = self.pool.views(pending.slot, sg.param_count)
                sg.bind(p, mo, v)
                sg.slot = pending.slot
                sg.transition(Residency.HOST_CACHED)
        self.pool.set_state(sg.slot, SlotState.UPDATING)
        return sg

    # -- planning -------------------------------------------------------------
    def plan(self, iteration: int) -> UpdatePlan:
        order = update_order(iteration, self.m, self.flags.enable_caching)
        local_dest = placement.assign_storage_tiers(
            order, self._bandwidths(), self.retain,
            [t.tier_id for t in self.active_tiers])
        origin = {k: (None if sg.residency is Residency.HOST_CACHED else sg.tier_id)
                  for k, sg in enumerate(self.subgroups)}
        return UpdatePlan(iteration, order, origin, local_dest)

    # -- phases -----------------------------------------------------------------
    def run_backward_sim(self, iteration: int, grad_source: Callable,
                         accumulation_steps: int = 1,
                         compute_s: float = 0.0) -> PhaseResult:
        """Fill the FP16 gradient buffers for ``iteration``.

        Without ``skip_gradients`` the accumulated gradients are also
        upscaled to FP32 and flushed to tier 0, as ZeRO-3 does.
        """
        t0 = now_ns()
        for micro in range(accumulation_steps):
            if compute_s:
                time.sleep(compute_s)
            for k in reversed(range(self.m)):
                sg = self.subgroups[k]
                buf = self.grad_buffers[k]
                if micro == 0:
                    buf.reset()
                buf.accumulate(grad_source(sg.subgroup_id, iteration, micro,
                                           sg.param_count))
        self.overflow_skip = not all(b.is_finite() for b in self.grad_buffers)
        futures = []
        if not self.flags.skip_gradients and not self.overflow_skip:
            tier = self.tiers[0]
            for k in reversed(range(self.m)):
                sg = self.subgroups[k]
                g32 = upscale_f16_to_f32(self.grad_buffers[k].data,
                                         threads=self.compute_threads)
                futures.append(self.io[tier.tier_id].submit(
                    FLUSH_PRIORITY, self._grad_flush_job(tier, sg, g32, iteration),
                    subgroup_id=sg.subgroup_id, iteration=iteration, phase="backward"))
        self._wait(futures, "flushing FP32 gradients")
        t1 = now_ns()
        return PhaseResult(iteration, "backward", (t1 - t0) / 1e9, t0, t1,
                           skipped=self.overflow_skip)

    def _grad_flush_job(self, tier: Tier, sg: Subgroup, g32: np.ndarray, iteration: int):
        nbytes = g32.nbytes

        def job():
            self._record("flush_start", sg, tier_id=tier.tier_id, nbytes=nbytes,
                         iteration=iteration, phase="backward", payload="grad")
            stats = write_gradient(tier, sg.subgroup_id, g32)
            self._record("flush_end", sg, tier_id=tier.tier_id, nbytes=nbytes,
                         iteration=iteration, phase="backward", payload="grad")
            self._log_io(tier.tier_id, "write", stats)
            return stats

        return job

    def run_update(self, iteration: int) -> PhaseResult:
        """One update phase: every subgroup updated exactly once with
        timestep ``iteration``."""
        if iteration < 1:
            raise ValueError("iterations are numbered from 1")
        t0 = now_ns()
        if self.overflow_skip:
            log.warning("worker %d: non-finite gradients, skipping step %d",
                        self.worker_id, iteration)
            t1 = now_ns()
            return PhaseResult(iteration, "update", (t1 - t0) / 1e9, t0, t1, skipped=True)
        stuck = [sg.subgroup_id for sg in self.subgroups
                 if sg.residency is Residency.IN_FLIGHT]
        if stuck:
            raise SchedulingError(f"subgroups still in flight: {stuck}")
        plan = self.plan(iteration)
        self.last_plan = plan
        order = plan.order
        cursor = [0]

        def pump():
            # issue prefetches in plan order while host slots are free
            while cursor[0] < len(order):
                k = order[cursor[0]]
                sg = self.subgroups[k]
                if sg.residency is Residency.HOST_CACHED:
                    if not self.flags.skip_gradients:
                        self.async_f2h_prefetch(k, iteration)
                    cursor[0] += 1
                    continue
                if self.async_f2h_prefetch(k, iteration) is None:
                    return
                cursor[0] += 1

        hits = overflows = 0
        self._flushes = []
        for pos, k in enumerate(order):
            pump()
            hits += self.subgroups[k].residency is Residency.HOST_CACHED
            sg = self.f2h_prefetch_wait_subgroup(k, iteration, pump)
            cursor[0] = max(cursor[0], pos + 1)
            grad = self._grad_row(k)
            if self.flags.skip_gradients:
                self._record("grad_upscale_start", sg, iteration=iteration,
                             phase="update", nbytes=4 * sg.param_count)
                upscale_f16_to_f32(self.grad_buffers[k].data, out=grad,
                                   threads=self.compute_threads)
                self._record("grad_upscale_end", sg, iteration=iteration,
                             phase="update", nbytes=4 * sg.param_count)
            self._record("update_start", sg, iteration=iteration, phase="update")
            adam_step(sg, grad, self.hyper, iteration, threads=self.compute_threads)
            self._record("update_end", sg, iteration=iteration, phase="update")
            self._record("h2d_start", sg, iteration=iteration, phase="update",
                         nbytes=2 * sg.param_count)
            _, n_over = downscale_f32_to_f16(sg.params, out=self.device_params[k],
                                             threads=self.compute_threads)
            overflows += n_over
            self._record("h2d_end", sg, iteration=iteration, phase="update",
                         nbytes=2 * sg.param_count)
            dest = placement.assign_storage_tier(k, plan.tier_destination)
            if dest is placement.HOST:
                self.pool.set_state(sg.slot, SlotState.CACHED)
            else:
                self.async_h2f_flush(sg, dest, iteration)
            pump()
        self._wait(self._flushes, "draining flushes")
        self._flushes = []
        t1 = now_ns()
        io = self._take_io_log()
        if self.adaptive:
            self.estimate = placement.update_bandwidth_estimates(self.estimate, io)
        counts = [0] * len(self.tiers)
        for d in plan.tier_destination.values():
            if d is not None:
                counts[d] += 1
        return PhaseResult(iteration, "update", (t1 - t0) / 1e9, t0, t1,
                           cache_hits=hits, fp16_overflows=overflows,
                           destinations=dict(plan.tier_destination),
                           allocation=tuple(counts), io=io)

    def run_baseline_update(self, iteration: int) -> PhaseResult:
        """ZeRO-3 style update phase; the engine must use baseline flags."""
        if not self.flags.is_baseline:
            raise RuntimeError("run_baseline_update needs EngineFlags.baseline()")
        return self.run_update(iteration)

    # -- inspection -----------------------------------------------------------
    def state_snapshot(self) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Copy of every subgroup's (params, momentum, variance).

        Reads non-resident subgroups straight from their tier.
        """
        out = []
        for sg in self.subgroups:
            if sg.resident:
                out.append(sg.copy_state())
            else:
                tier = self._tier_by_id[sg.tier_id]
                arrays, _ = read_subgroup(tier, sg.subgroup_id, sg.param_count)
                out.append(arrays)
        return out

    def distribution(self) -> dict:
        """Share of parameters held by the host and by each tier (percent)."""
        total = sum(sg.param_count for sg in self.subgroups)
        host = sum(sg.param_count for sg in self.subgroups
                   if sg.residency is Residency.HOST_CACHED)
        tiers = {t.tier_id: 0 for t in self.tiers}
        for sg in self.subgroups:
            if sg.residency is Residency.ON_TIER:
                tiers[sg.tier_id] += sg.param_count
        return {"host": 100.0 * host / total,
                "tiers": {k: 100.0 * v / total for k, v in tiers.items()}}

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        for w in self.io.values():
            w.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
