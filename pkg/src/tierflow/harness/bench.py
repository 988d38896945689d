"""Benchmark run loop: warm-ups plus measured iterations of
forward stub -> backward simulation -> update phase, per emulated worker."""

from __future__ import annotations

import logging
import multiprocessing as mp
import os
import pickle
import shutil
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from statistics import mean
from typing import Optional

from ..errors import ConfigurationError
from ..locks import TierLockManager
from ..scheduler import OffloadEngine, PhaseResult, SyntheticGradients
from ..tier import Tier, TierKind, probe_bandwidth
from ..trace import EventTrace
from .config import RunConfig
from .metrics import IterationReport, build_iteration_report

log = logging.getLogger(__name__)


@dataclass
class WorkerOutcome:
    worker_id: int
    params: int
    backward: dict = field(default_factory=dict)   # iteration -> PhaseResult
    update: dict = field(default_factory=dict)
    distribution: dict = field(default_factory=dict)
    forward_s: dict = field(default_factory=dict)
    final_state: Optional[list] = None


@dataclass
class BenchmarkResult:
    config: RunConfig
    reports: list[IterationReport]
    trace: EventTrace
    final_state: Optional[list] = None

    @property
    def measured(self) -> list[IterationReport]:
        return [r for r in self.reports if r.iteration > self.config.warmup_iterations]

    def mean(self, attr: str) -> float:
        vals = [getattr(r, attr) for r in self.measured]
        vals = [v for v in vals if v is not None]
        return mean(vals) if vals else float("nan")

    def summary(self) -> dict:
        eff = [r.effective_io_bps for r in self.measured if r.effective_io_bps is not None]
        return {
            "mode": self.config.mode,
            "flags": {k: getattr(self.config.flags, k) for k in
                      ("enable_caching", "skip_gradients", "atomic_rw", "multi_path")},
            "iterations": self.config.iterations,
            "warmup_iterations": self.config.warmup_iterations,
            "measured_iterations": len(self.measured),
            "workers_per_node": self.config.workers_per_node,
            "subgroups_per_worker": len(self.config.subgroup_sizes()),
            "params_per_worker": self.config.total_params,
            "mean_iter_s": self.mean("iter_s"),
            "mean_forward_s": self.mean("forward_s"),
            "mean_backward_s": self.mean("backward_s"),
            "mean_update_s": self.mean("update_s"),
            "mean_update_throughput_mps": self.mean("update_throughput_mps"),
            "mean_effective_io_bps": mean(eff) if eff else None,
            "mean_cache_hits": self.mean("cache_hits"),
        }


def build_tiers(cfg: RunConfig) -> list[Tier]:
    tiers = [Tier(spec) for spec in cfg.tiers]
    for t in tiers:
        unmeasured = not (t.spec.read_bw and t.spec.write_bw)
        if unmeasured or (cfg.probe and t.spec.kind is not TierKind.MEM_THROTTLED):
            probe_bandwidth(t, cfg.probe_bytes)
    return tiers


def preflight(cfg: RunConfig) -> None:
    """Refuse to start when a directory tier cannot hold its worst case."""
    per_worker = sum(cfg.subgroup_sizes()) * 16  # state + FP32 gradients
    need = per_worker * cfg.workers_per_node
    for spec in cfg.tiers:
        if spec.kind is TierKind.MEM_THROTTLED:
            continue
        root = Path(spec.root)
        root.mkdir(parents=True, exist_ok=True)
        free = shutil.disk_usage(root).free
        if free < need:
            raise ConfigurationError(
                f"tier {spec.tier_id} at {root}: {free} bytes free, need {need}")


def _apply_throttles(cfg: RunConfig, tiers: list[Tier], iteration: int) -> None:
    for ch in cfg.throttle_changes:
        if ch.iteration == iteration:
            tiers[ch.tier].set_throttle(ch.read_bw, ch.write_bw)


def _worker_loop(cfg: RunConfig, worker_id: int, tiers: list[Tier],
                 locks: Optional[TierLockManager], trace: EventTrace,
                 barrier, apply_throttles: bool, keep_state: bool) -> WorkerOutcome:
    sizes = cfg.subgroup_sizes()
    engine = OffloadEngine(
        tiers, sizes, cfg.hyper, cfg.flags, pool_slots=cfg.pool_slots,
        retain=cfg.retain, worker_id=worker_id, id_offset=worker_id * len(sizes),
        locks=locks, trace=trace, alpha=cfg.alpha, ratio=cfg.ratio,
        adaptive=cfg.adaptive, seed=cfg.seed, deadlock_timeout=cfg.deadlock_timeout,
        compute_threads=cfg.compute_threads)
    grads = SyntheticGradients(cfg.seed, cfg.grad_scale)
    out = WorkerOutcome(worker_id, sum(sizes))
    try:
        engine.initialize()
        for it in range(1, cfg.iterations + 1):
            barrier.wait()
            if apply_throttles:
                _apply_throttles(cfg, tiers, it)
            barrier.wait()
            t0 = time.perf_counter()
            if cfg.forward_s:
                time.sleep(cfg.forward_s)
            out.forward_s[it] = time.perf_counter() - t0
            out.backward[it] = engine.run_backward_sim(
                it, grads, cfg.grad_accum_steps, cfg.backward_s / cfg.grad_accum_steps)
            out.update[it] = engine.run_update(it)
            out.distribution[it] = engine.distribution()
        if keep_state:
            out.final_state = engine.state_snapshot()
    except BaseException:
        barrier.abort()
        raise
    finally:
        engine.close()
    return out


def _mp_worker(cfg: RunConfig, worker_id: int, lock_dir: str, barrier, out_dir: str,
               keep_state: bool) -> None:
    trace = EventTrace()
    locks = TierLockManager(lock_dir, trace) if cfg.flags.atomic_rw else None
    tiers = build_tiers(cfg)
    outcome = _worker_loop(cfg, worker_id, tiers, locks, trace, barrier,
                           apply_throttles=True, keep_state=keep_state)
    with open(Path(out_dir) / f"worker_{worker_id}.pkl", "wb") as f:
        pickle.dump((outcome, trace.snapshot()), f)


def run_benchmark(cfg: RunConfig, keep_state: bool = False) -> BenchmarkResult:
    """Run warm-up and measured iterations for every emulated worker."""
    cfg.validate()
    preflight(cfg)
    lock_dir = cfg.lock_dir or os.environ.get("TIERFLOW_LOCK_DIR") or tempfile.mkdtemp(
        prefix="tierflow-locks-")
    trace = EventTrace()
    n = cfg.workers_per_node
    if cfg.multiprocess:
        ctx = mp.get_context("spawn")
        barrier = ctx.Barrier(n)
        with tempfile.TemporaryDirectory(prefix="tierflow-mp-") as tmp:
            procs = [ctx.Process(target=_mp_worker,
                                 args=(cfg, w, lock_dir, barrier, tmp, keep_state))
                     for w in range(n)]
            for p in procs:
                p.start()
            for p in procs:
                p.join()
            failed = [p.exitcode for p in procs if p.exitcode]
            if failed:
                raise RuntimeError(f"worker processes failed with exit codes {failed}")
            outcomes = []
            for w in range(n):
                with open(Path(tmp) / f"worker_{w}.pkl", "rb") as f:
                    outcome, events = pickle.load(f)
                outcomes.append(outcome)
                trace.extend(events)
    else:
        locks = TierLockManager(lock_dir, trace) if cfg.flags.atomic_rw else None
        tiers = build_tiers(cfg)
        barrier = threading.Barrier(n)
        outcomes: list = [None] * n
        errors: list = []

        def target(w):
            try:
                outcomes[w] = _worker_loop(cfg, w, tiers, locks, trace, barrier,
                                           apply_throttles=(w == 0), keep_state=keep_state)
            except BaseException as exc:
                errors.append(exc)

        if n == 1:
            target(0)
        else:
            threads = [threading.Thread(target=target, args=(w,), name=f"worker-{w}")
                       for w in range(n)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        if errors:
            raise errors[0]

    reports = []
    for it in range(1, cfg.iterations + 1):
        reports.append(build_iteration_report(
            trace, it,
            forward_s=max(o.forward_s[it] for o in outcomes),
            backward_phases=[o.backward[it] for o in outcomes],
            update_phases=[o.update[it] for o in outcomes],
            distributions=[o.distribution[it] for o in outcomes],
            params_per_worker=[o.params for o in outcomes]))
    final = None
    if keep_state:
        final = [s for o in sorted(outcomes, key=lambda o: o.worker_id)
                 for s in o.final_state]
    return BenchmarkResult(cfg, reports, trace, final)
