"""Lock contention stress: several workers hammer a few tiers with real
subgroup reads and writes while holding the node-level tier locks."""

from __future__ import annotations

import multiprocessing as mp
import pickle
import tempfile
import threading
from pathlib import Path

import numpy as np

from ..locks import TierLockManager
from ..optimizer import Subgroup
from ..tier import Tier, TierKind, TierSpec, read_subgroup, write_subgroup
from ..trace import EventTrace


def _ops(worker_id: int, workers: int, tiers: int, operations: int, seed: int):
    mine = operations // workers + (1 if worker_id < operations % workers else 0)
    rng = np.random.default_rng([seed, worker_id])
    return [int(t) for t in rng.integers(0, tiers, size=mine)]


def _run_worker(worker_id, workers, n_tiers, operations, data_dir, lock_dir,
                param_count, seed, trace):
    locks = TierLockManager(lock_dir, trace)
    tiers = [Tier(TierSpec(t, TierKind.LOCAL_DIR, root=str(Path(data_dir) / f"tier{t}"),
                           read_bw=1.0, write_bw=1.0))
             for t in range(n_tiers)]
    sg = Subgroup.allocate(worker_id, param_count, np.random.default_rng(worker_id))
    for n, t in enumerate(_ops(worker_id, workers, n_tiers, operations, seed)):
        with locks.acquire(t, worker_id, subgroup_id=sg.subgroup_id, iteration=n):
            write_subgroup(tiers[t], sg)
            read_subgroup(tiers[t], sg.subgroup_id, param_count)


def _mp_entry(worker_id, workers, n_tiers, operations, data_dir, lock_dir,
              param_count, seed, out_path):
    trace = EventTrace()
    _run_worker(worker_id, workers, n_tiers, operations, data_dir, lock_dir,
                param_count, seed, trace)
    with open(out_path, "wb") as f:
        pickle.dump(trace.snapshot(), f)


def run_lock_stress(workers: int = 4, tiers: int = 2, operations: int = 200,
                    multiprocess: bool = False, data_dir=None, lock_dir=None,
                    param_count: int = 65536, seed: int = 0) -> EventTrace:
    """Run ``operations`` locked write+read pairs spread over ``workers``.

    Returns the merged trace of lock_acquire/lock_release events.
    """
    with tempfile.TemporaryDirectory(prefix="tierflow-lockcheck-") as tmp:
        data_dir = data_dir or str(Path(tmp) / "data")
        lock_dir = lock_dir or str(Path(tmp) / "locks")
        trace = EventTrace()
        args = (workers, tiers, operations, data_dir, lock_dir, param_count, seed)
        if multiprocess:
            ctx = mp.get_context("spawn")
            procs = []
            for w in range(workers):
                out = Path(tmp) / f"trace_{w}.pkl"
                procs.append((ctx.Process(target=_mp_entry, args=(w, *args, str(out))), out))
            for p, _ in procs:
                p.start()
            for p, out in procs:
                p.join()
                if p.exitcode:
                    raise RuntimeError(f"lock stress worker exited with {p.exitcode}")
                with open(out, "rb") as f:
                    trace.extend(pickle.load(f))
        else:
            threads = [threading.Thread(target=_run_worker, args=(w, *args, trace))
                       for w in range(workers)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        return trace
