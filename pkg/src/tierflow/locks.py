"""Node-level, per-tier exclusive locks.

A tier lock is an advisory ``flock`` on ``<lock_dir>/tier_<id>.lock``
combined with an in-process mutex, so it excludes both other OS processes
on the host and other threads of this process. An execution context may
hold at most one tier lock at a time; nesting is a programming error.
"""

from __future__ import annotations

import fcntl
import os
import tempfile
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

from .errors import ConfigurationError
from .trace import EventTrace

LOCK_DIR_ENV = "TIERFLOW_LOCK_DIR"


def default_lock_dir() -> Path:
    env = os.environ.get(LOCK_DIR_ENV)
    if env:
        return Path(env)
    return Path(tempfile.gettempdir()) / "tierflow-locks"


class TierLockManager:
    """Hands out exclusive tier locks rooted in one lock directory."""

    def __init__(self, lock_dir: Optional[os.PathLike] = None,
                 trace: Optional[EventTrace] = None):
        self.lock_dir = Path(lock_dir) if lock_dir else default_lock_dir()
        try:
            self.lock_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigurationError(f"lock directory {self.lock_dir}: {exc}") from exc
        if not os.access(self.lock_dir, os.W_OK):
            raise ConfigurationError(f"lock directory {self.lock_dir} is not writable")
        self.trace = trace
        self._mutexes: dict[int, threading.Lock] = {}
        self._guard = threading.Lock()
        self._held = threading.local()

    def lock_path(self, tier_id: int) -> Path:
        return self.lock_dir / f"tier_{tier_id}.lock"

    def _mutex(self, tier_id: int) -> threading.Lock:
        with self._guard:
            return self._mutexes.setdefault(tier_id, threading.Lock())

    def held(self) -> Optional[int]:
        """Tier id locked by the calling thread, if any."""
        return getattr(self._held, "tier_id", None)

    @contextmanager
    def acquire(self, tier_id: int, worker_id: int = 0, **trace_fields) -> Iterator[None]:
        current = self.held()
        assert current is None, (
            f"worker {worker_id} already holds tier {current}; "
            f"release before acquiring tier {tier_id}")
        mutex = self._mutex(tier_id)
        mutex.acquire()
        try:
            fd = os.open(self.lock_path(tier_id), os.O_RDWR | os.O_CREAT, 0o666)
        except OSError as exc:
            mutex.release()
            raise ConfigurationError(f"cannot open lock file: {exc}") from exc
        try:
            fcntl.flock(fd, fcntl.LOCK_EX)
            self._held.tier_id = tier_id
            if self.trace is not None:
                self.trace.record("lock_acquire", worker_id, tier_id=tier_id,
                                  **trace_fields)
            try:
                yield
            finally:
                if self.trace is not None:
                    self.trace.record("lock_release", worker_id, tier_id=tier_id,
                                      **trace_fields)
                self._held.tier_id = None
                fcntl.flock(fd, fcntl.LOCK_UN)
        finally:
            os.close(fd)
            mutex.release()


_default: Optional[TierLockManager] = None


def acquire_tier_lock(tier_id: int, worker_id: int = 0):
    """Acquire ``tier_id`` on the process-wide default manager.

    Use as a context manager; the lock is released when the block exits.
    """
    global _default
    if _default is None:
        _default = TierLockManager()
    return _default.acquire(tier_id, worker_id)
