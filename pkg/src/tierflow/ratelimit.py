"""Blocking token bucket used to emulate a storage tier's bandwidth."""

from __future__ import annotations

import threading
import time


class TokenBucket:
    """Token bucket refilled at ``rate`` tokens per second.

    Consumers may drive the balance negative; they then sleep until the
    debt is repaid, so concurrent consumers share the configured rate.
    The burst capacity is ``rate * granularity`` which bounds how far the
    bucket can run ahead after an idle period.
    """

    def __init__(self, rate: float, granularity: float = 1e-3):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self._lock = threading.Lock()
        self.granularity = granularity
        self._rate = float(rate)
        self._tokens = self.capacity
        self._ts = time.perf_counter()

    @property
    def rate(self) -> float:
        return self._rate

    @property
    def capacity(self) -> float:
        return self._rate * self.granularity

    def set_rate(self, rate: float) -> None:
        if rate <= 0:
            raise ValueError("rate must be positive")
        with self._lock:
            self._refill()
            self._rate = float(rate)
            self._tokens = min(self._tokens, self.capacity)

    def _refill(self) -> None:
        now = time.perf_counter()
        self._tokens = min(self.capacity, self._tokens + (now - self._ts) * self._rate)
        self._ts = now

    def consume(self, n: float) -> float:
        """Take ``n`` tokens, sleeping as needed. Returns time slept."""
        with self._lock:
            self._refill()
            self._tokens -= n
            wait = -self._tokens / self._rate if self._tokens < 0 else 0.0
        if wait > 0:
            time.sleep(wait)
        return wait
