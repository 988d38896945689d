"""Half <-> single precision conversion kernels and FP16 gradient buffers."""

from __future__ import annotations

from typing import Optional

import numpy as np

from ._parallel import run_chunked
from .errors import GradientOverflowError

FP16_MAX = float(np.finfo(np.float16).max)  # 65504


def upscale_f16_to_f32(g16: np.ndarray, out: Optional[np.ndarray] = None,
                       threads: Optional[int] = None) -> np.ndarray:
    """Widen FP16 gradients to FP32 (exact).

    Raises :class:`GradientOverflowError` if the input holds NaN or Inf.
    """
    g16 = np.asarray(g16)
    if g16.dtype != np.float16:
        raise TypeError(f"expected float16, got {g16.dtype}")
    if out is None:
        out = np.empty(g16.shape, dtype=np.float32)
    elif out.shape != g16.shape or out.dtype != np.float32:
        raise ValueError("output buffer must be float32 with the input's shape")

    bad = []

    def kernel(lo, hi):
        np.copyto(out[lo:hi], g16[lo:hi], casting="safe")
        # checked while the chunk is still in cache
        if not np.isfinite(out[lo:hi]).all():
            bad.append(int(np.count_nonzero(~np.isfinite(out[lo:hi]))))

    run_chunked(g16.size, kernel, threads)
    if bad:
        raise GradientOverflowError(f"{sum(bad)} non-finite gradient values")
    return out


def downscale_f32_to_f16(p32: np.ndarray, out: Optional[np.ndarray] = None,
                         threads: Optional[int] = None) -> tuple[np.ndarray, int]:
    """Round FP32 to FP16 with round-to-nearest-even.

    Returns ``(half_buffer, overflow_count)`` where ``overflow_count`` is the
    number of finite inputs that became +/-Inf.
    """
    p32 = np.asarray(p32, dtype=np.float32)
    if out is None:
        out = np.empty(p32.shape, dtype=np.float16)
    counts = []

    def kernel(lo, hi):
        with np.errstate(over="ignore"):
            np.copyto(out[lo:hi], p32[lo:hi], casting="unsafe")
        counts.append(int(np.count_nonzero(np.isinf(out[lo:hi]) &
                                           np.isfinite(p32[lo:hi]))))

    run_chunked(p32.size, kernel, threads)
    return out, sum(counts)


class GradBufferF16:
    """Host-resident FP16 gradient accumulation buffer for one subgroup.

    Each micro-step is added in FP32 and rounded back to FP16.
    """

    def __init__(self, param_count: int):
        self.data = np.zeros(param_count, dtype=np.float16)
        self.accumulation_steps = 0

    def __len__(self) -> int:
        return self.data.size

    def reset(self) -> None:
        self.data.fill(0)
        self.accumulation_steps = 0

    def accumulate(self, grad16: np.ndarray) -> None:
        if grad16.shape != self.data.shape:
            raise ValueError("gradient length does not match buffer")
        if self.accumulation_steps == 0:
            self.data[...] = grad16
        else:
            with np.errstate(over="ignore"):
                acc = self.data.astype(np.float32)
                acc += grad16.astype(np.float32)
                self.data[...] = acc
        self.accumulation_steps += 1

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())
