"""Subgroup state and the CPU Adam update kernel."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._parallel import DEFAULT_CHUNK, run_chunked
from .errors import GradientOverflowError


class Residency(str, enum.Enum):
    HOST_CACHED = "host_cached"
    IN_FLIGHT = "in_flight"
    ON_TIER = "on_tier"


_ALLOWED = {
    (Residency.HOST_CACHED, Residency.IN_FLIGHT),
    (Residency.IN_FLIGHT, Residency.ON_TIER),
    (Residency.ON_TIER, Residency.IN_FLIGHT),
    (Residency.IN_FLIGHT, Residency.HOST_CACHED),
}


@dataclass
class Subgroup:
    """One shard of FP32 optimizer state.

    ``params``/``momentum``/``variance`` are ``None`` while the subgroup lives
    only on a tier; when resident they are usually views into a host
    buffer pool slot.
    """

    subgroup_id: int
    param_count: int
    params: Optional[np.ndarray] = None
    momentum: Optional[np.ndarray] = None
    variance: Optional[np.ndarray] = None
    residency: Residency = Residency.HOST_CACHED
    tier_id: Optional[int] = None
    step_count: int = 0
    slot: Optional[int] = field(default=None, repr=False)

    @classmethod
    def allocate(cls, subgroup_id: int, param_count: int,
                 rng: Optional[np.random.Generator] = None) -> "Subgroup":
        """Fresh host-resident subgroup with zero moments.

        Parameters are drawn from ``rng`` (standard normal, scaled by 0.02)
        or zero when no generator is given.
        """
        if rng is None:
            params = np.zeros(param_count, dtype=np.float32)
        else:
            params = rng.standard_normal(param_count, dtype=np.float32)
            params *= np.float32(0.02)
        return cls(subgroup_id, param_count, params,
                   np.zeros(param_count, dtype=np.float32),
                   np.zeros(param_count, dtype=np.float32))

    @property
    def state_bytes(self) -> int:
        return 3 * 4 * self.param_count

    @property
    def resident(self) -> bool:
        return self.params is not None

    def transition(self, to: Residency, tier_id: Optional[int] = None) -> None:
        if (self.residency, to) not in _ALLOWED:
            raise RuntimeError(f"subgroup {self.subgroup_id}: illegal residency "
                               f"transition {self.residency.value} -> {to.value}")
        self.residency = to
        if to is Residency.ON_TIER:
            self.tier_id = tier_id

    def bind(self, params, momentum, variance) -> None:
        for a in (params, momentum, variance):
            if a.shape != (self.param_count,) or a.dtype != np.float32:
                raise ValueError(f"subgroup {self.subgroup_id}: bad state buffer")
        self.params, self.momentum, self.variance = params, momentum, variance

    def unbind(self) -> None:
        self.params = self.momentum = self.variance = None
        self.slot = None

    def copy_state(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.params.copy(), self.momentum.copy(), self.variance.copy()


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.lr <= 0:
            raise ValueError("lr and eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def adam_step(sg: Subgroup, grads: np.ndarray, h: AdamHyper, t: int,
              threads: Optional[int] = None, chunk: int = DEFAULT_CHUNK) -> Subgroup:
    """Apply one bias-corrected Adam step to ``sg`` in place.

    Weight decay is decoupled (``p -= lr * wd * p`` before the Adam delta).
    Work is split into fixed ``chunk``-sized ranges, so the result does not
    depend on ``threads``.
    """
    if t < 1:
        raise ValueError("timestep starts at 1")
    if not sg.resident:
        raise RuntimeError(f"subgroup {sg.subgroup_id} is not resident")
    if grads.shape != (sg.param_count,):
        raise ValueError(f"subgroup {sg.subgroup_id}: {grads.shape[0]} grads "
                         f"for {sg.param_count} params")
    if not np.isfinite(grads).all():
        raise GradientOverflowError(f"subgroup {sg.subgroup_id}: non-finite gradients")

    f32 = np.float32
    b1, b2 = f32(h.beta1), f32(h.beta2)
    c1, c2 = f32(1.0 - h.beta1), f32(1.0 - h.beta2)
    bc1, bc2 = f32(1.0 - h.beta1 ** t), f32(1.0 - h.beta2 ** t)
    lr, eps = f32(h.lr), f32(h.eps)
    lr_wd = f32(h.lr * h.weight_decay)
    p_all, m_all, v_all = sg.params, sg.momentum, sg.variance

    def kernel(lo, hi):
        p, m, v, g = p_all[lo:hi], m_all[lo:hi], v_all[lo:hi], grads[lo:hi]
        tmp = np.multiply(g, c1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= c2
        v *= b2
        v += tmp
        # tmp <- lr * m_hat / (sqrt(v_hat) + eps)
        den = np.divide(v, bc2)
        np.sqrt(den, out=den)
        den += eps
        np.divide(m, bc1, out=tmp)
        tmp *= lr
        tmp /= den
        if lr_wd:
            p -= lr_wd * p
        p -= tmp

    run_chunked(sg.param_count, kernel, threads, chunk)
    sg.step_count = t
    return sg


def update_throughput(params_updated: int, wall: float) -> float:
    """Millions of parameters updated per second."""
    if wall <= 0:
        raise ValueError("wall time must be positive")
    return params_updated / wall / 1e6
