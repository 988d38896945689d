"""Run configuration and its YAML loader.

Sections: ``model``, ``tiers`` (list), ``placement``, ``optim``,
``schedule``. JSON is accepted too since it is a YAML subset.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from ..errors import ConfigurationError
from ..optimizer import AdamHyper
from ..scheduler import EngineFlags
from ..tier import TierKind, TierSpec

_FLAG_NAMES = ("enable_caching", "skip_gradients", "atomic_rw", "multi_path")


@dataclass
class ThrottleChange:
    """Set a tier's throttle before ``iteration`` starts."""

    iteration: int
    tier: int
    read_bw: Optional[float] = None
    write_bw: Optional[float] = None


@dataclass
class RunConfig:
    total_params: int = 24 * 2_796_202
    subgroup_param_count: int = 2_796_202  # 32 MiB of FP32 state
    tiers: list[TierSpec] = field(default_factory=lambda: [
        TierSpec(0, TierKind.MEM_THROTTLED, throttle_read_bw=200e6, throttle_write_bw=200e6),
        TierSpec(1, TierKind.MEM_THROTTLED, throttle_read_bw=100e6, throttle_write_bw=100e6),
    ])
    workers_per_node: int = 1
    pool_slots: int = 4
    retain: Optional[int] = None
    iterations: int = 10
    warmup_iterations: int = 2
    grad_accum_steps: int = 1
    mode: str = "engine"
    flags: Optional[EngineFlags] = None  # defaults to the mode's preset
    seed: int = 0
    alpha: float = 0.5
    ratio: Optional[list[float]] = None
    adaptive: bool = True
    hyper: AdamHyper = field(default_factory=AdamHyper)
    forward_s: float = 0.0
    backward_s: float = 0.0
    grad_scale: float = 1e-2
    deadlock_timeout: float = 30.0
    compute_threads: Optional[int] = None
    multiprocess: bool = False
    probe: bool = False
    probe_bytes: int = 16 << 20
    lock_dir: Optional[str] = None
    throttle_changes: list[ThrottleChange] = field(default_factory=list)

    def __post_init__(self):
        self.validate()
        if self.flags is None:
            self.flags = (EngineFlags.engine() if self.mode == "engine"
                          else EngineFlags.baseline())

    def validate(self) -> None:
        if self.mode not in ("engine", "baseline"):
            raise ConfigurationError(f"mode must be engine or baseline, not {self.mode!r}")
        if self.total_params < 1 or self.subgroup_param_count < 1:
            raise ConfigurationError("parameter counts must be positive")
        if not 0 <= self.warmup_iterations < self.iterations:
            raise ConfigurationError("need 0 <= warmup_iterations < iterations")
        if self.pool_slots < 3:
            raise ConfigurationError("pool_slots must be at least 3")
        if self.workers_per_node < 1 or self.grad_accum_steps < 1:
            raise ConfigurationError("workers_per_node and grad_accum_steps must be >= 1")
        if not self.tiers:
            raise ConfigurationError("at least one tier is required")
        ids = [t.tier_id for t in self.tiers]
        if ids != list(range(len(ids))):
            raise ConfigurationError("tier ids must be 0..N-1 in order")

    def subgroup_sizes(self) -> list[int]:
        """Per-worker subgroup sizes; the last one may be smaller."""
        full, rest = divmod(self.total_params, self.subgroup_param_count)
        return [self.subgroup_param_count] * full + ([rest] if rest else [])

    def with_mode(self, mode: str, **flag_overrides) -> "RunConfig":
        """Copy with ``mode`` preset flags, then explicit overrides applied."""
        flags = EngineFlags.engine() if mode == "engine" else EngineFlags.baseline()
        flags = replace(flags, **{k: v for k, v in flag_overrides.items() if v is not None})
        return replace(self, mode=mode, flags=flags)


def _num(v, kind=float):
    if v is None:
        return None
    try:
        return kind(float(v)) if kind is int else kind(v)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"expected a number, got {v!r}") from exc


def _tier(i: int, raw: dict) -> TierSpec:
    allowed = {f.name for f in fields(TierSpec)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigurationError(f"tier {i}: unknown keys {sorted(unknown)}")
    raw = dict(raw)
    raw.setdefault("tier_id", i)
    for key in ("read_bw", "write_bw", "throttle_read_bw", "throttle_write_bw"):
        raw[key] = _num(raw.get(key))
    return TierSpec(**raw)


def config_from_dict(doc: dict[str, Any]) -> RunConfig:
    doc = doc or {}
    known = {"model", "tiers", "placement", "optim", "schedule"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
    kw: dict[str, Any] = {}
    model = doc.get("model", {})
    if "total_params" in model:
        kw["total_params"] = _num(model["total_params"], int)
    if "subgroup_param_count" in model:
        kw["subgroup_param_count"] = _num(model["subgroup_param_count"], int)
    if "tiers" in doc:
        kw["tiers"] = [_tier(i, t) for i, t in enumerate(doc["tiers"])]
    pl = doc.get("placement", {})
    if "alpha" in pl:
        kw["alpha"] = _num(pl["alpha"])
    if pl.get("ratio") is not None:
        kw["ratio"] = [_num(r) for r in pl["ratio"]]
    if "adaptive" in pl:
        kw["adaptive"] = bool(pl["adaptive"])
    if "optim" in doc:
        kw["hyper"] = AdamHyper(**{k: _num(v) for k, v in doc["optim"].items()})
    sch = dict(doc.get("schedule", {}))
    flags = {k: sch.pop(k) for k in _FLAG_NAMES if k in sch}
    changes = sch.pop("throttle_changes", [])
    ints = {"workers_per_node", "pool_slots", "retain", "iterations",
            "warmup_iterations", "grad_accum_steps", "seed", "compute_threads",
            "probe_bytes"}
    floats = {"forward_s", "backward_s", "grad_scale", "deadlock_timeout"}
    for key, value in sch.items():
        if key in ints:
            kw[key] = _num(value, int)
        elif key in floats:
            kw[key] = _num(value)
        elif key in ("mode", "lock_dir"):
            kw[key] = value
        elif key in ("multiprocess", "probe"):
            kw[key] = bool(value)
        else:
            raise ConfigurationError(f"unknown schedule key {key!r}")
    kw["throttle_changes"] = [ThrottleChange(int(c["iteration"]), int(c["tier"]),
                                             _num(c.get("read_bw")), _num(c.get("write_bw")))
                              for c in changes]
    cfg = RunConfig(**kw)
    return cfg.with_mode(cfg.mode, **flags)


def load_config(path) -> RunConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"bad config {path}: {exc}") from exc
    return config_from_dict(doc)
