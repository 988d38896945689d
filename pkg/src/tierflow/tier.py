"""Storage tiers: backends, the on-disk subgroup format and bandwidth probing.

A :class:`TierSpec` is the configuration of one storage backend. A
:class:`Tier` is the live backend built from it (directory handle or
in-memory store plus optional throttling). ``write_subgroup`` and
``read_subgroup`` are blocking leaf calls; asynchrony lives in the
scheduler.
"""

from __future__ import annotations

import enum
import logging
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (ConfigurationError, FormatError, PlacementInconsistencyError,
                     ProbeError, TierIOError)
from .ratelimit import TokenBucket

log = logging.getLogger(__name__)

MAGIC = 0x4D4C504F
VERSION = 1
ELEMENT_F32 = 0
# magic u32, version u16, element_kind u16, subgroup_id u32, param_count u64,
# reserved 3 x u32
HEADER = struct.Struct("<IHHIQIII")
HEADER_SIZE = HEADER.size  # 32
STATE_TENSORS = 3
MIB = 1 << 20


class TierKind(str, enum.Enum):
    LOCAL_DIR = "local_dir"
    REMOTE_DIR = "remote_dir"
    MEM_THROTTLED = "mem_throttled"


@dataclass
class TierSpec:
    """One storage backend and its bandwidth (bytes/s).

    ``throttle_read_bw``/``throttle_write_bw`` cap the transfer rate; they
    are required for ``mem_throttled`` tiers and optional for directories.
    ``read_bw``/``write_bw`` hold the probed (or configured) bandwidth.
    """

    tier_id: int
    kind: TierKind = TierKind.MEM_THROTTLED
    root: Optional[str] = None
    read_bw: Optional[float] = None
    write_bw: Optional[float] = None
    io_parallelism: int = 1
    persistent: Optional[bool] = None
    throttle_read_bw: Optional[float] = None
    throttle_write_bw: Optional[float] = None
    low_confidence: bool = False

    def __post_init__(self):
        self.kind = TierKind(self.kind)
        if self.io_parallelism < 1:
            raise ConfigurationError("io_parallelism must be >= 1")
        if self.kind is TierKind.MEM_THROTTLED:
            if not (self.throttle_read_bw and self.throttle_write_bw):
                raise ConfigurationError(
                    f"mem_throttled tier {self.tier_id} needs throttle rates")
            # the throttle is the ground truth until probed
            self.read_bw = self.read_bw or float(self.throttle_read_bw)
            self.write_bw = self.write_bw or float(self.throttle_write_bw)
        elif self.root is None:
            raise ConfigurationError(f"directory tier {self.tier_id} needs a root")
        if self.throttle_read_bw and not self.read_bw:
            self.read_bw = float(self.throttle_read_bw)
        if self.throttle_write_bw and not self.write_bw:
            self.write_bw = float(self.throttle_write_bw)
        if self.persistent is None:
            self.persistent = self.kind is TierKind.REMOTE_DIR

    @property
    def effective_bw(self) -> float:
        if not (self.read_bw and self.write_bw):
            raise ConfigurationError(f"tier {self.tier_id} has not been probed")
        return min(self.read_bw, self.write_bw)


@dataclass
class IOStats:
    bytes: int
    duration: float  # seconds, transfer only (no lock wait)

    @property
    def throughput(self) -> float:
        return self.bytes / self.duration if self.duration > 0 else float("inf")


def subgroup_filename(subgroup_id: int) -> str:
    return f"sg_{subgroup_id:06d}.bin"


def gradient_filename(subgroup_id: int) -> str:
    return f"grad_{subgroup_id:06d}.bin"


def pack_header(subgroup_id: int, param_count: int) -> bytes:
    return HEADER.pack(MAGIC, VERSION, ELEMENT_F32, subgroup_id, param_count, 0, 0, 0)


def unpack_header(raw: bytes, tier_id: int = -1) -> tuple[int, int]:
    """Validate a header, returning ``(subgroup_id, param_count)``."""
    if len(raw) != HEADER_SIZE:
        raise FormatError(tier_id, f"short header ({len(raw)} bytes)")
    magic, version, kind, sg_id, count, *_ = HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(tier_id, f"bad magic 0x{magic:08X}")
    if version != VERSION:
        raise FormatError(tier_id, f"unsupported version {version}")
    if kind != ELEMENT_F32:
        raise FormatError(tier_id, f"unsupported element kind {kind}")
    return sg_id, count


def _as_bytes(arr: np.ndarray) -> memoryview:
    if arr.dtype != np.float32 or not arr.flags.c_contiguous:
        raise TypeError("state tensors must be contiguous float32")
    # little-endian payload; numpy float32 is native, so refuse big-endian hosts
    if arr.dtype.byteorder == ">":
        raise TypeError("big-endian buffers are not supported")
    return memoryview(arr).cast("B")


class Tier:
    """Live backend for a :class:`TierSpec`.

    Directory tiers store one file per blob under ``root``; ``mem_throttled``
    tiers keep blobs in a process-local dict. Either kind can be throttled
    with a token bucket shared by both directions.
    """

    def __init__(self, spec: TierSpec):
        self.spec = spec
        self._store: dict[str, bytearray] = {}
        self._store_lock = threading.Lock()
        # Tokens are seconds of device time: a transfer of n bytes costs
        # n / rate of the direction, so reads and writes share one budget.
        self._device = TokenBucket(1.0)
        if self.is_dir:
            Path(spec.root).mkdir(parents=True, exist_ok=True)

    @property
    def tier_id(self) -> int:
        return self.spec.tier_id

    @property
    def is_dir(self) -> bool:
        return self.spec.kind is not TierKind.MEM_THROTTLED

    def set_throttle(self, read_bw: Optional[float] = None,
                     write_bw: Optional[float] = None) -> None:
        """Change the emulated bandwidth mid-run (external contention)."""
        if read_bw:
            self.spec.throttle_read_bw = read_bw
        if write_bw:
            self.spec.throttle_write_bw = write_bw

    def path(self, name: str) -> Path:
        return Path(self.spec.root) / name

    # -- raw blob transfer ----------------------------------------------
    def _chunks(self, view: memoryview, rate: Optional[float]):
        if not rate:
            step = 8 * MIB
        else:
            step = max(4096, int(rate * self._device.granularity))
        for off in range(0, len(view), step):
            chunk = view[off:off + step]
            if rate:
                self._device.consume(len(chunk) / rate)
            yield chunk

    def write_blob(self, name: str, parts: Sequence[memoryview]) -> IOStats:
        nbytes = sum(len(p) for p in parts)
        t0 = time.perf_counter()
        try:
            if self.is_dir:
                tmp = self.path(name + ".tmp")
                with open(tmp, "wb", buffering=0) as f:
                    for part in parts:
                        for chunk in self._chunks(part, self.spec.throttle_write_bw):
                            f.write(chunk)
                    os.fsync(f.fileno())
                os.replace(tmp, self.path(name))
            else:
                buf = bytearray(nbytes)
                dst = memoryview(buf)
                off = 0
                for part in parts:
                    for chunk in self._chunks(part, self.spec.throttle_write_bw):
                        dst[off:off + len(chunk)] = chunk
                        off += len(chunk)
                with self._store_lock:
                    self._store[name] = buf
        except OSError as exc:
            raise TierIOError(self.tier_id, f"write {name}: {exc}") from exc
        return IOStats(nbytes, time.perf_counter() - t0)

    def read_blob(self, name: str, header_size: int,
                  outs: Sequence[memoryview]) -> tuple[bytes, IOStats]:
        """Read a header then fill ``outs`` in order from the payload."""
        want = header_size + sum(len(o) for o in outs)
        t0 = time.perf_counter()
        try:
            if self.is_dir:
                p = self.path(name)
                if not p.exists():
                    raise PlacementInconsistencyError(
                        self.tier_id, f"{name} not found under {self.spec.root}")
                size = p.stat().st_size
                if size != want:
                    raise FormatError(self.tier_id,
                                      f"{name}: {size} bytes, expected {want}")
                with open(p, "rb", buffering=0) as f:
                    header = f.read(header_size)
                    for out in outs:
                        for chunk in self._chunks(out, self.spec.throttle_read_bw):
                            got = f.readinto(chunk)
                            if got != len(chunk):
                                raise FormatError(self.tier_id, f"{name}: short read")
            else:
                with self._store_lock:
                    buf = self._store.get(name)
                if buf is None:
                    raise PlacementInconsistencyError(
                        self.tier_id, f"{name} not present in memory tier")
                if len(buf) != want:
                    raise FormatError(self.tier_id,
                                      f"{name}: {len(buf)} bytes, expected {want}")
                src = memoryview(buf)
                header = bytes(src[:header_size])
                off = header_size
                for out in outs:
                    for chunk in self._chunks(out, self.spec.throttle_read_bw):
                        chunk[:] = src[off:off + len(chunk)]
                        off += len(chunk)
        except OSError as exc:
            raise TierIOError(self.tier_id, f"read {name}: {exc}") from exc
        return header, IOStats(want, time.perf_counter() - t0)

    def exists(self, name: str) -> bool:
        if self.is_dir:
            return self.path(name).exists()
        with self._store_lock:
            return name in self._store

    def delete(self, name: str) -> None:
        if self.is_dir:
            try:
                self.path(name).unlink()
            except FileNotFoundError:
                pass
        else:
            with self._store_lock:
                self._store.pop(name, None)

    def drop_cache(self, name: str) -> None:
        """Evict a file from the page cache so the next read hits storage."""
        if self.is_dir and hasattr(os, "posix_fadvise"):
            fd = os.open(self.path(name), os.O_RDONLY)
            try:
                os.posix_fadvise(fd, 0, 0, os.POSIX_FADV_DONTNEED)
            finally:
                os.close(fd)


def write_subgroup(tier: Tier, sg) -> IOStats:
    """Serialize ``sg`` (params, momentum, variance) to ``tier``.

    The caller must hold the tier's node-level lock.
    """
    parts = [memoryview(pack_header(sg.subgroup_id, sg.param_count))]
    parts += [_as_bytes(a) for a in (sg.params, sg.momentum, sg.variance)]
    for a in (sg.params, sg.momentum, sg.variance):
        if a.shape != (sg.param_count,):
            raise ValueError(f"subgroup {sg.subgroup_id}: tensor length mismatch")
    return tier.write_blob(subgroup_filename(sg.subgroup_id), parts)


def read_subgroup(tier: Tier, subgroup_id: int, param_count: Optional[int] = None,
                  out: Optional[Sequence[np.ndarray]] = None):
    """Load a subgroup's state from ``tier``.

    ``out`` is an optional sequence of three float32 arrays (a host buffer
    slot) to fill in place. Returns ``((params, momentum, variance), stats)``.
    """
    name = subgroup_filename(subgroup_id)
    if param_count is None:
        param_count = _peek_param_count(tier, name)
    if out is None:
        out = [np.empty(param_count, dtype=np.float32) for _ in range(STATE_TENSORS)]
    out = list(out)
    if len(out) != STATE_TENSORS or any(o.shape != (param_count,) for o in out):
        raise ValueError("destination buffers do not match param_count")
    header, stats = tier.read_blob(name, HEADER_SIZE, [_as_bytes(o) for o in out])
    sg_id, count = unpack_header(header, tier.tier_id)
    if sg_id != subgroup_id or count != param_count:
        raise FormatError(tier.tier_id,
                          f"{name}: header says subgroup {sg_id} with {count} params")
    return tuple(out), stats


def write_gradient(tier: Tier, subgroup_id: int, grad: np.ndarray) -> IOStats:
    parts = [memoryview(pack_header(subgroup_id, grad.size)), _as_bytes(grad)]
    return tier.write_blob(gradient_filename(subgroup_id), parts)


def read_gradient(tier: Tier, subgroup_id: int, out: np.ndarray) -> IOStats:
    name = gradient_filename(subgroup_id)
    header, stats = tier.read_blob(name, HEADER_SIZE, [_as_bytes(out)])
    sg_id, count = unpack_header(header, tier.tier_id)
    if sg_id != subgroup_id or count != out.size:
        raise FormatError(tier.tier_id, f"{name}: unexpected header")
    return stats


def _peek_param_count(tier: Tier, name: str) -> int:
    if tier.is_dir:
        p = tier.path(name)
        if not p.exists():
            raise PlacementInconsistencyError(tier.tier_id, f"{name} not found")
        with open(p, "rb") as f:
            raw = f.read(HEADER_SIZE)
    else:
        with tier._store_lock:
            buf = tier._store.get(name)
        if buf is None:
            raise PlacementInconsistencyError(tier.tier_id, f"{name} not present")
        raw = bytes(buf[:HEADER_SIZE])
    return unpack_header(raw, tier.tier_id)[1]


def probe_bandwidth(tier: Tier, probe_bytes: int = 64 * MIB,
                    repetitions: int = 4) -> tuple[float, float]:
    """Measure read/write bandwidth of ``tier`` in bytes/s.

    The first repetition is a warm-up and is discarded. Directory tiers are
    fsynced on write and evicted from the page cache before each read.
    Updates ``tier.spec.read_bw``/``write_bw`` and returns them.
    """
    if probe_bytes < MIB:
        raise ValueError("probe_bytes must be at least 1 MiB")
    if repetitions < 2:
        raise ValueError("need at least 2 repetitions (first is warm-up)")
    name = f"probe_{os.getpid()}_{threading.get_ident()}.bin"
    payload = np.frombuffer(os.urandom(probe_bytes), dtype=np.uint8)
    sink = np.empty(probe_bytes, dtype=np.uint8)
    resolution = time.get_clock_info("perf_counter").resolution
    writes, reads = [], []
    low_conf = False
    try:
        for rep in range(repetitions):
            w = tier.write_blob(name, [memoryview(payload)])
            tier.drop_cache(name)
            _, r = tier.read_blob(name, 0, [memoryview(sink)])
            if rep == 0:
                continue
            for stats, acc in ((w, writes), (r, reads)):
                dur = stats.duration
                if dur <= 0:
                    dur, low_conf = resolution, True
                acc.append(stats.bytes / dur)
    except TierIOError as exc:
        raise ProbeError(f"probe of tier {tier.tier_id} failed: {exc}") from exc
    except OSError as exc:
        raise ProbeError(f"probe of tier {tier.tier_id} failed: {exc}") from exc
    finally:
        try:
            tier.delete(name)
        except OSError:
            pass
    read_bw = float(np.mean(reads))
    write_bw = float(np.mean(writes))
    if low_conf:
        log.warning("tier %d: probe hit timer resolution; bandwidth is a bound",
                    tier.tier_id)
    tier.spec.read_bw, tier.spec.write_bw = read_bw, write_bw
    tier.spec.low_confidence = low_conf
    return read_bw, write_bw
