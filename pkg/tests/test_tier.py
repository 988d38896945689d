import struct
import time

import numpy as np
import pytest

from conftest import MB, mem_tier
from tierflow.errors import (ConfigurationError, FormatError, PlacementInconsistencyError,
                             ProbeError, TierIOError)
from tierflow.optimizer import Subgroup
from tierflow.ratelimit import TokenBucket
from tierflow.tier import (HEADER_SIZE, MIB, Tier, TierKind, TierSpec, probe_bandwidth,
                           read_subgroup, subgroup_filename, write_subgroup)


def _sg(sg_id, n, seed=0):
    rng = np.random.default_rng(seed)
    sg = Subgroup.allocate(sg_id, n, rng)
    sg.momentum[:] = rng.standard_normal(n, dtype=np.float32)
    sg.variance[:] = rng.random(n, dtype=np.float32)
    return sg


@pytest.fixture(params=["local_dir", "mem"])
def tier(request, tmp_path):
    if request.param == "mem":
        return Tier(TierSpec(0, TierKind.MEM_THROTTLED,
                             throttle_read_bw=10e9, throttle_write_bw=10e9))
    return Tier(TierSpec(0, TierKind.LOCAL_DIR, root=str(tmp_path / "t0")))


def test_header_layout_is_32_bytes_little_endian(tmp_path):
    t = Tier(TierSpec(3, TierKind.LOCAL_DIR, root=str(tmp_path)))
    write_subgroup(t, _sg(7, 5))
    raw = (tmp_path / "sg_000007.bin").read_bytes()
    assert HEADER_SIZE == 32
    magic, version, kind, sg_id, count = struct.unpack_from("<IHHIQ", raw)
    assert (magic, version, kind, sg_id, count) == (0x4D4C504F, 1, 0, 7, 5)
    assert raw[20:32] == bytes(12)


def test_path_convention(tmp_path):
    assert subgroup_filename(42) == "sg_000042.bin"
    t = Tier(TierSpec(0, TierKind.LOCAL_DIR, root=str(tmp_path)))
    write_subgroup(t, _sg(42, 3))
    assert (tmp_path / "sg_000042.bin").exists()


def test_thousand_params_payload_size(tmp_path):
    t = Tier(TierSpec(0, TierKind.LOCAL_DIR, root=str(tmp_path)))
    stats = write_subgroup(t, _sg(1, 1000))
    assert (tmp_path / "sg_000001.bin").stat().st_size == 12_000 + HEADER_SIZE
    assert stats.bytes == 12_000 + HEADER_SIZE


def test_round_trip_bitwise(tier):
    sg = _sg(3, 4097, seed=5)
    sg.params[:4] = [np.nan, -0.0, np.inf, 1e-45]
    write_subgroup(tier, sg)
    (p, m, v), stats = read_subgroup(tier, 3)
    for a, b in ((p, sg.params), (m, sg.momentum), (v, sg.variance)):
        assert a.tobytes() == b.tobytes()
    assert stats.duration >= 0


def test_read_into_preallocated_buffers(tier):
    sg = _sg(2, 100)
    write_subgroup(tier, sg)
    out = [np.zeros(100, np.float32) for _ in range(3)]
    (p, _, _), _ = read_subgroup(tier, 2, 100, out=out)
    assert p is out[0]
    assert np.array_equal(out[1], sg.momentum)


def test_never_written_is_placement_inconsistency(tier):
    with pytest.raises(PlacementInconsistencyError):
        read_subgroup(tier, 999, 10)
    with pytest.raises(PlacementInconsistencyError):
        read_subgroup(tier, 999)


def test_corrupt_header_is_format_error(tmp_path):
    t = Tier(TierSpec(0, TierKind.LOCAL_DIR, root=str(tmp_path)))
    write_subgroup(t, _sg(1, 10))
    path = tmp_path / "sg_000001.bin"
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_subgroup(t, 1, 10)


def test_truncated_file_is_format_error(tmp_path):
    t = Tier(TierSpec(0, TierKind.LOCAL_DIR, root=str(tmp_path)))
    write_subgroup(t, _sg(1, 10))
    path = tmp_path / "sg_000001.bin"
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError):
        read_subgroup(t, 1, 10)


def test_errors_carry_tier_id(tmp_path):
    t = Tier(TierSpec(5, TierKind.LOCAL_DIR, root=str(tmp_path)))
    with pytest.raises(TierIOError) as info:
        read_subgroup(t, 1, 10)
    assert info.value.tier_id == 5


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        TierSpec(0, TierKind.MEM_THROTTLED)
    with pytest.raises(ConfigurationError):
        TierSpec(0, TierKind.LOCAL_DIR)
    with pytest.raises(ConfigurationError):
        TierSpec(0, TierKind.MEM_THROTTLED, throttle_read_bw=1, throttle_write_bw=1,
                 io_parallelism=0)
    s = TierSpec(0, TierKind.MEM_THROTTLED, throttle_read_bw=200e6, throttle_write_bw=100e6)
    assert s.effective_bw == 100e6
    assert TierSpec(1, "remote_dir", root="/x").persistent is True


def test_token_bucket_paces_to_rate():
    bucket = TokenBucket(50e6)
    t0 = time.perf_counter()
    for _ in range(100):
        bucket.consume(100_000)
    assert time.perf_counter() - t0 == pytest.approx(0.2, rel=0.1)


@pytest.mark.slow
def test_write_100mb_at_100mbps_takes_one_second():
    t = mem_tier(0, 200, 100)
    n = 100_000_000 // 12
    sg = Subgroup(0, n, np.zeros(n, np.float32), np.zeros(n, np.float32),
                  np.zeros(n, np.float32))
    stats = write_subgroup(t, sg)
    assert stats.duration == pytest.approx(1.0, rel=0.10)
    _, stats = read_subgroup(t, 0, n)
    assert stats.duration == pytest.approx(0.5, rel=0.10)


@pytest.mark.parametrize("mib", [4, 16])
def test_throttle_fidelity(mib):
    t = mem_tier(0, 120, 80)
    payload = memoryview(bytearray(mib * MIB))
    w = t.write_blob("x", [payload])
    _, r = t.read_blob("x", 0, [memoryview(bytearray(mib * MIB))])
    assert w.duration == pytest.approx(mib * MIB / 80e6, rel=0.10)
    assert r.duration == pytest.approx(mib * MIB / 120e6, rel=0.10)


def test_probe_mem_tier_matches_throttle():
    t = mem_tier(0, 200, 100)
    rbw, wbw = probe_bandwidth(t, 8 * MIB, repetitions=3)
    assert rbw == pytest.approx(200 * MB, rel=0.10)
    assert wbw == pytest.approx(100 * MB, rel=0.10)
    assert (t.spec.read_bw, t.spec.write_bw) == (rbw, wbw)
    assert not t.spec.low_confidence


def test_probe_is_repeatable():
    t = mem_tier(0, 200, 100)
    # 16 MiB keeps a single scheduler hiccup small relative to the transfer
    a = probe_bandwidth(t, 16 * MIB, repetitions=3)
    b = probe_bandwidth(t, 16 * MIB, repetitions=3)
    for x, y in zip(a, b):
        assert abs(x - y) / max(x, y) < 0.10


def test_probe_halving_throttle_halves_bandwidth():
    t = mem_tier(0, 200, 200)
    full = probe_bandwidth(t, 4 * MIB, repetitions=3)
    t.set_throttle(100 * MB, 100 * MB)
    half = probe_bandwidth(t, 4 * MIB, repetitions=3)
    for f, h in zip(full, half):
        assert h / f == pytest.approx(0.5, rel=0.15)


def test_probe_local_dir_positive(tmp_path):
    root = tmp_path / "ssd"
    t = Tier(TierSpec(0, TierKind.LOCAL_DIR, root=str(root)))
    rbw, wbw = probe_bandwidth(t, MIB, repetitions=2)
    assert 0 < rbw < float("inf") and 0 < wbw < float("inf")
    assert list(root.iterdir()) == []


def test_probe_rejects_small_payload_and_missing_storage(tmp_path):
    t = mem_tier(0, 100)
    with pytest.raises(ValueError):
        probe_bandwidth(t, MIB - 1)
    target = tmp_path / "gone"
    bad = Tier(TierSpec(0, TierKind.LOCAL_DIR, root=str(target)))
    target.rmdir()
    with pytest.raises(ProbeError):
        probe_bandwidth(bad, MIB, repetitions=2)


def test_concurrent_directions_share_the_device():
    import threading

    t = mem_tier(0, 100, 100)
    t.write_blob("a", [memoryview(bytearray(4 * MIB))])
    sink = memoryview(bytearray(4 * MIB))
    t0 = time.perf_counter()
    reader = threading.Thread(target=t.read_blob, args=("a", 0, [sink]))
    reader.start()
    t.write_blob("b", [memoryview(bytearray(4 * MIB))])
    reader.join()
    assert time.perf_counter() - t0 == pytest.approx(8 * MIB / 100e6, rel=0.10)
