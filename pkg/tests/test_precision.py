import struct
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import f16_bits_to_fraction, f32_to_f16_bits_reference
from tierflow.errors import GradientOverflowError
from tierflow.precision import (FP16_MAX, GradBufferF16, downscale_f32_to_f16,
                                upscale_f16_to_f32)


def _finite_f16_bits():
    bits = np.arange(1 << 16, dtype=np.uint32).astype(np.uint16)
    return bits[(bits & 0x7C00) != 0x7C00]


def test_exact_widening_examples():
    out = upscale_f16_to_f32(np.array([1.0, -2.5, 0.0], dtype=np.float16))
    assert out.dtype == np.float32
    assert out.tolist() == [1.0, -2.5, 0.0]
    assert upscale_f16_to_f32(np.array([65504], dtype=np.float16))[0] == 65504.0
    assert FP16_MAX == 65504.0


def test_widening_is_exact_for_every_finite_half():
    bits = _finite_f16_bits()
    assert bits.size == 63488
    wide = upscale_f16_to_f32(bits.view(np.float16))
    sample = bits[::97]
    for b, w in zip(sample, wide[::97]):
        assert f16_bits_to_fraction(int(b)) == w  # Fraction == float compares exactly


def test_upscale_rejects_non_finite():
    for bad in (np.inf, -np.inf, np.nan):
        with pytest.raises(GradientOverflowError):
            upscale_f16_to_f32(np.array([1, bad], dtype=np.float16))
    with pytest.raises(FloatingPointError):  # usable as a standard FP signal
        upscale_f16_to_f32(np.array([np.nan], dtype=np.float16))


def test_upscale_into_buffer_and_type_checks():
    out = np.empty(4, np.float32)
    assert upscale_f16_to_f32(np.ones(4, np.float16), out=out) is out
    with pytest.raises(TypeError):
        upscale_f16_to_f32(np.ones(4, np.float32))
    with pytest.raises(ValueError):
        upscale_f16_to_f32(np.ones(4, np.float16), out=np.empty(3, np.float32))


def test_downscale_one():
    out, n = downscale_f32_to_f16(np.array([1.0], np.float32))
    assert out[0] == 1.0 and n == 0


def test_quarter_ulp_above_one_rounds_to_reference_neighbor():
    x = 1.0 + 2.0 ** -12
    expected = f32_to_f16_bits_reference(x)
    assert expected == struct.unpack("<H", struct.pack("<e", x))[0]
    out, _ = downscale_f32_to_f16(np.array([x], np.float32))
    assert int(out.view(np.uint16)[0]) == expected == 0x3C00


def test_ties_go_to_even():
    # 1 + 2^-11 sits exactly between 1.0 (even) and 1 + 2^-10 (odd)
    ties = np.array([1 + 2 ** -11, 1 + 3 * 2 ** -11, 2049.0, 2051.0], np.float32)
    out, _ = downscale_f32_to_f16(ties)
    assert out.astype(np.float64).tolist() == [1.0, 1 + 2 ** -9, 2048.0, 2052.0]


def test_overflow_maps_to_inf_and_is_counted():
    out, n = downscale_f32_to_f16(np.array([70000.0], np.float32))
    assert np.isposinf(out[0]) and n == 1
    out, n = downscale_f32_to_f16(np.array([-1e30, 65504.0, 65519.0, 65520.0], np.float32))
    assert np.isneginf(out[0]) and out[1] == 65504 and out[2] == 65504
    assert np.isposinf(out[3]) and n == 2
    _, n = downscale_f32_to_f16(np.array([np.inf, np.nan], np.float32))
    assert n == 0  # already non-finite inputs are not overflows


@given(st.lists(st.floats(width=32, allow_nan=False), min_size=1, max_size=64))
def test_downscale_matches_reference_softfloat(xs):
    arr = np.array(xs, dtype=np.float32)
    out, _ = downscale_f32_to_f16(arr)
    got = out.view(np.uint16).tolist()
    assert got == [f32_to_f16_bits_reference(float(x)) for x in arr]


def test_random_bulk_matches_reference():
    rng = np.random.default_rng(1)
    bits = rng.integers(0, 1 << 32, size=4000, dtype=np.uint64).astype(np.uint32)
    arr = bits.view(np.float32)
    arr = arr[np.isfinite(arr)]
    out, _ = downscale_f32_to_f16(arr)
    assert out.view(np.uint16).tolist() == [f32_to_f16_bits_reference(float(x)) for x in arr]


def test_exhaustive_round_trip():
    bits = _finite_f16_bits()
    back, n = downscale_f32_to_f16(upscale_f16_to_f32(bits.view(np.float16)))
    assert n == 0
    assert np.array_equal(back.view(np.uint16), bits)


@given(st.integers(0, 0xFFFF), st.integers(0, 0xFFFF))
def test_upscale_linearity(a, b):
    ha = np.array([a], np.uint16).view(np.float16)
    hb = np.array([b], np.uint16).view(np.float16)
    if not (np.isfinite(ha[0]) and np.isfinite(hb[0])):
        return
    s = upscale_f16_to_f32(ha) + upscale_f16_to_f32(hb)
    exact = f16_bits_to_fraction(a) + f16_bits_to_fraction(b)
    assert s[0] == np.float32(float(exact))


def test_threaded_conversion_matches_single():
    x = np.random.default_rng(0).standard_normal(1_000_003).astype(np.float32) * 1e4
    a, na = downscale_f32_to_f16(x, threads=1)
    b, nb = downscale_f32_to_f16(x, threads=4)
    assert np.array_equal(a.view(np.uint16), b.view(np.uint16)) and na == nb


def test_upscale_throughput_floor():
    g = np.random.default_rng(0).standard_normal(1 << 24).astype(np.float16)
    out = np.empty(g.size, np.float32)
    upscale_f16_to_f32(g, out=out)
    best = min(_timed(lambda: upscale_f16_to_f32(g, out=out)) for _ in range(3))
    assert out.nbytes / best >= 1e9  # FP32 bytes produced per second


def _timed(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def test_grad_buffer_accumulates_in_fp32():
    buf = GradBufferF16(3)
    assert len(buf) == 3
    buf.accumulate(np.array([1.0, 2048.0, 0.5], np.float16))
    buf.accumulate(np.array([2 ** -11, 1.0, 0.25], np.float16))
    # 1 + 2^-11 is a tie (stays 1.0); 2049 also ties down to 2048
    assert buf.data.astype(np.float64).tolist() == [1.0, 2048.0, 0.75]
    assert buf.accumulation_steps == 2 and buf.is_finite()
    buf.accumulate(np.array([0, 65504, 0], np.float16))  # 2048 + 65504 overflows
    assert not buf.is_finite()
    buf.reset()
    assert buf.accumulation_steps == 0 and not buf.data.any()
    with pytest.raises(ValueError):
        buf.accumulate(np.zeros(2, np.float16))
