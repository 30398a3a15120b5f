import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cherryq.errors import ConfigError, CorruptCheckpointError, DataError
from cherryq.quant import (
    PackedBlob, QuantConfig, avg_bits, cherry_count, code_range, dequantize, dequantize_asymmetric,
    fake_quant, fake_quant_grouped, pack_codes, packed_length, quantize_asymmetric, quantize_grouped,
    quantize_symmetric, round_half_away, unpack_codes,
)


def nearest_grid_oracle(x, scale, k):
    """Brute force over the 2**k points scale * (n + 0.5): returns (n, value) of the closest."""
    n = np.arange(-(1 << (k - 1)), 1 << (k - 1))
    grid = scale[..., None] * (n + 0.5)
    best = np.abs(x[..., None] - grid).argmin(-1)
    return n[best], np.take_along_axis(grid, best[..., None], -1)[..., 0]


# -- hand-computed examples ------------------------------------------------------------

def test_two_bit_worked_example():
    x = np.array([1.0, -1.0, 0.3, -0.2])
    codes, s = quantize_symmetric(x, 2)
    assert s == np.float32(0.5)
    assert codes.tolist() == [1, -2, 0, -1]
    np.testing.assert_array_equal(dequantize(codes, s, 2), [0.75, -0.75, 0.25, -0.25])


def test_three_bit_endpoints_clip_to_outer_levels():
    x = np.array([4.0, -4.0, 0.0])
    codes, s = quantize_symmetric(x, 3)
    assert s == 1.0
    lo, hi = code_range(3)
    assert codes[0] == hi and codes[1] == lo


def test_zero_group_gives_zero():
    codes, s = quantize_symmetric(np.zeros(5), 3)
    assert s == 0 and not codes.any()
    assert not dequantize(codes, s, 3).any()


def test_empty_and_nonfinite_rejected():
    with pytest.raises(DataError):
        quantize_symmetric(np.array([]), 3)
    with pytest.raises(DataError):
        quantize_symmetric(np.array([1.0, np.nan]), 3)


def test_dequantize_rejects_out_of_range_code():
    with pytest.raises(DataError):
        dequantize(np.array([4]), 1.0, 3)


def test_round_half_away():
    assert round_half_away(np.array([0.5, -0.5, 1.5, -2.5, 0.49])).tolist() == [1, -1, 2, -3, 0]


# -- brute-force conformance -------------------------------------------------------

@pytest.mark.parametrize("k", [2, 3, 4])
def test_matches_nearest_grid_oracle(k):
    rng = np.random.default_rng(k)
    x = (rng.standard_normal((1000, 100)) * rng.lognormal(0, 2, size=(1000, 1))).astype(np.float32)
    q = quantize_grouped(x, k, 100)
    scale = np.repeat(q.scales.astype(np.float64), 100, axis=1)
    n, value = nearest_grid_oracle(x.astype(np.float64), scale, k)
    np.testing.assert_array_equal(q.codes, n)
    np.testing.assert_allclose(q.dequantize(), value, rtol=2e-7, atol=0)


@pytest.mark.parametrize("k", [2, 3, 4])
def test_fixed_scale_idempotent(k):
    rng = np.random.default_rng(10 + k)
    x = rng.normal(size=500)
    codes, s = quantize_symmetric(x, k)
    once = dequantize(codes, s, k)
    twice = fake_quant(once, k, scale=s)
    np.testing.assert_array_equal(once, twice)


def test_dynamic_scale_requantization_shrinks():
    # re-deriving the MinMax scale from already-quantized values moves the grid
    once = fake_quant(np.array([-1.0, 0.7]), 3)
    twice = fake_quant(once, 3)
    assert np.abs(twice).max() < np.abs(once).max()


@pytest.mark.parametrize("k", [2, 3, 4])
def test_odd_symmetry_away_from_ties(k):
    rng = np.random.default_rng(20 + k)
    x = rng.normal(size=2000)
    s = np.abs(x).max() / (1 << (k - 1))
    # drop values that sit on a decision boundary (integer multiples of S)
    keep = np.abs(x / s - np.round(x / s)) > 1e-6
    x = x[keep]
    np.testing.assert_array_equal(fake_quant(-x, k, scale=s), -fake_quant(x, k, scale=s))


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False, width=32), min_size=1, max_size=64),
       st.sampled_from([2, 3, 4]))
@settings(max_examples=200, deadline=None)
def test_error_bounded_by_half_step(values, k):
    x = np.array(values, dtype=np.float32)
    codes, s = quantize_symmetric(x, k)
    err = np.abs(dequantize(codes, s, k) - x)
    assert np.all(err <= 0.5 * s * (1 + 1e-5) + 1e-30)


def test_grouped_partial_last_group():
    m = np.arange(1, 11, dtype=np.float32).reshape(1, 10)
    q = quantize_grouped(m, 3, 4)
    assert q.scales.shape == (1, 3)
    np.testing.assert_allclose(q.scales[0], [4 / 4, 8 / 4, 10 / 4])


def test_grouped_fp16_scales_store_exactly():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(8, 33)).astype(np.float32)
    q = quantize_grouped(m, 3, 8, scale_dtype=np.float16)
    assert q.scales.dtype == np.float16
    np.testing.assert_array_equal(q.dequantize(), fake_quant_grouped(m, 3, 8, scale_dtype=np.float16))


def test_asymmetric_round_trip_on_grid():
    x = np.array([-1.0, 0.0, 0.5, 2.0])
    codes, s, z = quantize_asymmetric(x, 2)
    assert codes.min() == 0 and codes.max() == 3
    np.testing.assert_allclose(dequantize_asymmetric(codes, s, z, 2), [-1.0, 0.0, 1.0, 2.0], atol=1e-6)


# -- packing ------------------------------------------------------------------------

@pytest.mark.parametrize("k", [2, 3, 4])
def test_pack_unpack_every_length(k):
    rng = np.random.default_rng(k)
    lo, hi = code_range(k)
    for n in range(0, 1001):
        codes = rng.integers(lo, hi + 1, size=n).astype(np.int8)
        blob = pack_codes(codes, k)
        assert len(blob.data) == packed_length(n, k)
        np.testing.assert_array_equal(unpack_codes(blob), codes)


def test_pack_density():
    assert packed_length(4, 2) == 1
    assert packed_length(8, 3) == 3
    assert packed_length(2, 4) == 1
    assert packed_length(0, 3) == 0


def test_pack_bit_order_lsb_first():
    # k=2, codes offset by 2: [-2, -1, 0, 1] -> [0, 1, 2, 3] -> 0b11100100
    assert pack_codes(np.array([-2, -1, 0, 1]), 2).data == bytes([0b11100100])


def test_unpack_detects_bad_blobs():
    blob = pack_codes(np.array([0, 1, -1], dtype=np.int8), 3)
    with pytest.raises(CorruptCheckpointError):
        unpack_codes(PackedBlob(blob.data + b"\0", 3, 3))
    with pytest.raises(CorruptCheckpointError):
        unpack_codes(PackedBlob(blob.data, 3, 3, layout="msb"))
    with pytest.raises(CorruptCheckpointError):
        unpack_codes(PackedBlob(bytes([blob.data[0], blob.data[1] | 0x80]), 3, 3))


def test_pack_rejects_out_of_range():
    with pytest.raises(DataError):
        pack_codes(np.array([2]), 2)


# -- bit accounting -------------------------------------------------------------------

AVG_BITS_TABLE = [
    (QuantConfig(bits=3, group_size=128, cherry_fraction=1 / 256), 3.17),
    (QuantConfig(bits=3, group_size=64, cherry_fraction=1 / 256), 3.30),
    (QuantConfig(bits=4, group_size=128, cherry_fraction=1 / 256), 4.17),
    (QuantConfig(bits=2, group_size=128, cherry_fraction=1 / 256, scale_trick=True), 2.19),
    (QuantConfig(bits=3, group_size=128, cherry_fraction=0), 3.13),
    (QuantConfig(bits=3, group_size=64, cherry_fraction=0), 3.25),
]


@pytest.mark.parametrize("config,expected", AVG_BITS_TABLE)
def test_avg_bits_published_values(config, expected):
    assert avg_bits(config, 4096, 4096) == pytest.approx(expected, abs=0.01)


def test_avg_bits_closed_form():
    c = QuantConfig(bits=3, group_size=128, cherry_fraction=1 / 256)
    assert avg_bits(c, 4096, 4096) == 3 + 16 / 128 + (16 - 3) / 256 + 16 * 16 / 4096 ** 2


def test_avg_bits_errors():
    with pytest.raises(ConfigError):
        avg_bits(QuantConfig(), 0, 10)
    with pytest.raises(ConfigError):
        QuantConfig(group_size=0)
    with pytest.raises(ConfigError):
        QuantConfig(bits=5)


def test_cherry_count():
    assert cherry_count(4096, 1 / 256) == 16
    assert cherry_count(64, 1 / 256) == 1
    assert cherry_count(64, 0) == 0
