import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpcl.ringnum import (
    CONTINUOUS_CODEC,
    DISCRETE_CODEC,
    FixedCodec,
    RingOverflowError,
    RingValue,
    add_array,
    decode,
    decode_array,
    encode,
    encode_array,
    ring_add,
    ring_mul,
    ring_mul_public,
    ring_sub,
    shift_right_array,
)


def test_encode_examples():
    assert encode(0.5, FixedCodec(32, 16)).raw == 32768
    assert encode(0.0, FixedCodec(32, 16)).raw == 0
    assert encode(0.0, DISCRETE_CODEC).raw == 0
    assert encode(-1.25, FixedCodec(16, 8)).raw == 65216
    # independent two's-complement oracle
    assert encode(-1.25, FixedCodec(16, 8)).raw == (1 << 16) - 320


def test_decode_examples():
    assert decode(RingValue(32768, FixedCodec(32, 16))) == 0.5
    for k in (8, 16, 32):
        c = FixedCodec(k, 0)
        assert decode(RingValue(1 << (k - 1), c)) == -(2 ** (k - 1))
    assert decode(RingValue(65216, FixedCodec(16, 8))) == -1.25


def test_ring_ops_examples():
    c = CONTINUOUS_CODEC
    assert ring_add(encode(1.0), encode(2.0)) == encode(3.0)
    assert ring_mul_public(encode(0.5), 4) == encode(2.0)
    assert ring_add(RingValue(c.mask, c), RingValue(1, c)).raw == 0
    assert ring_sub(RingValue(0, c), RingValue(1, c)).raw == c.mask
    assert decode(ring_mul(encode(1.5), encode(-2.0))) == -3.0


def test_overflow_errors_identify_value():
    with pytest.raises(RingOverflowError, match="40000"):
        encode(40000.0, CONTINUOUS_CODEC)
    with pytest.raises(RingOverflowError):
        encode_array([0.0, 1e9])
    with pytest.raises(RingOverflowError):
        encode(float("nan"))
    with pytest.raises(RingOverflowError, match="signed overflow"):
        ring_add(encode(30000.0), encode(30000.0), checked=True)
    # unchecked mode wraps
    ring_add(encode(30000.0), encode(30000.0))


def test_codec_validation():
    with pytest.raises(ValueError):
        FixedCodec(0, 0)
    with pytest.raises(ValueError):
        FixedCodec(65, 16)
    with pytest.raises(ValueError):
        FixedCodec(16, 16)
    with pytest.raises(ValueError):
        RingValue(1 << 32, CONTINUOUS_CODEC)
    with pytest.raises(ValueError, match="codec mismatch"):
        ring_add(encode(1.0), encode(1.0, FixedCodec(16, 8)))


def test_ties_round_to_even():
    c = FixedCodec(16, 0)
    assert encode(2.5, c).raw == 2
    assert encode(3.5, c).raw == 4
    assert list(encode_array([2.5, 3.5, -2.5], c)) == [2, 4, (1 << 16) - 2]


def test_stochastic_rounding_is_unbiased():
    rng = np.random.default_rng(0)
    c = FixedCodec(32, 2)
    raw = encode_array(np.full(100_000, 0.1), c, rounding="stochastic", rng=rng)
    assert abs(decode_array(raw, c).mean() - 0.1) < 1e-3
    with pytest.raises(ValueError):
        encode(0.1, c, rounding="stochastic")


def test_round_trip_bulk():
    rng = np.random.default_rng(1)
    for c in (CONTINUOUS_CODEC, FixedCodec(64, 16), FixedCodec(16, 8)):
        x = rng.uniform(c.min_value, c.max_value - 1, 100_000)
        err = np.abs(decode_array(encode_array(x, c), c) - x)
        assert err.max() <= 2.0 ** (-c.frac_bits - 1)


def test_array_forms_match_scalar_forms():
    rng = np.random.default_rng(2)
    x = rng.uniform(-100, 100, 200)
    raw = encode_array(x)
    assert [int(r) for r in raw] == [encode(v).raw for v in x]
    np.testing.assert_array_equal(decode_array(raw), [decode(RingValue(int(r))) for r in raw])


@given(st.floats(-1000, 1000), st.floats(-1000, 1000))
def test_add_homomorphism(x, y):
    c = CONTINUOUS_CODEC
    a, b = encode(x, c), encode(y, c)
    exact = decode(a) + decode(b)
    assert decode(ring_add(a, b)) == exact


@given(st.floats(-100, 100), st.floats(-100, 100))
def test_fixed_point_product_error(x, y):
    a, b = encode(x), encode(y)
    err = abs(decode(ring_mul(a, b)) - decode(a) * decode(b))
    assert err <= 2.0 ** -16


@settings(max_examples=50)
@given(st.integers(-(2 ** 40), 2 ** 40), st.integers(0, 20))
def test_shift_is_arithmetic(v, bits):
    c = FixedCodec(64, 16)
    raw = np.array([v], dtype=np.int64).astype(np.uint64)
    assert int(decode_array(shift_right_array(raw, bits, c), FixedCodec(64, 0))[0]) == v >> bits


def test_add_array_wraps():
    c = FixedCodec(8, 0)
    assert int(add_array(np.uint64(255), np.uint64(3), c)) == 2
