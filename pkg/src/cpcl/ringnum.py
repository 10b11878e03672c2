"""Fixed-point numbers living in the ring Z_{2^k}.

Two layers are provided. ``RingValue`` with ``encode``/``decode`` and the
``ring_*`` functions work on single Python integers and are exact for every
``k <= 64``. The ``*_array`` helpers do the same on ``numpy.uint64`` arrays and
are what the multi-party simulator uses internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class RingOverflowError(ValueError):
    """A real value does not fit the signed range of a codec."""


@dataclass(frozen=True)
class FixedCodec:
    """Fixed-point interpretation of Z_{2^k} with ``frac_bits`` fractional bits."""

    total_bits: int = 32
    frac_bits: int = 16

    def __post_init__(self) -> None:
        if not 0 < self.total_bits <= 64:
            raise ValueError(f"total_bits must be in (0, 64], got {self.total_bits}")
        if not 0 <= self.frac_bits < self.total_bits:
            raise ValueError(
                f"frac_bits must be in [0, total_bits), got {self.frac_bits}"
            )

    @property
    def modulus(self) -> int:
        return 1 << self.total_bits

    @property
    def mask(self) -> int:
        return self.modulus - 1

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def max_value(self) -> float:
        """Largest representable real (exclusive upper end of the range)."""
        return float(1 << (self.total_bits - 1 - self.frac_bits))

    @property
    def min_value(self) -> float:
        return -self.max_value

    @property
    def resolution(self) -> float:
        return 1.0 / self.scale


# Continuous mechanisms run on 32-bit fixed point, discrete ones on 16-bit integers.
CONTINUOUS_CODEC = FixedCodec(32, 16)
DISCRETE_CODEC = FixedCodec(16, 0)
# Share-domain computation needs headroom for products before truncation.
SHARE_CODEC = FixedCodec(64, 16)


@dataclass(frozen=True)
class RingValue:
    raw: int
    codec: FixedCodec = CONTINUOUS_CODEC

    def __post_init__(self) -> None:
        if not 0 <= self.raw < self.codec.modulus:
            raise ValueError(f"raw value {self.raw} outside Z_2^{self.codec.total_bits}")


def _to_signed(raw: int, codec: FixedCodec) -> int:
    half = 1 << (codec.total_bits - 1)
    return raw - codec.modulus if raw >= half else raw


def _round_scaled(x: float, codec: FixedCodec, rounding: str, rng) -> int:
    scaled = x * codec.scale
    if rounding == "nearest_even":
        return int(round(scaled))
    if rounding == "stochastic":
        if rng is None:
            raise ValueError("stochastic rounding needs an rng")
        low = np.floor(scaled)
        return int(low) + int(rng.random() < scaled - low)
    raise ValueError(f"unknown rounding mode {rounding!r}")


def encode(
    x: float,
    codec: FixedCodec = CONTINUOUS_CODEC,
    *,
    rounding: str = "nearest_even",
    rng: np.random.Generator | None = None,
) -> RingValue:
    """Encode a real as a ring element.

    Rounds to nearest with ties to even unless ``rounding="stochastic"``.
    """
    if not np.isfinite(x):
        raise RingOverflowError(f"cannot encode non-finite value {x!r}")
    q = _round_scaled(float(x), codec, rounding, rng)
    half = 1 << (codec.total_bits - 1)
    if not -half <= q < half:
        raise RingOverflowError(
            f"value {x!r} outside representable range "
            f"[{codec.min_value}, {codec.max_value}) for k={codec.total_bits}, "
            f"f={codec.frac_bits}"
        )
    return RingValue(q % codec.modulus, codec)


def decode(v: RingValue, codec: FixedCodec | None = None) -> float:
    codec = codec or v.codec
    return _to_signed(v.raw, codec) / codec.scale


def ring_add(a: RingValue, b: RingValue, *, checked: bool = False) -> RingValue:
    _same_codec(a, b)
    c = a.codec
    if checked:
        _check_signed(_to_signed(a.raw, c) + _to_signed(b.raw, c), c, "add")
    return RingValue((a.raw + b.raw) & c.mask, c)


def ring_sub(a: RingValue, b: RingValue, *, checked: bool = False) -> RingValue:
    _same_codec(a, b)
    c = a.codec
    if checked:
        _check_signed(_to_signed(a.raw, c) - _to_signed(b.raw, c), c, "sub")
    return RingValue((a.raw - b.raw) & c.mask, c)


def ring_mul_public(a: RingValue, b: int, *, checked: bool = False) -> RingValue:
    """Multiply by a public integer. Exact mod 2^k, no truncation."""
    c = a.codec
    if checked:
        _check_signed(_to_signed(a.raw, c) * int(b), c, "mul_public")
    return RingValue((a.raw * int(b)) & c.mask, c)


def ring_mul(a: RingValue, b: RingValue, *, checked: bool = False) -> RingValue:
    """Fixed-point product: raw signed product, then arithmetic shift by f bits."""
    _same_codec(a, b)
    c = a.codec
    prod = (_to_signed(a.raw, c) * _to_signed(b.raw, c)) >> c.frac_bits
    if checked:
        _check_signed(prod, c, "mul")
    return RingValue(prod & c.mask, c)


def _same_codec(a: RingValue, b: RingValue) -> None:
    if a.codec != b.codec:
        raise ValueError(f"codec mismatch: {a.codec} vs {b.codec}")


def _check_signed(value: int, codec: FixedCodec, op: str) -> None:
    half = 1 << (codec.total_bits - 1)
    if not -half <= value < half:
        raise RingOverflowError(f"signed overflow in {op}: {value} needs more than {codec.total_bits} bits")


# ---------------------------------------------------------------------------
# vectorised forms


def encode_array(
    x,
    codec: FixedCodec = CONTINUOUS_CODEC,
    *,
    rounding: str = "nearest_even",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        bad = x[~np.isfinite(x)].flat[0]
        raise RingOverflowError(f"cannot encode non-finite value {bad!r}")
    scaled = x * codec.scale
    if rounding == "nearest_even":
        q = np.rint(scaled)
    elif rounding == "stochastic":
        if rng is None:
            raise ValueError("stochastic rounding needs an rng")
        low = np.floor(scaled)
        q = low + (rng.random(x.shape) < scaled - low)
    else:
        raise ValueError(f"unknown rounding mode {rounding!r}")
    half = float(1 << (codec.total_bits - 1))
    out_of_range = (q < -half) | (q >= half)
    if np.any(out_of_range):
        bad = x[out_of_range].flat[0]
        raise RingOverflowError(
            f"value {bad!r} outside representable range "
            f"[{codec.min_value}, {codec.max_value}) for k={codec.total_bits}, "
            f"f={codec.frac_bits}"
        )
    return wrap_signed(q.astype(np.int64), codec)


def wrap_signed(values, codec: FixedCodec) -> np.ndarray:
    """Map signed integers to their ring representatives as uint64."""
    raw = np.asarray(values, dtype=np.int64).astype(np.uint64)
    return raw & np.uint64(codec.mask)


def to_signed_array(raw, codec: FixedCodec) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.uint64)
    if codec.total_bits == 64:
        return raw.view(np.int64)
    signed = raw.astype(np.int64)
    half = 1 << (codec.total_bits - 1)
    return np.where(signed >= half, signed - (1 << codec.total_bits), signed)


def decode_array(raw, codec: FixedCodec = CONTINUOUS_CODEC) -> np.ndarray:
    return to_signed_array(raw, codec).astype(np.float64) / codec.scale


def add_array(a, b, codec: FixedCodec) -> np.ndarray:
    return (np.asarray(a, np.uint64) + np.asarray(b, np.uint64)) & np.uint64(codec.mask)


def sub_array(a, b, codec: FixedCodec) -> np.ndarray:
    return (np.asarray(a, np.uint64) - np.asarray(b, np.uint64)) & np.uint64(codec.mask)


def mul_public_array(a, b: int, codec: FixedCodec) -> np.ndarray:
    factor = np.uint64(int(b) % codec.modulus)
    return (np.asarray(a, np.uint64) * factor) & np.uint64(codec.mask)


def shift_right_array(raw, bits: int, codec: FixedCodec) -> np.ndarray:
    """Arithmetic right shift of ring elements read as signed integers."""
    return wrap_signed(to_signed_array(raw, codec) >> bits, codec)
