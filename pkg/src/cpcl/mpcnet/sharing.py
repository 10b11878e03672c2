"""Additive secret sharing and pairwise masking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ..ringnum import FixedCodec, SHARE_CODEC, add_array, decode_array, encode_array, sub_array
from ..sampler import UniformSource
from .parties import PartyId

SCHEME = "additive_mm"


@dataclass(frozen=True)
class ShareVector:
    """One party's additive share of a logical vector."""

    owner: PartyId
    values: np.ndarray
    codec: FixedCodec
    index: int
    of: int
    scheme: str = SCHEME


@dataclass(frozen=True)
class MaskedVector:
    owner: PartyId
    values: np.ndarray
    codec: FixedCodec


def random_ring(src: UniformSource, shape, codec: FixedCodec) -> np.ndarray:
    return src.bits(codec.total_bits, shape)


def split_raw(raw: np.ndarray, m: int, src: UniformSource, codec: FixedCodec) -> np.ndarray:
    """Stack of m additive shares of ``raw``; the first m-1 are uniform."""
    raw = np.asarray(raw, dtype=np.uint64)
    out = np.empty((m,) + raw.shape, dtype=np.uint64)
    acc = np.zeros(raw.shape, dtype=np.uint64)
    for j in range(m - 1):
        out[j] = random_ring(src, raw.shape, codec)
        acc = add_array(acc, out[j], codec)
    out[m - 1] = sub_array(raw, acc, codec)
    return out


def share(x, m: int, src: UniformSource, codec: FixedCodec = SHARE_CODEC,
          holders: Sequence[PartyId] | None = None) -> list[ShareVector]:
    """Split a real vector into m additive shares, one per server."""
    if m < 2:
        raise ValueError("additive sharing needs m >= 2")
    holders = list(holders) if holders is not None else [PartyId("server", j) for j in range(m)]
    if len(holders) != m:
        raise ValueError("need one holder per share")
    parts = split_raw(encode_array(x, codec), m, src, codec)
    return [ShareVector(h, parts[j], codec, j, m) for j, h in enumerate(holders)]


def reconstruct_raw(shares: Sequence[ShareVector]) -> np.ndarray:
    if not shares:
        raise ValueError("no shares given")
    total = shares[0].of
    codec = shares[0].codec
    have = {s.index: s for s in shares}
    missing = [i for i in range(total) if i not in have]
    if missing:
        raise ValueError(f"missing share {missing[0]} (held by server{missing[0]}) of {total}")
    shape = shares[0].values.shape
    acc = np.zeros(shape, dtype=np.uint64)
    for s in shares:
        if s.values.shape != shape or s.codec != codec:
            raise ValueError(f"share held by {s.owner} does not match the others")
        acc = add_array(acc, s.values, codec)
    return acc


def reconstruct(shares: Sequence[ShareVector]) -> np.ndarray:
    return decode_array(reconstruct_raw(shares), shares[0].codec)


# ---------------------------------------------------------------------------
# pairwise masking


def pair_seeds(n: int, src: UniformSource) -> dict[tuple[int, int], int]:
    """One seed per unordered client pair (i < j)."""
    seeds = {}
    for i in range(n):
        for j in range(i + 1, n):
            seeds[(i, j)] = int(src.bits(63))
    return seeds


def _prg(seed: int, round_id: int, shape, codec: FixedCodec) -> np.ndarray:
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(round_id,))))
    raw = gen.integers(0, np.iinfo(np.int64).max, size=shape, dtype=np.int64, endpoint=True).astype(np.uint64)
    raw ^= gen.integers(0, 2, size=shape, dtype=np.int64).astype(np.uint64) << np.uint64(63)
    return raw & np.uint64(codec.mask)


def pairwise_mask(local_raw: np.ndarray, me: int, peers: Sequence[int],
                  seeds: Mapping[tuple[int, int], int], codec: FixedCodec,
                  round_id: int = 0) -> MaskedVector:
    """Blind a raw ring vector with pairwise cancelling masks.

    For each pair the lower index adds the shared mask and the higher index
    subtracts it, so the masks vanish in the sum over all participants.
    """
    out = np.asarray(local_raw, dtype=np.uint64).copy()
    for p in peers:
        if p == me:
            continue
        key = (min(me, p), max(me, p))
        if key not in seeds:
            raise ValueError(f"no mask seed for live pair {key}")
        mask = _prg(seeds[key], round_id, out.shape, codec)
        out = add_array(out, mask, codec) if me < p else sub_array(out, mask, codec)
    return MaskedVector(PartyId("client", me), out, codec)
