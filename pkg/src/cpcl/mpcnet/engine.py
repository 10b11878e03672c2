"""Computation on additive shares held by m simulated servers.

All shares of a logical tensor are kept stacked in one ``uint64`` array of shape
``(m, *shape)``; row j is what server j holds. Every operation charges its
messages, rounds and ring operations to the party that performs them in the
tracer's current phase. Dealer work is charged to the ``Offline`` phase.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..ringnum import (
    FixedCodec,
    SHARE_CODEC,
    add_array,
    decode_array,
    encode_array,
    mul_public_array,
    sub_array,
    to_signed_array,
    wrap_signed,
)
from ..sampler import UniformSource
from .parties import DEALER, PartyId
from .sharing import split_raw
from .trace import OFFLINE, Tracer


class TripleReuseError(RuntimeError):
    pass


class DomainError(ValueError):
    """A shared value left the domain an operation is valid on (debug mode)."""


@dataclass
class Shared:
    shares: np.ndarray
    frac: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.shares.shape[1:]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def m(self) -> int:
        return self.shares.shape[0]

    def __getitem__(self, idx) -> "Shared":
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Shared(self.shares[(slice(None),) + idx], self.frac)

    def reshape(self, *shape) -> "Shared":
        return Shared(self.shares.reshape((self.m,) + tuple(shape)), self.frac)

    @property
    def T(self) -> "Shared":
        return Shared(np.swapaxes(self.shares, -1, -2), self.frac)


def concat(parts: Sequence[Shared], axis: int = 0) -> Shared:
    frac = parts[0].frac
    if any(p.frac != frac for p in parts):
        raise ValueError("cannot concatenate shares with different scales")
    ax = axis + 1 if axis >= 0 else axis
    return Shared(np.concatenate([p.shares for p in parts], axis=ax), frac)


@dataclass
class BeaverTriple:
    """Shares of (a, b, c) with c = a*b (or a@b) in the ring, before truncation."""

    tid: int
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    kind: str = "mul"


class Dealer:
    """Trusted dealer for the offline phase."""

    def __init__(self, m: int, codec: FixedCodec, src: UniformSource, tracer: Tracer):
        self.m = m
        self.codec = codec
        self.src = src
        self.tracer = tracer
        self._next = 0
        self.used: set[int] = set()

    def _ship(self, elements: int) -> None:
        eb = bytes_per_element(self.codec)
        self.tracer.message(DEALER, elements * eb, count=self.m, phase=OFFLINE)
        self.tracer.ops(DEALER, ring=elements * self.m, phase=OFFLINE)
        self.tracer.round(DEALER, phase=OFFLINE)

    def triple(self, shape_a, shape_b=None, kind: str = "mul") -> BeaverTriple:
        c_ = self.codec
        a = self.src.bits(c_.total_bits, shape_a)
        b = self.src.bits(c_.total_bits, shape_b if shape_b is not None else shape_a)
        if kind == "mul":
            c = (a * b) & np.uint64(c_.mask)
        elif kind == "matmul":
            c = np.matmul(a, b) & np.uint64(c_.mask)
        else:
            raise ValueError(f"unknown triple kind {kind!r}")
        t = BeaverTriple(self._next, split_raw(a, self.m, self.src, c_),
                         split_raw(b, self.m, self.src, c_), split_raw(c, self.m, self.src, c_), kind)
        self._next += 1
        self._ship(a.size + b.size + c.size)
        return t

    def consume(self, triple: BeaverTriple) -> None:
        if triple.tid in self.used:
            raise TripleReuseError(f"Beaver triple {triple.tid} used twice")
        self.used.add(triple.tid)

    def truncation_pair(self, shape, bits: int) -> tuple[np.ndarray, np.ndarray]:
        """Shares of r uniform in [0, 2^(k-1)) and of r >> bits."""
        c_ = self.codec
        r = self.src.bits(c_.total_bits - 1, shape)
        pair = split_raw(r, self.m, self.src, c_), split_raw(r >> np.uint64(bits), self.m, self.src, c_)
        self._ship(2 * r.size)
        return pair


def bytes_per_element(codec: FixedCodec) -> int:
    return (codec.total_bits + 7) // 8


class MPCEngine:
    """The m computing servers together with their dealer."""

    def __init__(self, m: int, src: UniformSource, codec: FixedCodec = SHARE_CODEC,
                 tracer: Tracer | None = None, debug: bool = False):
        if m < 2:
            raise ValueError("share computation needs at least two servers")
        self.m = m
        self.codec = codec
        self.src = src
        self.tracer = tracer if tracer is not None else Tracer()
        self.debug = debug
        self.servers = [PartyId("server", j) for j in range(m)]
        self.dealer = Dealer(m, codec, src.spawn(9_999), self.tracer)
        self._eb = bytes_per_element(codec)

    @property
    def f(self) -> int:
        return self.codec.frac_bits

    # -- accounting -------------------------------------------------------

    def _local(self, elements: int, per: int = 1) -> None:
        for s in self.servers:
            self.tracer.ops(s, ring=elements * per)

    def _broadcast(self, elements: int) -> None:
        """Every server sends ``elements`` ring elements to every other server."""
        for s in self.servers:
            self.tracer.message(s, elements * self._eb, count=self.m - 1)
            self.tracer.round(s)
            self.tracer.ops(s, ring=elements * (self.m - 1))

    # -- creation and output ---------------------------------------------

    def input(self, owner: PartyId, x, frac: int | None = None) -> Shared:
        """``owner`` secret-shares a real tensor to all servers."""
        frac = self.f if frac is None else frac
        codec = FixedCodec(self.codec.total_bits, frac) if frac != self.f else self.codec
        return self.input_raw(owner, encode_array(x, codec), frac)

    def input_raw(self, owner: PartyId, raw, frac: int | None = None) -> Shared:
        raw = np.asarray(raw, dtype=np.uint64)
        frac = self.f if frac is None else frac
        shares = split_raw(raw, self.m, self.src, self.codec)
        sends = self.m - 1 if owner in self.servers else self.m
        self.tracer.message(owner, raw.size * self._eb, count=sends)
        self.tracer.ops(owner, ring=raw.size * self.m)
        self.tracer.round(owner)
        return Shared(shares, frac)

    def constant(self, x, frac: int | None = None) -> Shared:
        """Public value as a trivial sharing held by server 0."""
        frac = self.f if frac is None else frac
        raw = self._encode_const(x, frac)
        out = np.zeros((self.m,) + raw.shape, dtype=np.uint64)
        out[0] = raw
        return Shared(out, frac)

    def from_server(self, j: int, raw, frac: int) -> Shared:
        """Trivial sharing of a value server j already holds."""
        raw = np.asarray(raw, dtype=np.uint64) & np.uint64(self.codec.mask)
        out = np.zeros((self.m,) + raw.shape, dtype=np.uint64)
        out[j] = raw
        return Shared(out, frac)

    def _encode_const(self, x, frac: int) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return wrap_signed(np.rint(x * (2.0 ** frac)).astype(np.int64), self.codec)

    def peek_raw(self, x: Shared) -> np.ndarray:
        """Reconstruct without charging anything. Simulation diagnostics only."""
        acc = np.zeros(x.shape, dtype=np.uint64)
        for j in range(x.m):
            acc = add_array(acc, x.shares[j], self.codec)
        return acc

    def peek(self, x: Shared) -> np.ndarray:
        return to_signed_array(self.peek_raw(x), self.codec).astype(np.float64) / (2.0 ** x.frac)

    def open_raw(self, x: Shared) -> np.ndarray:
        """All servers broadcast their shares; everyone learns the value."""
        self._broadcast(x.size)
        return self.peek_raw(x)

    def reveal(self, x: Shared, to: Sequence[PartyId]) -> np.ndarray:
        """Send every server's share to each receiver, who reconstructs."""
        for s in self.servers:
            count = sum(1 for r in to if r != s)
            self.tracer.message(s, x.size * self._eb, count=count)
            self.tracer.round(s)
        for r in to:
            self.tracer.ops(r, ring=x.size * (self.m - 1))
        return self.peek(x)

    def reshare(self, values, frac: int | None = None) -> Shared:
        """Fresh sharing produced by an ideal functionality (no owner charged)."""
        frac = self.f if frac is None else frac
        return Shared(split_raw(self._encode_const(values, frac), self.m, self.src, self.codec), frac)

    # -- local linear operations -----------------------------------------

    def _align(self, x: Shared, y: Shared) -> tuple[Shared, Shared]:
        if x.frac == y.frac:
            return x, y
        if x.frac < y.frac:
            return self.lshift(x, y.frac - x.frac), y
        return x, self.lshift(y, x.frac - y.frac)

    def add(self, x: Shared, y: Shared) -> Shared:
        x, y = self._align(x, y)
        out = add_array(x.shares, y.shares, self.codec)
        self._local(out[0].size)
        return Shared(out, x.frac)

    def sub(self, x: Shared, y: Shared) -> Shared:
        x, y = self._align(x, y)
        out = sub_array(x.shares, y.shares, self.codec)
        self._local(out[0].size)
        return Shared(out, x.frac)

    def neg(self, x: Shared) -> Shared:
        self._local(x.size)
        return Shared(sub_array(np.zeros_like(x.shares), x.shares, self.codec), x.frac)

    def add_const(self, x: Shared, c) -> Shared:
        raw = np.broadcast_to(self._encode_const(c, x.frac), x.shape)
        out = x.shares.copy()
        out[0] = add_array(out[0], raw, self.codec)
        self.tracer.ops(self.servers[0], ring=x.size)
        return Shared(out, x.frac)

    def mul_int(self, x: Shared, k: int) -> Shared:
        self._local(x.size)
        return Shared(mul_public_array(x.shares, k, self.codec), x.frac)

    def lshift(self, x: Shared, bits: int) -> Shared:
        """Raise the fractional precision; exact."""
        self._local(x.size)
        return Shared(mul_public_array(x.shares, 1 << bits, self.codec), x.frac + bits)

    def sum(self, x: Shared, axis: int = -1, keepdims: bool = False) -> Shared:
        ax = axis + 1 if axis >= 0 else axis
        self._local(x.size)
        out = np.sum(x.shares, axis=ax, keepdims=keepdims, dtype=np.uint64) & np.uint64(self.codec.mask)
        return Shared(out, x.frac)

    def mul_const(self, x: Shared, c, out_frac: int | None = None, const_frac: int | None = None) -> Shared:
        """Multiply by a public real, then truncate to ``out_frac``.

        The constant is encoded with ``const_frac`` fractional bits (default
        the engine's f). Products with integer-valued constants stay exact.
        """
        out_frac = x.frac if out_frac is None else out_frac
        const_frac = self.f if const_frac is None else const_frac
        raw = self._encode_const(c, const_frac)
        prod = (x.shares * np.broadcast_to(raw, x.shape)) & np.uint64(self.codec.mask)
        self._local(x.size)
        return self.rescale(Shared(prod, x.frac + const_frac), out_frac)

    def rescale(self, x: Shared, frac: int) -> Shared:
        if frac == x.frac:
            return x
        if frac > x.frac:
            return self.lshift(x, frac - x.frac)
        return self.truncate(x, x.frac - frac)

    # -- interactive operations ------------------------------------------

    def truncate(self, x: Shared, bits: int) -> Shared:
        """Divide by 2^bits with at most one unit of error in the last place.

        Uses a dealer pair (r, r >> bits) with r < 2^(k-1); the masked value
        z + 2^(k-2) + r is opened, so |z| must stay below 2^(k-2).
        """
        if bits == 0:
            return x
        k = self.codec.total_bits
        bound = 1 << (k - 2)
        if self.debug:
            signed = to_signed_array(self.peek_raw(x), self.codec)
            if np.any(np.abs(signed) >= bound):
                raise DomainError("value too large for probabilistic truncation")
        r, rt = self.dealer.truncation_pair(x.shape, bits)
        masked = add_array(x.shares, r, self.codec)
        masked[0] = add_array(masked[0], np.uint64(bound), self.codec)
        self._local(x.size, 2)
        c = self.open_raw(Shared(masked, x.frac))
        out = sub_array(np.zeros_like(rt), rt, self.codec)
        high = (c >> np.uint64(bits)) - np.uint64(bound >> bits)
        out[0] = add_array(out[0], high & np.uint64(self.codec.mask), self.codec)
        self._local(x.size, 2)
        return Shared(out, x.frac - bits)

    def mul(self, x: Shared, y: Shared, out_frac: int | None = None) -> Shared:
        """Elementwise Beaver product (with numpy broadcasting)."""
        shape = np.broadcast_shapes(x.shape, y.shape)
        xs = np.broadcast_to(x.shares, (self.m,) + shape)
        ys = np.broadcast_to(y.shares, (self.m,) + shape)
        t = self.dealer.triple(shape)
        self.dealer.consume(t)
        size = int(np.prod(shape, dtype=np.int64))
        d_sh = sub_array(xs, t.a, self.codec)
        e_sh = sub_array(ys, t.b, self.codec)
        self._local(size, 2)
        self._broadcast(2 * size)
        d = np.sum(d_sh, axis=0, dtype=np.uint64) & np.uint64(self.codec.mask)
        e = np.sum(e_sh, axis=0, dtype=np.uint64) & np.uint64(self.codec.mask)
        z = (t.c + d * t.b + e * t.a) & np.uint64(self.codec.mask)
        z[0] = (z[0] + d * e) & np.uint64(self.codec.mask)
        self._local(size, 4)
        self.tracer.ops(self.servers[0], ring=2 * size)
        prod = Shared(z, x.frac + y.frac)
        target = max(x.frac, y.frac) if out_frac is None else out_frac
        return self.rescale(prod, target)

    def square(self, x: Shared, out_frac: int | None = None) -> Shared:
        return self.mul(x, x, out_frac)

    def matmul(self, x: Shared, y: Shared, out_frac: int | None = None) -> Shared:
        """Matrix product of shared (p, q) and (q, r) tensors with one triple."""
        if len(x.shape) != 2 or len(y.shape) != 2 or x.shape[1] != y.shape[0]:
            raise ValueError(f"bad matmul shapes {x.shape} @ {y.shape}")
        p, q = x.shape
        r = y.shape[1]
        t = self.dealer.triple((p, q), (q, r), kind="matmul")
        self.dealer.consume(t)
        mask = np.uint64(self.codec.mask)
        d_sh = sub_array(x.shares, t.a, self.codec)
        e_sh = sub_array(y.shares, t.b, self.codec)
        self._local(p * q + q * r)
        self._broadcast(p * q + q * r)
        d = np.sum(d_sh, axis=0, dtype=np.uint64) & mask
        e = np.sum(e_sh, axis=0, dtype=np.uint64) & mask
        z = np.empty((self.m, p, r), dtype=np.uint64)
        for j in range(self.m):
            z[j] = (t.c[j] + np.matmul(d, t.b[j]) + np.matmul(t.a[j], e)) & mask
        z[0] = (z[0] + np.matmul(d, e)) & mask
        self._local(p * q * r, 4)
        self.tracer.ops(self.servers[0], ring=2 * p * q * r)
        prod = Shared(z, x.frac + y.frac)
        target = max(x.frac, y.frac) if out_frac is None else out_frac
        return self.rescale(prod, target)

    def mul_many(self, pairs: Sequence[tuple[Shared, Shared]], out_frac: int) -> list[Shared]:
        """Several independent products in one communication round."""
        flat_x = [np.broadcast_to(a.shares, (self.m,) + np.broadcast_shapes(a.shape, b.shape)).reshape(self.m, -1)
                  for a, b in pairs]
        flat_y = [np.broadcast_to(b.shares, (self.m,) + np.broadcast_shapes(a.shape, b.shape)).reshape(self.m, -1)
                  for a, b in pairs]
        fracs = {(a.frac, b.frac) for a, b in pairs}
        if len(fracs) != 1:
            raise ValueError("batched products need uniform scales")
        fx, fy = fracs.pop()
        sizes = [v.shape[1] for v in flat_x]
        big = self.mul(Shared(np.concatenate(flat_x, axis=1), fx),
                       Shared(np.concatenate(flat_y, axis=1), fy), out_frac)
        out, start = [], 0
        for (a, b), size in zip(pairs, sizes):
            shape = np.broadcast_shapes(a.shape, b.shape)
            out.append(Shared(big.shares[:, start:start + size].reshape((self.m,) + shape), big.frac))
            start += size
        return out


# ---------------------------------------------------------------------------
# joint randomness


def joint_uniform(engine: MPCEngine, shape, sources: Sequence[UniformSource] | None = None,
                  contributions: dict[int, np.ndarray] | None = None) -> Shared:
    """Shared uniforms on (0, 1) from the XOR of per-server random bitstrings.

    Each server contributes f-1 bits per value. The XOR is turned into an
    arithmetic sharing with one integer Beaver product per extra server
    (x xor y = x + y - 2xy on bits). The result u = (2U + 1) / 2^f never
    touches 0 or 1; an all-zero XOR lands on the clamp 2^-f and is flagged.
    ``contributions`` replaces a server's bits, e.g. with adversarial constants.
    """
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    nbits = engine.f - 1
    if nbits < 1:
        raise ValueError("joint_uniform needs at least 2 fractional bits")
    if sources is None:
        # fresh per-call seeds from the engine stream, so repeated calls differ
        base = int(engine.src.bits(63))
        sources = [UniformSource(base, j) for j in range(engine.m)]
    contributions = contributions or {}
    acc = None
    for j in range(engine.m):
        if j in contributions:
            word = np.broadcast_to(np.asarray(contributions[j], dtype=np.uint64), shape)
        else:
            word = sources[j].bits(nbits, shape)
        bits = (word[..., None] >> np.arange(nbits, dtype=np.uint64)) & np.uint64(1)
        engine.tracer.ops(engine.servers[j], plain=int(np.prod(shape)))
        mine = engine.from_server(j, bits, 0)
        if acc is None:
            acc = mine
        else:
            both = engine.mul(acc, mine, out_frac=0)
            acc = engine.sub(engine.add(acc, mine), engine.mul_int(both, 2))
    weights = (np.uint64(1) << np.arange(nbits, dtype=np.uint64))
    shifted = (acc.shares * weights) & np.uint64(engine.codec.mask)
    whole = np.sum(shifted, axis=-1, dtype=np.uint64) & np.uint64(engine.codec.mask)
    engine._local(acc.size)
    u = Shared(mul_public_array(whole, 2, engine.codec), engine.f)
    u = engine.add_const(u, 2.0 ** -engine.f)
    zero = int(np.sum(engine.peek_raw(Shared(whole, 0)) == 0))
    if zero:
        engine.tracer.flag("uniform_clamp", zero)
    return u
