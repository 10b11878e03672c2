"""Nonlinear functions on shares through low-degree polynomials.

Each function is brought to a fixed core interval first (range reduction) and
then evaluated as a degree-9 Chebyshev interpolant written in the monomial
basis. The polynomial runs at ``HI`` fractional bits so its own rounding stays
far below the engine's 2^-f resolution.

Range reduction for log, sqrt and inv_sqrt needs the binary exponent of the
input, and exp2 needs 2^n for a shared integer n. Both require bit
decomposition, which this simulator does not implement. They are modelled as
ideal functionalities that reconstruct internally and hand back fresh shares.
Each use is counted as an oracle call in the trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial import chebyshev

from .engine import DomainError, MPCEngine, Shared

HI = 26
DEFAULT_DEGREE = 9
TOLERANCE = 1e-3


@dataclass(frozen=True)
class CorePoly:
    fn: Callable[[np.ndarray], np.ndarray]
    degree: int
    coeffs: tuple[float, ...]


def fit_core(fn: Callable[[np.ndarray], np.ndarray], degree: int = DEFAULT_DEGREE) -> CorePoly:
    """Chebyshev interpolant of fn on [-1, 1], converted to monomials."""
    cheb = chebyshev.Chebyshev.interpolate(fn, degree, domain=[-1, 1])
    mono = chebyshev.cheb2poly(cheb.coef)
    return CorePoly(fn, degree, tuple(float(c) for c in mono))


# cores on t in [-1, 1]; for the mantissa cores m = (t + 3) / 4 in [0.5, 1]
_CORES: dict[tuple[str, int], CorePoly] = {}


def _core(name: str, degree: int) -> CorePoly:
    key = (name, degree)
    if key not in _CORES:
        fns = {
            "log": lambda t: np.log((t + 3.0) / 4.0),
            "sqrt": lambda t: np.sqrt((t + 3.0) / 4.0),
            "inv_sqrt": lambda t: 1.0 / np.sqrt((t + 3.0) / 4.0),
            "exp2": lambda t: np.exp2(t),
            "cos_pi": lambda t: np.cos(np.pi * t),
            "sin_pi": lambda t: np.sin(np.pi * t),
        }
        _CORES[key] = fit_core(fns[name], degree)
    return _CORES[key]


# declared input domains
DOMAINS: dict[str, tuple[float, float]] = {
    "log": (2.0 ** -16, 2.0 ** 14),
    "sqrt": (2.0 ** -16, 2.0 ** 10),
    "inv_sqrt": (2.0 ** -16, 2.0 ** 20),
    "exp2": (-64.0, 10.0),
    "sin": (-1024.0, 1024.0),
    "cos": (-1024.0, 1024.0),
}

REFERENCE: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "log": np.log,
    "sqrt": np.sqrt,
    "inv_sqrt": lambda x: 1.0 / np.sqrt(x),
    "exp2": np.exp2,
    "sin": np.sin,
    "cos": np.cos,
}


def _check_domain(engine: MPCEngine, name: str, x: Shared, domain: tuple[float, float]) -> None:
    lo, hi = domain
    vals = engine.peek(x)
    bad = (vals < lo) | (vals > hi)
    if np.any(bad):
        if engine.debug:
            raise DomainError(f"{name} input {vals[bad].flat[0]!r} outside declared domain [{lo}, {hi}]")
        engine.tracer.flag(f"{name}_out_of_domain", int(bad.sum()))


def powers(engine: MPCEngine, t: Shared, degree: int) -> list[Shared]:
    """[t^1, ..., t^degree] in ceil(log2(degree)) product rounds."""
    pw: dict[int, Shared] = {1: t}
    top = 1
    while top < degree:
        pairs, targets = [], []
        for j in range(1, top + 1):
            if top + j <= degree:
                pairs.append((pw[top], pw[j]))
                targets.append(top + j)
        for k, v in zip(targets, engine.mul_many(pairs, out_frac=t.frac)):
            pw[k] = v
        top = max(targets)
    return [pw[k] for k in range(1, degree + 1)]


def eval_poly(engine: MPCEngine, t: Shared, core: CorePoly) -> Shared:
    """Evaluate the core polynomial at shared t (frac HI); result at frac HI."""
    pw = powers(engine, t, core.degree)
    acc = None
    for c, p in zip(core.coeffs[1:], pw):
        # coefficient at HI bits; the sum is truncated once at the end
        raw = np.int64(round(c * 2 ** HI))
        term = Shared((p.shares * np.uint64(int(raw) % engine.codec.modulus)) & np.uint64(engine.codec.mask),
                      p.frac + HI)
        engine._local(p.size)
        acc = term if acc is None else engine.add(acc, term)
    acc = engine.truncate(acc, HI)
    return engine.add_const(acc, core.coeffs[0])


def _to_hi(engine: MPCEngine, x: Shared) -> Shared:
    return engine.rescale(x, HI)


# -- ideal functionalities ------------------------------------------------


def _normalize(engine: MPCEngine, x: Shared) -> tuple[Shared, Shared, Shared, Shared]:
    """Ideal exponent extraction for x > 0.

    Returns shares of (2^-e at 40 bits, e as an integer, 2^(e/2) and
    2^(-e/2) at 20 bits) with x * 2^-e in [0.5, 1). Non-positive inputs are
    clamped to the smallest positive value and flagged.
    """
    for s in engine.servers:
        engine.tracer.oracle(s)
    vals = engine.peek(x)
    tiny = 2.0 ** -x.frac
    low = vals < tiny
    if np.any(low):
        engine.tracer.flag("normalize_clamp", int(low.sum()))
        vals = np.where(low, tiny, vals)
    _, e = np.frexp(vals)
    e = e.astype(np.float64)
    return (engine.reshare(np.exp2(-e), 40), engine.reshare(e, 0),
            engine.reshare(np.exp2(e / 2.0), 20), engine.reshare(np.exp2(-e / 2.0), 20))


def _pow2_int(engine: MPCEngine, n: Shared) -> Shared:
    """Ideal 2^n for a shared integer n, returned at 20 fractional bits."""
    for s in engine.servers:
        engine.tracer.oracle(s)
    vals = np.round(engine.peek(n))
    return engine.reshare(np.exp2(np.clip(vals, -40, 30)), 20)


# -- gadgets ---------------------------------------------------------------


def _mantissa_t(engine: MPCEngine, x: Shared, inv_pow: Shared) -> Shared:
    m_hi = engine.mul(x, inv_pow, out_frac=HI)
    # t = 4m - 3 maps [0.5, 1) onto [-1, 1)
    return engine.add_const(engine.mul_int(m_hi, 4), -3.0)


def g_log(engine: MPCEngine, x: Shared, degree: int = DEFAULT_DEGREE) -> Shared:
    inv_pow, e, _, _ = _normalize(engine, x)
    core = eval_poly(engine, _mantissa_t(engine, x, inv_pow), _core("log", degree))
    shift = engine.mul_const(e, math.log(2.0), out_frac=HI, const_frac=HI)
    return engine.rescale(engine.add(core, shift), engine.f)


def g_sqrt(engine: MPCEngine, x: Shared, degree: int = DEFAULT_DEGREE) -> Shared:
    inv_pow, _, half_pow, _ = _normalize(engine, x)
    core = eval_poly(engine, _mantissa_t(engine, x, inv_pow), _core("sqrt", degree))
    return engine.mul(core, half_pow, out_frac=engine.f)


def g_inv_sqrt(engine: MPCEngine, x: Shared, degree: int = DEFAULT_DEGREE) -> Shared:
    inv_pow, _, _, inv_half_pow = _normalize(engine, x)
    core = eval_poly(engine, _mantissa_t(engine, x, inv_pow), _core("inv_sqrt", degree))
    return engine.mul(core, inv_half_pow, out_frac=engine.f)


def g_exp2(engine: MPCEngine, x: Shared, degree: int = DEFAULT_DEGREE) -> Shared:
    # n = floor(x) up to one unit, so r = x - n lies in [-1, 1)
    n = engine.truncate(x, x.frac)
    r = engine.sub(_to_hi(engine, x), engine.lshift(n, HI))
    core = eval_poly(engine, r, _core("exp2", degree))
    return engine.mul(core, _pow2_int(engine, n), out_frac=engine.f)


def _half_turn(engine: MPCEngine, s: Shared, degree: int) -> tuple[Shared, Shared]:
    """cos(pi t), sin(pi t) for t = s - round-ish(s) in [-1, 1)."""
    n = engine.truncate(s, s.frac)
    t = engine.sub(s, engine.lshift(n, s.frac))
    return eval_poly(engine, t, _core("cos_pi", degree)), eval_poly(engine, t, _core("sin_pi", degree))


def turns_cos_sin(engine: MPCEngine, u: Shared, degree: int = DEFAULT_DEGREE) -> tuple[Shared, Shared]:
    """cos(2 pi u), sin(2 pi u) for shared u, by the double-angle identities."""
    c, s = _half_turn(engine, _to_hi(engine, u), degree)
    cc, ss, cs = engine.mul_many([(c, c), (s, s), (c, s)], out_frac=HI)
    cos2 = engine.sub(cc, ss)
    sin2 = engine.mul_int(cs, 2)
    return engine.rescale(cos2, engine.f), engine.rescale(sin2, engine.f)


def _turns(engine: MPCEngine, x: Shared) -> Shared:
    # x / (2 pi) with a 36-bit constant, result at HI bits
    return engine.mul_const(x, 1.0 / (2.0 * math.pi), out_frac=HI, const_frac=36)


def g_cos(engine: MPCEngine, x: Shared, degree: int = DEFAULT_DEGREE) -> Shared:
    c, s = _half_turn(engine, _turns(engine, x), degree)
    cc, ss = engine.mul_many([(c, c), (s, s)], out_frac=HI)
    return engine.rescale(engine.sub(cc, ss), engine.f)


def g_sin(engine: MPCEngine, x: Shared, degree: int = DEFAULT_DEGREE) -> Shared:
    c, s = _half_turn(engine, _turns(engine, x), degree)
    cs = engine.mul(c, s, out_frac=HI)
    return engine.rescale(engine.mul_int(cs, 2), engine.f)


GADGETS = {
    "log": g_log,
    "sqrt": g_sqrt,
    "inv_sqrt": g_inv_sqrt,
    "exp2": g_exp2,
    "sin": g_sin,
    "cos": g_cos,
}


def poly_gadget(engine: MPCEngine, fn: str, x: Shared, degree: int = DEFAULT_DEGREE,
                domain: tuple[float, float] | None = None) -> Shared:
    if fn not in GADGETS:
        raise ValueError(f"unknown gadget {fn!r}; choose from {sorted(GADGETS)}")
    _check_domain(engine, fn, x, domain or DOMAINS[fn])
    return GADGETS[fn](engine, x, degree)


# -- clipping ----------------------------------------------------------------


def secure_abs(engine: MPCEngine, x: Shared) -> Shared:
    """|x| as sqrt(x^2); no comparison needed."""
    return g_sqrt(engine, engine.square(x))


def secure_clip_factor(engine: MPCEngine, norm2: Shared, clip: float, mode: str = "smooth") -> Shared:
    """Shares of min(1, clip / sqrt(norm2)).

    ``mode="smooth"`` computes r = clip * inv_sqrt(norm2) and then
    min(1, r) = (1 + r - |1 - r|) / 2 with |.| from the sqrt gadget.
    ``mode="oracle"`` reconstructs norm2 and reshares the exact factor; each
    use is recorded as an oracle call.
    """
    if clip <= 0:
        raise ValueError("clip norm must be > 0")
    if mode == "oracle":
        for s in engine.servers:
            engine.tracer.oracle(s)
        n2 = engine.peek(norm2)
        with np.errstate(divide="ignore"):
            factor = np.where(n2 > 0, np.minimum(1.0, clip / np.sqrt(np.maximum(n2, 1e-300))), 1.0)
        return engine.reshare(factor)
    if mode != "smooth":
        raise ValueError(f"unknown clip mode {mode!r}")
    r = engine.mul_const(g_inv_sqrt(engine, norm2), clip)
    gap = secure_abs(engine, engine.add_const(engine.neg(r), 1.0))
    twice = engine.sub(engine.add_const(r, 1.0), gap)
    # halving is a reinterpretation with one more fractional bit
    return engine.rescale(Shared(twice.shares, twice.frac + 1), engine.f)
