"""Noise mechanisms for gradient and output perturbation.

Every mechanism draws its randomness from a :class:`UniformSource`, so a
(seed, stream) pair fully determines the sample stream. The rejection based
samplers (discrete Gaussian, Knuth Poisson) also come in a constant-iteration
form: a public ``loop_budget`` fixes the number of loop bodies executed and the
caller gets a failure mask instead of an unbounded loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import special

# exp(-rate) keeps ~200 significant bits of headroom in float64 below this rate.
MAX_POISSON_RATE = 500.0

MECHANISM_PARAMS: dict[str, tuple[str, ...]] = {
    "Laplace": ("scale",),
    "DistLaplace": ("scale", "parties"),
    "Gaussian": ("variance",),
    "Binomial": ("trials", "p"),
    "DiscLaplace": ("scale",),
    "DiscGaussian": ("variance",),
    "Skellam": ("variance",),
    "PoissonBinomial": ("bits", "theta", "clip"),
}
NOISE_TYPES = ("PNoise", "CNoise")


class SamplingFailure(RuntimeError):
    """A constant-iteration sampler ran out of loop budget."""


class UniformSource:
    """Seeded stream of uniforms on the open interval (0, 1).

    Distinct ``stream`` ids give statistically independent streams for the same
    seed; use one per party or worker.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream)
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def uniform(self, size=None):
        # 53 random bits shifted by half an ulp never hit 0 or 1.
        bits = self._gen.integers(0, 1 << 53, size=size, dtype=np.int64)
        return (bits + 0.5) * (2.0 ** -53)

    def bits(self, nbits: int, size=None) -> np.ndarray:
        if not 0 < nbits <= 64:
            raise ValueError("nbits must be in (0, 64]")
        raw = np.asarray(self._gen.bit_generator.random_raw(size), dtype=np.uint64)
        if nbits == 64:
            return raw
        return raw & np.uint64((1 << nbits) - 1)

    def generator(self) -> np.random.Generator:
        """The underlying numpy generator, for index permutations and the like."""
        return self._gen

    def spawn(self, stream: int) -> "UniformSource":
        return UniformSource(self.seed, self.stream * 1_000_003 + stream + 1)


@dataclass(frozen=True)
class NoiseSpec:
    """Noise type, mechanism and its parameters."""

    noise_type: str
    mechanism: str
    params: Mapping[str, float] = field(default_factory=dict)
    loop_budget: int | None = None

    def __post_init__(self) -> None:
        if self.noise_type not in NOISE_TYPES:
            raise ValueError(f"noise_type must be one of {NOISE_TYPES}, got {self.noise_type!r}")
        if self.mechanism not in MECHANISM_PARAMS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        wanted = set(MECHANISM_PARAMS[self.mechanism])
        given = set(self.params)
        if wanted != given:
            raise ValueError(
                f"{self.mechanism} needs parameters {sorted(wanted)}, got {sorted(given)}"
            )
        for key in ("scale", "variance", "trials", "bits", "parties", "clip"):
            if key in self.params and not self.params[key] > 0:
                raise ValueError(f"{self.mechanism} parameter {key} must be > 0")
        if self.loop_budget is not None and self.loop_budget < 1:
            raise ValueError("loop_budget must be a positive integer")


def _check_open_unit(u) -> None:
    u = np.asarray(u)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("uniform input must lie strictly inside (0, 1)")


# ---------------------------------------------------------------------------
# continuous mechanisms


def laplace_its(lam: float, u):
    """Inverse-CDF Laplace sample with scale ``lam``."""
    if lam <= 0:
        raise ValueError("Laplace scale must be > 0")
    _check_open_unit(u)
    v = np.asarray(u, dtype=np.float64) - 0.5
    out = -lam * np.sign(v) * np.log1p(-2.0 * np.abs(v))
    return out if out.ndim else float(out)


def gamma_sample(shape: float, scale: float, src: UniformSource, size=None):
    """Gamma(shape, scale) for 0 < shape <= 1 by Ahrens-Dieter rejection (GS)."""
    if not 0 < shape <= 1:
        raise ValueError(f"gamma shape must be in (0, 1], got {shape}")
    if scale < 0:
        raise ValueError("gamma scale must be >= 0")
    n = 1 if size is None else int(np.prod(size))
    out = np.empty(n)
    todo = np.arange(n)
    b = (math.e + shape) / math.e
    while todo.size:
        u1 = src.uniform(todo.size)
        u2 = src.uniform(todo.size)
        p = b * u1
        small = p <= 1.0
        x = np.where(small, p ** (1.0 / shape), 0.0)
        with np.errstate(divide="ignore"):
            x_big = -np.log((b - p) / shape)
        x = np.where(small, x, x_big)
        with np.errstate(over="ignore", invalid="ignore"):
            accept = np.where(small, u2 <= np.exp(-x), u2 <= x ** (shape - 1.0))
        out[todo[accept]] = x[accept]
        todo = todo[~accept]
    out *= scale
    if size is None:
        return float(out[0])
    return out.reshape(size)


def dist_laplace_partial(parties: int, lam: float, src: UniformSource, size=None):
    """One party's share g1 - g2 of a Laplace(lam) sum over ``parties`` parties."""
    if parties < 1:
        raise ValueError("party count must be >= 1")
    if lam <= 0:
        raise ValueError("Laplace scale must be > 0")
    g1 = gamma_sample(1.0 / parties, lam, src, size)
    g2 = gamma_sample(1.0 / parties, lam, src, size)
    return g1 - g2


def box_muller(u1, u2, sigma: float):
    """Two independent N(0, sigma^2) values from two uniforms."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    _check_open_unit(u1)
    _check_open_unit(u2)
    r = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * np.asarray(u2, dtype=np.float64)
    z1, z2 = sigma * r * np.cos(angle), sigma * r * np.sin(angle)
    if np.ndim(z1) == 0:
        return float(z1), float(z2)
    return z1, z2


def gaussian(sigma: float, src: UniformSource, size=None):
    """N(0, sigma^2) draws through Box-Muller."""
    n = 1 if size is None else int(np.prod(size))
    pairs = (n + 1) // 2
    z1, z2 = box_muller(src.uniform(pairs), src.uniform(pairs), sigma)
    out = np.concatenate([z1, z2])[:n]
    if size is None:
        return float(out[0])
    return out.reshape(size)


# ---------------------------------------------------------------------------
# discrete building blocks


def geometric(p: float, u):
    """Failures before the first success, by inverse transform."""
    if not 0 < p < 1:
        raise ValueError("geometric p must be in (0, 1)")
    _check_open_unit(u)
    out = np.floor(np.log1p(-np.asarray(u, dtype=np.float64)) / math.log1p(-p)).astype(np.int64)
    return out if out.ndim else int(out)


def bernoulli_exp(a, b: float, u):
    """True with probability exp(-a/b)."""
    if b <= 0:
        raise ValueError("bernoulli_exp needs b > 0")
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0):
        raise ValueError("bernoulli_exp needs a >= 0")
    _check_open_unit(u)
    out = np.asarray(u) < np.exp(-a / b)
    return out if out.ndim else bool(out)


def disc_laplace(lam: float, src: UniformSource, size=None):
    """Symmetric discrete Laplace with PMF proportional to exp(-|x|/lam)."""
    if lam <= 0:
        raise ValueError("discrete Laplace scale must be > 0")
    p = -math.expm1(-1.0 / lam)
    shape = 1 if size is None else size
    out = geometric(p, src.uniform(shape)) - geometric(p, src.uniform(shape))
    if size is None:
        return int(np.asarray(out).ravel()[0])
    return np.asarray(out)


def disc_gaussian(variance: float, src: UniformSource, size=None, loop_budget: int | None = None):
    """Discrete Gaussian on the integers by rejection from a discrete Laplace.

    Candidates come from DiscLaplace(sigma) and are kept with probability
    exp(-(|l| - sigma)^2 / (2 sigma^2)). Without ``loop_budget`` the loop runs
    until every lane accepted and an array (or int) is returned. With a budget,
    exactly ``loop_budget`` rounds are drawn for every lane and the result is
    ``(samples, failed)``; failed lanes hold 0.
    """
    if variance <= 0:
        raise ValueError("discrete Gaussian variance must be > 0")
    sigma = math.sqrt(variance)
    b = 2.0 * variance
    n = 1 if size is None else int(np.prod(size))
    out = np.zeros(n, dtype=np.int64)
    done = np.zeros(n, dtype=bool)

    def candidates(count):
        lap = disc_laplace(sigma, src, count)
        a = (np.abs(lap) - sigma) ** 2
        return lap, bernoulli_exp(a, b, src.uniform(count))

    if loop_budget is None:
        while not done.all():
            idx = np.flatnonzero(~done)
            lap, ok = candidates(idx.size)
            out[idx[ok]] = lap[ok]
            done[idx[ok]] = True
        return int(out[0]) if size is None else out.reshape(size)

    for _ in range(loop_budget):
        lap, ok = candidates(n)
        take = ok & ~done
        out[take] = lap[take]
        done |= ok
    failed = ~done
    if size is None:
        return int(out[0]), bool(failed[0])
    return out.reshape(size), failed.reshape(size)


def disc_gaussian_acceptance(variance: float) -> float:
    """Per-round acceptance probability of :func:`disc_gaussian`."""
    sigma = math.sqrt(variance)
    p = -math.expm1(-1.0 / sigma)
    span = int(40 * sigma) + 50
    x = np.arange(-span, span + 1, dtype=np.float64)
    # PMF of the difference of two Geom(p): (p / (2 - p)) (1 - p)^|x|
    log_pmf = math.log(p / (2.0 - p)) + np.abs(x) * math.log1p(-p)
    log_acc = -((np.abs(x) - sigma) ** 2) / (2.0 * variance)
    return float(np.exp(special.logsumexp(log_pmf + log_acc)))


def _check_rate(rate: float) -> None:
    if rate < 0:
        raise ValueError("Poisson rate must be >= 0")
    if rate > MAX_POISSON_RATE:
        raise ValueError(
            f"Poisson rate {rate} would underflow exp(-rate); split it into "
            f"chunks of at most {MAX_POISSON_RATE} and sum the draws"
        )


def poisson(rate: float, src: UniformSource, size=None, loop_budget: int | None = None,
            method: str | None = None):
    """Poisson(rate) draws.

    ``method="knuth"`` multiplies uniforms until the product falls to
    exp(-rate). It is the only method that honours ``loop_budget`` and is the
    default when a budget is given. ``method="inversion"`` uses one uniform per
    draw against the cumulative PMF, which is much cheaper in plaintext.
    With a budget the return value is ``(samples, failed)``.
    """
    _check_rate(rate)
    if method is None:
        method = "knuth" if loop_budget is not None else "inversion"
    n = 1 if size is None else int(np.prod(size))
    if method == "inversion":
        if loop_budget is not None:
            raise ValueError("loop_budget applies to the knuth method only")
        out = _poisson_inversion(rate, src, n)
    elif method == "knuth":
        threshold = math.exp(-rate)
        out = np.zeros(n, dtype=np.int64)
        prod = src.uniform(n)
        if loop_budget is None:
            live = np.flatnonzero(prod > threshold)
            while live.size:
                out[live] += 1
                prod[live] *= src.uniform(live.size)
                live = live[prod[live] > threshold]
        else:
            # the first uniform is the first of the loop_budget loop bodies
            for _ in range(loop_budget - 1):
                live = prod > threshold
                out += live
                prod = np.where(live, prod * src.uniform(n), prod)
            failed = prod > threshold
            out[failed] = 0
            if size is None:
                return int(out[0]), bool(failed[0])
            return out.reshape(size), failed.reshape(size)
    else:
        raise ValueError(f"unknown Poisson method {method!r}")
    return int(out[0]) if size is None else out.reshape(size)


_CDF_CACHE: dict[float, np.ndarray] = {}


def _poisson_cdf_table(rate: float) -> np.ndarray:
    table = _CDF_CACHE.get(rate)
    if table is None:
        top = int(rate + 40.0 * math.sqrt(rate + 1.0) + 40)
        k = np.arange(top + 1, dtype=np.float64)
        log_pmf = k * math.log(rate) - rate - special.gammaln(k + 1)
        table = np.cumsum(np.exp(log_pmf))
        table[-1] = 1.0
        _CDF_CACHE[rate] = table
    return table


def _poisson_inversion(rate: float, src: UniformSource, n: int) -> np.ndarray:
    if rate == 0:
        return np.zeros(n, dtype=np.int64)
    table = _poisson_cdf_table(rate)
    return np.searchsorted(table, src.uniform(n), side="right").astype(np.int64)


def poisson_failure_probability(rate: float, loop_budget: int) -> float:
    """P(Knuth loop needs more than ``loop_budget`` bodies) = P(X >= loop_budget)."""
    from scipy import stats

    return float(stats.poisson.sf(loop_budget - 1, rate))


def skellam(variance: float, src: UniformSource, size=None, chunks: int | None = None,
            loop_budget: int | None = None):
    """Skellam(0, variance): difference of two Poisson(variance / 2) draws.

    The variance is split into ``chunks`` equal parts (by default as few as
    keep each Poisson rate under the underflow guard) and chunk samples are
    summed. With ``loop_budget`` each chunk uses the constant-iteration Knuth
    loop and ``(samples, failed)`` is returned.
    """
    if variance <= 0:
        raise ValueError("Skellam variance must be > 0")
    if chunks is None:
        chunks = max(1, math.ceil(variance / (2.0 * MAX_POISSON_RATE)))
    rate = variance / (2.0 * chunks)
    _check_rate(rate)
    n = 1 if size is None else int(np.prod(size))
    total = np.zeros(n, dtype=np.int64)
    failed = np.zeros(n, dtype=bool)
    # process chunks in blocks to bound memory
    block = max(1, 2_000_000 // max(n, 1))
    remaining = chunks
    while remaining:
        c = min(block, remaining)
        remaining -= c
        if loop_budget is None:
            p1 = poisson(rate, src, (c, n))
            p2 = poisson(rate, src, (c, n))
        else:
            p1, f1 = poisson(rate, src, (c, n), loop_budget=loop_budget)
            p2, f2 = poisson(rate, src, (c, n), loop_budget=loop_budget)
            failed |= f1.any(axis=0) | f2.any(axis=0)
        total += (p1 - p2).sum(axis=0)
    if loop_budget is None:
        return int(total[0]) if size is None else total.reshape(size)
    if size is None:
        return int(total[0]), bool(failed[0])
    return total.reshape(size), failed.reshape(size)


def binomial_noise(trials: int, src: UniformSource, p: float = 0.5, size=None):
    """Centered binomial: Bin(trials, p) - trials * p."""
    if trials < 1:
        raise ValueError("binomial noise needs at least one trial")
    if not 0 < p < 1:
        raise ValueError("binomial p must be in (0, 1)")
    n = 1 if size is None else int(np.prod(size))
    draws = _binomial_inversion(int(trials), p, src, n) - trials * p
    return float(draws[0]) if size is None else draws.reshape(size)


def _binomial_inversion(trials: int, p: float, src: UniformSource, n: int) -> np.ndarray:
    k = np.arange(trials + 1, dtype=np.float64)
    log_pmf = (special.gammaln(trials + 1) - special.gammaln(k + 1) - special.gammaln(trials - k + 1)
               + k * math.log(p) + (trials - k) * math.log1p(-p))
    cdf = np.cumsum(np.exp(log_pmf))
    cdf[-1] = 1.0
    return np.searchsorted(cdf, src.uniform(n), side="right").astype(np.float64)


def poisson_binomial_encode(g, theta: float, clip: float, bits: int, src: UniformSource, size=None):
    """Encode a clipped value g as one Bin(bits, g*theta/clip + 1/2) draw."""
    if clip <= 0 or bits < 1:
        raise ValueError("poisson-binomial needs clip > 0 and bits >= 1")
    g = np.asarray(g, dtype=np.float64)
    p = g * theta / clip + 0.5
    if np.any((p < 0.25) | (p > 0.75)):
        raise ValueError("success probability outside [1/4, 3/4]: need |g| <= clip and theta <= 1/4")
    shape = g.shape if size is None else tuple(np.atleast_1d(size))
    u = src.uniform((bits,) + shape)
    out = (u < p).sum(axis=0)
    return int(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------


def sample(spec: NoiseSpec, src: UniformSource, size=None, *, parties: int | None = None):
    """Draw noise for ``spec`` in plaintext.

    Returns an array of noise values shaped ``size``. For rejection samplers
    with a loop budget, failed lanes raise :class:`SamplingFailure`; use the
    mechanism functions directly to get the failure mask instead.
    """
    prm = spec.params
    mech = spec.mechanism
    budget = spec.loop_budget
    if mech == "Laplace":
        shape = 1 if size is None else size
        out = laplace_its(prm["scale"], src.uniform(shape))
    elif mech == "DistLaplace":
        out = dist_laplace_partial(int(prm["parties"]), prm["scale"], src, size)
    elif mech == "Gaussian":
        out = gaussian(math.sqrt(prm["variance"]), src, size)
    elif mech == "Binomial":
        out = binomial_noise(int(prm["trials"]), src, prm["p"], size)
    elif mech == "DiscLaplace":
        out = disc_laplace(prm["scale"], src, size)
    elif mech == "DiscGaussian":
        out = disc_gaussian(prm["variance"], src, size, loop_budget=budget)
    elif mech == "Skellam":
        out = skellam(prm["variance"], src, size, loop_budget=budget)
    else:
        raise ValueError("PoissonBinomial encodes a value; call poisson_binomial_encode")
    if isinstance(out, tuple):
        out, failed = out
        if np.any(failed):
            raise SamplingFailure(f"{mech} exhausted loop budget {budget} on {int(np.sum(failed))} draws")
    if size is None:
        return float(np.asarray(out).ravel()[0])
    return np.asarray(out, dtype=np.float64).reshape(size)


def failure_probability(spec: NoiseSpec) -> float:
    """Per-draw probability that the constant-iteration loop fails (0 if unbounded)."""
    if spec.loop_budget is None:
        return 0.0
    if spec.mechanism == "DiscGaussian":
        return (1.0 - disc_gaussian_acceptance(spec.params["variance"])) ** spec.loop_budget
    if spec.mechanism == "Skellam":
        var = spec.params["variance"]
        chunks = max(1, math.ceil(var / (2.0 * MAX_POISSON_RATE)))
        per = poisson_failure_probability(var / (2.0 * chunks), spec.loop_budget)
        return min(1.0, 2 * chunks * per)
    return 0.0
