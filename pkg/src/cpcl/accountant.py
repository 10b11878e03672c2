"""Privacy accounting: noise calibration, composition and conversions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

COMPOSITION_MODES = ("basic", "advanced", "zCDP", "RDP")
DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 65))


@dataclass(frozen=True)
class PrivacyBudget:
    eps: float
    delta: float = 0.0
    sensitivity_l1: float = 1.0
    sensitivity_l2: float = 1.0

    def __post_init__(self) -> None:
        if not self.eps > 0:
            raise ValueError(f"epsilon must be > 0, got {self.eps}")
        if not 0 <= self.delta < 1:
            raise ValueError(f"delta must be in [0, 1), got {self.delta}")
        if self.sensitivity_l1 < 0 or self.sensitivity_l2 < 0:
            raise ValueError("sensitivities must be >= 0")


def gaussian_sigma(budget: PrivacyBudget) -> float:
    """Classic Gaussian-mechanism stddev, valid for eps <= 1."""
    if budget.eps > 1:
        raise ValueError(
            f"the classic Gaussian bound needs eps <= 1 (got {budget.eps}); "
            "use calibrate_sigma for RDP calibration"
        )
    if not 0 < budget.delta < 1:
        raise ValueError("Gaussian mechanism needs delta in (0, 1)")
    return math.sqrt(2.0 * math.log(1.25 / budget.delta)) * budget.sensitivity_l2 / budget.eps


def laplace_lambda(budget: PrivacyBudget) -> float:
    return budget.sensitivity_l1 / budget.eps


def collusion_adjusted_variance(var_dp: float, n: int, t: int = 0, s: int = 0) -> float:
    """Per-party variance so that any n - t - s honest parties still reach var_dp."""
    if t < 0 or s < 0:
        raise ValueError("t and s must be non-negative")
    honest = n - t - s
    if honest < 1:
        raise ValueError(f"no honest noise left: n={n}, t={t}, s={s}")
    var = var_dp / honest
    # round up so that honest * var >= var_dp holds in floating point too
    while honest * var < var_dp:
        var = math.nextafter(var, math.inf)
    return var


def binomial_trials(budget: PrivacyBudget) -> int:
    if not 0 < budget.delta < 1:
        raise ValueError("binomial mechanism needs delta in (0, 1)")
    return math.ceil(8.0 * math.log(2.0 / budget.delta) / budget.eps ** 2)


def subsample_amplify(eps: float, delta: float, q: float) -> tuple[float, float]:
    if not 0 < q <= 1:
        raise ValueError(f"sampling rate must be in (0, 1], got {q}")
    return math.log1p(q * math.expm1(eps)), q * delta


def group_privacy(eps: float, delta: float, z: int) -> tuple[float, float]:
    if z < 1 or int(z) != z:
        raise ValueError("group size must be a positive integer")
    return z * eps, z * math.exp(z * eps) * delta


def rdp_to_dp(alpha: float, eps_rdp: float, delta: float) -> float:
    """Classic RDP to (eps, delta) conversion."""
    if alpha <= 1:
        raise ValueError(f"RDP order must be > 1, got {alpha}")
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    return eps_rdp + math.log(1.0 / delta) / (alpha - 1.0)


def rdp_to_dp_improved(alpha: float, eps_rdp: float, delta: float) -> float:
    """Tighter conversion: eps + log((a-1)/a) - (log delta + log a) / (a - 1)."""
    if alpha <= 1:
        raise ValueError(f"RDP order must be > 1, got {alpha}")
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    eps = eps_rdp + math.log1p(-1.0 / alpha) - (math.log(delta) + math.log(alpha)) / (alpha - 1.0)
    return max(eps, 0.0)


def zcdp_to_dp(rho: float, delta: float) -> float:
    if rho <= 0:
        raise ValueError("rho must be > 0")
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    return rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta))


# ---------------------------------------------------------------------------
# subsampled Gaussian RDP


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    """log E[(p/q)^alpha] for the Poisson-subsampled Gaussian, integer alpha."""
    k = np.arange(alpha + 1, dtype=np.float64)
    log_binom = special.gammaln(alpha + 1) - special.gammaln(k + 1) - special.gammaln(alpha - k + 1)
    with np.errstate(divide="ignore"):
        log_terms = (log_binom + k * math.log(q) + (alpha - k) * np.log1p(-q)
                     + (k * k - k) / (2.0 * sigma ** 2))
    return float(special.logsumexp(log_terms))


def rdp_subsampled_gaussian(q: float, sigma: float, orders: Sequence[int] = DEFAULT_ORDERS) -> np.ndarray:
    """RDP curve of one step of the subsampled Gaussian with noise multiplier sigma."""
    if not 0 < q <= 1:
        raise ValueError("q must be in (0, 1]")
    if sigma <= 0:
        return np.full(len(orders), np.inf)
    out = []
    for a in orders:
        if int(a) != a or a < 2:
            raise ValueError("this accountant supports integer orders >= 2")
        if q == 1.0:
            out.append(a / (2.0 * sigma ** 2))
        else:
            out.append(_log_a_int(q, sigma, int(a)) / (a - 1))
    return np.asarray(out)


def rdp_curve_to_dp(orders: Sequence[int], curve: Sequence[float], delta: float,
                    conversion: str = "improved") -> tuple[float, int]:
    """Best (eps, order) over an RDP curve."""
    convert = {"classic": rdp_to_dp, "improved": rdp_to_dp_improved}[conversion]
    best = (math.inf, int(orders[0]))
    for a, r in zip(orders, curve):
        if np.isfinite(r):
            e = convert(a, float(r), delta)
            if e < best[0]:
                best = (e, int(a))
    return best


def dp_sgd_epsilon(q: float, sigma: float, steps: int, delta: float,
                   orders: Sequence[int] = DEFAULT_ORDERS, conversion: str = "improved") -> float:
    curve = steps * rdp_subsampled_gaussian(q, sigma, orders)
    return rdp_curve_to_dp(orders, curve, delta, conversion)[0]


def calibrate_sigma(q: float, steps: int, eps: float, delta: float,
                    orders: Sequence[int] = DEFAULT_ORDERS, conversion: str = "improved") -> float:
    """Smallest noise multiplier, to 3 significant digits, meeting (eps, delta)."""
    if eps <= 0 or steps < 1:
        raise ValueError("need eps > 0 and at least one step")

    def spent(s: float) -> float:
        return dp_sgd_epsilon(q, s, steps, delta, orders, conversion)

    lo, hi = 0.05, 1.0
    while spent(hi) > eps:
        lo, hi = hi, hi * 2
        if hi > 1e4:
            raise ValueError("no noise multiplier up to 1e4 reaches the target")
    while hi - lo > 1e-4 * hi:
        mid = 0.5 * (lo + hi)
        if spent(mid) > eps:
            lo = mid
        else:
            hi = mid
    # round up to 3 significant digits so the target still holds
    digits = 2 - math.floor(math.log10(hi))
    sigma = math.ceil(hi * 10 ** digits) / 10 ** digits
    return sigma


# ---------------------------------------------------------------------------


@dataclass
class CompositionLedger:
    """Append-only record of per-step privacy costs."""

    mode: str = "basic"
    orders: tuple[int, ...] = DEFAULT_ORDERS
    entries: list[tuple[float, float]] = field(default_factory=list)
    rdp: np.ndarray | None = None
    rdp_steps: int = 0

    def __post_init__(self) -> None:
        if self.mode not in COMPOSITION_MODES:
            raise ValueError(f"mode must be one of {COMPOSITION_MODES}")

    def add(self, eps: float, delta: float = 0.0) -> None:
        if eps < 0 or delta < 0:
            raise ValueError("ledger entries must be non-negative")
        self.entries.append((float(eps), float(delta)))

    def add_rdp(self, curve: Sequence[float], delta: float = 0.0) -> None:
        if self.mode != "RDP":
            raise ValueError("RDP curves need an RDP-mode ledger")
        curve = np.asarray(curve, dtype=np.float64)
        if curve.shape != (len(self.orders),):
            raise ValueError("curve length does not match the order grid")
        self.rdp = curve.copy() if self.rdp is None else self.rdp + curve
        self.rdp_steps += 1
        self.entries.append((math.nan, float(delta)))

    def __len__(self) -> int:
        return len(self.entries)


def compose(ledger: CompositionLedger, delta: float | None = None,
            conversion: str = "improved") -> tuple[float, float]:
    """Total (eps, delta) of a ledger.

    ``delta`` is the slack used by the k-fold and RDP modes; it is added to the
    per-entry deltas in the result.
    """
    if not ledger.entries:
        raise ValueError("cannot compose an empty ledger")
    entry_delta = sum(d for _, d in ledger.entries)
    if ledger.mode == "basic":
        return sum(e for e, _ in ledger.entries), entry_delta
    if delta is None or not 0 < delta < 1:
        raise ValueError(f"{ledger.mode} composition needs a slack delta in (0, 1)")
    if ledger.rdp is not None:
        eps, _ = rdp_curve_to_dp(ledger.orders, ledger.rdp, delta, conversion)
        return eps, delta + entry_delta
    eps_values = {e for e, _ in ledger.entries}
    if len(eps_values) != 1:
        raise ValueError(f"{ledger.mode} k-fold composition needs equal epsilons, got {sorted(eps_values)}")
    eps = eps_values.pop()
    k = len(ledger.entries)
    root = eps * math.sqrt(2.0 * k * math.log(1.0 / delta))
    if ledger.mode == "advanced":
        total = root + k * eps * math.expm1(eps)
    elif ledger.mode == "zCDP":
        total = root + k * eps ** 2 / 2.0
    else:
        total = 4.0 * root
    return total, delta + entry_delta
