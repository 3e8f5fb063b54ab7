"""Per-round LDP accounting for CRS and the Laplace baseline mechanism.

For privacy budget ``eps`` a CRS round with sampling probability ``p`` and
sampling size ``K`` out of ``d`` coordinates is admissible when

    0 < p <= 1 - exp(-eps)
    K <= d * (1 - exp(-eps) + p * exp(-eps))

(equivalently ``exp(-eps) <= d/(d-K) * (1-p) <= exp(eps)``), and its
relaxation probability is bounded by ``exp(-d * KL(K/d || p))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

DEFAULT_LAPLACE_SCALE = 1e-5


class PrivacyError(ValueError):
    pass


def max_sampling_probability(epsilon: float) -> float:
    if not epsilon > 0.0:
        raise PrivacyError(f"epsilon must be positive, got {epsilon}")
    return -math.expm1(-epsilon)


def ratio_admissible(epsilon, p, K, d) -> bool:
    """Direct check of ``exp(-eps) <= d/(d-K) * (1-p) <= exp(eps)``.

    Cross-multiplied so that ``K = d`` (infinite ratio) is handled.
    """
    if K < 0 or K > d:
        return False
    lhs = d * (1.0 - p)
    slack = d - K
    return math.exp(-epsilon) * slack <= lhs <= math.exp(epsilon) * slack


def _check_p(epsilon, p):
    p_max = max_sampling_probability(epsilon)
    if not 0.0 < p <= p_max:
        raise PrivacyError(f"p={p} outside (0, 1 - e^-eps] = (0, {p_max:.6g}]")


def max_sampling_size(epsilon: float, p: float, d: int) -> int:
    """Largest ``K`` satisfying the upper ratio inequality for this ``(eps, p, d)``."""
    _check_p(epsilon, p)
    if d < 1:
        raise PrivacyError("d must be at least 1")
    bound = d * (1.0 - math.exp(-epsilon) + p * math.exp(-epsilon))
    k = min(max(math.floor(bound), 0), d)
    # The closed form can land one off the direct inequality near integers.
    while k > 0 and not ratio_admissible(epsilon, p, k, d):
        k -= 1
    while k < d and ratio_admissible(epsilon, p, k + 1, d):
        k += 1
    return k


def kl_bernoulli(a: float, p: float) -> float:
    """KL divergence between Bernoulli(a) and Bernoulli(p), in nats."""
    if not 0.0 < p < 1.0:
        raise PrivacyError(f"p must lie strictly inside (0, 1), got {p}")
    if not 0.0 <= a <= 1.0:
        raise PrivacyError(f"a must lie in [0, 1], got {a}")
    out = 0.0
    if a > 0.0:
        out += a * math.log(a / p)
    if a < 1.0:
        out += (1.0 - a) * math.log((1.0 - a) / (1.0 - p))
    return max(out, 0.0)


def log_delta_bound(d: int, K: int, p: float) -> float:
    if not 0 <= K <= d:
        raise PrivacyError(f"need 0 <= K <= d, got K={K}, d={d}")
    return -d * kl_bernoulli(K / d, p)


def delta_bound(d: int, K: int, p: float) -> float:
    """``exp(-d * KL(K/d || p))``; underflows to 0 for large ``d``, see :func:`log_delta_bound`."""
    return math.exp(log_delta_bound(d, K, p))


def log_binomial_tail(d: int, p: float, K: int) -> float:
    """log Pr[Binomial(d, p) > K], summed exactly in log space."""
    if d > 10_000:
        raise PrivacyError("exact tail limited to d <= 10^4")
    if K >= d:
        return -math.inf
    i = np.arange(max(K + 1, 0), d + 1)
    logs = (gammaln(d + 1) - gammaln(i + 1) - gammaln(d - i + 1)
            + i * math.log(p) + (d - i) * math.log1p(-p))
    return float(min(logsumexp(logs), 0.0))


def binomial_tail(d: int, p: float, K: int) -> float:
    return math.exp(log_binomial_tail(d, p, K))


@dataclass(frozen=True)
class PrivacyCertificate:
    epsilon: float
    p: float
    K: int
    d: int
    delta_bound: float
    log_delta: float
    issued: bool
    warning: bool = False
    reason: str = ""

    def report(self) -> str:
        if not self.issued:
            return f"refused: {self.reason}"
        note = " (warning: delta bound not below 1/d)" if self.warning else ""
        return (f"issued: eps={self.epsilon:g} p={self.p:.6g} K={self.K} d={self.d} "
                f"log_delta={self.log_delta:.6g} delta={self.delta_bound:.6g}{note}")


def issue_certificate(epsilon: float, p: float, K: int, d: int) -> PrivacyCertificate:
    """Validate one CRS round. Never clamps: any violated condition refuses."""

    def refuse(reason):
        return PrivacyCertificate(epsilon, p, K, d, 1.0, 0.0, False, False, reason)

    if not epsilon > 0.0:
        return refuse(f"epsilon must be positive, got {epsilon}")
    if d < 1:
        return refuse(f"d must be at least 1, got {d}")
    p_max = max_sampling_probability(epsilon)
    if not 0.0 < p <= p_max:
        return refuse(f"p={p:.6g} exceeds 1 - e^-eps = {p_max:.6g}" if p > 0
                      else f"p must be positive, got {p}")
    if not 0 <= K <= d:
        return refuse(f"K={K} outside [0, d={d}]")
    k_max = max_sampling_size(epsilon, p, d)
    if K > k_max:
        return refuse(f"K={K} exceeds K_max={k_max} for eps={epsilon:g}, p={p:.6g}, d={d}")
    if not ratio_admissible(epsilon, p, K, d):
        # only reachable through rounding at p == 1 - e^-eps
        return refuse(f"d/(d-K)(1-p) falls outside [e^-eps, e^eps] for K={K}")
    if K * 1.0 == p * d:
        return refuse(f"K/d equals p ({p:.6g}): KL is 0 and the delta bound is vacuous")
    log_delta = log_delta_bound(d, K, p)
    delta = math.exp(log_delta)
    warning = log_delta >= -math.log(d)
    return PrivacyCertificate(epsilon, p, K, d, delta, log_delta, True, warning)


def laplace_noise(shape, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Laplace(0, scale) draws by inverse CDF of one uniform per coordinate."""
    if not scale > 0.0:
        raise PrivacyError(f"Laplace scale must be positive, got {scale}")
    u = rng.random(shape) - 0.5  # [-0.5, 0.5)
    # u = -0.5 would give log(0); nudge it inside the open interval.
    u = np.where(u == -0.5, np.nextafter(-0.5, 0.0), u)
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def laplace_perturb(v, scale: float, rng: np.random.Generator) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v + laplace_noise(v.shape, scale, rng)
