import math
from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crsfl.privacy import (
    DEFAULT_LAPLACE_SCALE, PrivacyError, binomial_tail, delta_bound, issue_certificate,
    kl_bernoulli, laplace_perturb, log_binomial_tail, log_delta_bound, max_sampling_probability,
    max_sampling_size, ratio_admissible,
)


def exact_tail(d, p, K):
    """Rational-arithmetic oracle for Pr[B(d, p) > K]."""
    p = Fraction(p)
    return float(sum(comb(d, i) * p**i * (1 - p)**(d - i) for i in range(K + 1, d + 1)))


def test_max_sampling_probability():
    assert max_sampling_probability(1.0) == pytest.approx(0.6321205588285577, rel=1e-15)
    assert max_sampling_probability(0.1) == pytest.approx(0.09516258196404048, rel=1e-14)
    assert 0 < max_sampling_probability(1e-12) < 1e-11
    with pytest.raises(PrivacyError):
        max_sampling_probability(0.0)


def test_max_sampling_size_examples():
    assert max_sampling_size(1.0, 0.5, 1000) == 816
    for d in (10, 100, 1000, 4321):
        p = max_sampling_probability(0.7)
        assert max_sampling_size(0.7, p, d) == math.floor(d * (1 - math.exp(-1.4)))


def test_max_sampling_size_rejects_bad_p():
    with pytest.raises(PrivacyError):
        max_sampling_size(1.0, 0.7, 100)


def test_k_max_is_tight_under_direct_inequality():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        eps = float(rng.uniform(0.01, 3.0))
        p = float(rng.uniform(1e-6, 1.0)) * max_sampling_probability(eps)
        d = int(rng.integers(1, 5000))
        k = max_sampling_size(eps, p, d)
        assert ratio_admissible(eps, p, k, d)
        assert k == d or not ratio_admissible(eps, p, k + 1, d)


@pytest.mark.parametrize("a, p, expected", [
    (0.3, 0.3, 0.0),
    (0.25, 0.5, 0.25 * math.log(0.5) + 0.75 * math.log(1.5)),
    (0.0, 0.5, math.log(2)),
    (1.0, 0.25, math.log(4)),
])
def test_kl_bernoulli(a, p, expected):
    assert kl_bernoulli(a, p) == pytest.approx(expected, abs=1e-15)


def test_kl_value_to_five_digits():
    # the closed form evaluates to 0.130812..., not 0.1307
    assert round(kl_bernoulli(0.25, 0.5), 5) == 0.13081


@pytest.mark.parametrize("p", [0.0, 1.0])
def test_kl_rejects_degenerate_p(p):
    with pytest.raises(PrivacyError):
        kl_bernoulli(0.5, p)


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1), st.floats(1e-6, 1 - 1e-6))
def test_gibbs_inequality(a, p):
    assert kl_bernoulli(a, p) >= 0.0


def test_delta_bound_examples():
    assert delta_bound(100, 50, 0.5) == 1.0
    assert log_delta_bound(100, 25, 0.5) == pytest.approx(-13.0812035941137, rel=1e-12)
    assert delta_bound(100, 25, 0.5) == pytest.approx(2.084e-6, rel=1e-3)


def test_log_delta_survives_underflow():
    assert delta_bound(10**6, 10**4, 0.5) == 0.0
    assert math.isfinite(log_delta_bound(10**6, 10**4, 0.5))


@pytest.mark.parametrize("d, p, K, expected", [
    (2, 0.5, 0, 0.75),
    (4, 0.5, 2, 5 / 16),
    (7, 0.3, 7, 0.0),
])
def test_binomial_tail_examples(d, p, K, expected):
    assert binomial_tail(d, p, K) == pytest.approx(expected, abs=1e-15)


def test_binomial_tail_matches_rational_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        d = int(rng.integers(1, 61))
        K = int(rng.integers(0, d + 1))
        p = float(rng.uniform(0.01, 0.99))
        assert binomial_tail(d, p, K) == pytest.approx(exact_tail(d, p, K), rel=1e-10, abs=1e-300)


def test_chernoff_dominance_random():
    rng = np.random.default_rng(2)
    checked = 0
    while checked < 500:
        d = int(rng.integers(1, 61))
        K = int(rng.integers(0, d + 1))
        p = float(rng.uniform(0.01, 0.99))
        if K / d <= p:
            continue
        assert log_binomial_tail(d, p, K) <= log_delta_bound(d, K, p) + 1e-12
        checked += 1


def test_delta_decreases_with_d_at_fixed_ratio():
    for ratio, p in ((0.1, 0.5), (0.05, 0.3), (0.8, 0.6)):
        logs = [log_delta_bound(d, int(ratio * d), p) for d in (10, 100, 1000, 10_000)]
        assert all(b < a for a, b in zip(logs, logs[1:]))


def test_certificate_examples():
    refused_p = issue_certificate(1.0, 0.7, 10, 1000)
    assert not refused_p.issued and "p=" in refused_p.reason
    refused_k = issue_certificate(1.0, 0.5, 900, 1000)
    assert not refused_k.issued and "816" in refused_k.reason
    ok = issue_certificate(1.0, 0.5, 50, 1000)
    assert ok.issued and ok.delta_bound < 1 / 1000 and not ok.warning


def test_certificate_refuses_vacuous_bound():
    cert = issue_certificate(1.0, 0.5, 500, 1000)
    assert not cert.issued and "vacuous" in cert.reason


def test_certificate_warns_outside_small_delta_regime():
    cert = issue_certificate(1.0, 0.5, 4, 10)
    assert cert.issued and cert.warning


def test_certificate_exhaustive_grid():
    for eps in np.round(np.arange(0.1, 1.01, 0.1), 10):
        p_grid = np.arange(1, 100) / 100
        for d in (10, 100, 1000):
            for p in p_grid:
                for K in {0, 1, d // 4, d // 2, (3 * d) // 4, d - 1, d}:
                    cert = issue_certificate(float(eps), float(p), K, d)
                    admissible = (p <= 1 - math.exp(-eps)
                                  and K <= d * (1 - math.exp(-eps) + p * math.exp(-eps)))
                    if cert.issued:
                        assert admissible
                        assert math.exp(-eps) <= d / (d - K) * (1 - p) <= math.exp(eps)


def test_laplace_moments():
    rng = np.random.default_rng(3)
    n, scale = 10**6, 0.5
    x = laplace_perturb(np.zeros(n), scale, rng)
    assert abs(x.mean()) < 4 * math.sqrt(2 * scale**2 / n)
    assert x.var() == pytest.approx(2 * scale**2, rel=0.02)


def test_laplace_tiny_scale_is_nearly_identity():
    v = np.array([1.0, -2.0, 3.0])
    out = laplace_perturb(v, 1e-300, np.random.default_rng(0))
    np.testing.assert_allclose(out, v, rtol=0, atol=1e-250)


def test_default_laplace_scale():
    assert DEFAULT_LAPLACE_SCALE == 1e-5
