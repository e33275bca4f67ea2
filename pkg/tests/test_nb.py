import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy import special, stats

from flatvi.errors import DomainError
from flatvi.nb import nb_fisher_mu, nb_kl_same_theta, nb_log_pmf, nb_sample

pos = st.floats(min_value=0.05, max_value=50.0)


def test_log_pmf_at_zero():
    assert nb_log_pmf(0, 1.0, 1.0) == pytest.approx(math.log(0.5), rel=1e-15)
    for mu, theta in [(0.3, 2.0), (7.0, 0.4), (100.0, 5.0)]:
        expected = theta * (math.log(theta) - math.log(theta + mu))
        assert nb_log_pmf(0, mu, theta) == pytest.approx(expected, rel=1e-13)


def test_pmf_normalises_by_exhaustive_sum():
    x = np.arange(0, 10001)
    total = np.exp(nb_log_pmf(x, 2.5, 1.7)).sum()
    assert abs(total - 1.0) < 1e-8


def test_log_pmf_matches_scipy_parameterisation():
    x = np.arange(0, 60)
    mu, theta = 4.2, 1.3
    ref = stats.nbinom.logpmf(x, theta, theta / (theta + mu))
    np.testing.assert_allclose(nb_log_pmf(x, mu, theta), ref, rtol=1e-11)


@given(mu=pos, theta=pos, x=st.integers(0, 500))
def test_log_pmf_is_nonpositive(mu, theta, x):
    assert nb_log_pmf(x, mu, theta) <= 0.0


def test_lgamma_accuracy_over_range():
    x = np.logspace(-3, 8, 400)
    got = torch.lgamma(torch.as_tensor(x, dtype=torch.float64)).numpy()
    np.testing.assert_allclose(got, special.gammaln(x), rtol=1e-12, atol=1e-13)


def test_domain_errors():
    with pytest.raises(DomainError):
        nb_log_pmf(1, 0.0, 1.0)
    with pytest.raises(DomainError):
        nb_log_pmf(1, 1.0, -1.0)
    with pytest.raises(DomainError):
        nb_fisher_mu(-1.0, 1.0)
    with pytest.raises(DomainError):
        nb_kl_same_theta(1.0, 0.0, 1.0)


def test_torch_inputs_stay_differentiable():
    mu = torch.tensor([1.5, 3.0], dtype=torch.float64, requires_grad=True)
    out = nb_log_pmf(torch.tensor([1.0, 4.0], dtype=torch.float64), mu, torch.tensor(2.0, dtype=torch.float64))
    out.sum().backward()
    # d/dmu log p = x/mu - (theta + x)/(theta + mu)
    expected = torch.tensor([1 / 1.5 - 3 / 3.5, 4 / 3.0 - 6 / 5.0], dtype=torch.float64)
    torch.testing.assert_close(mu.grad, expected)


# ---------------------------------------------------------------- Fisher information


def test_fisher_at_unit_parameters_by_monte_carlo():
    rng = np.random.default_rng(0)
    x = nb_sample(1.0, 1.0, rng, size=1_000_000)
    score = x / 1.0 - (1.0 + x) / 2.0
    assert nb_fisher_mu(1.0, 1.0) == pytest.approx(0.5)
    assert np.var(score) == pytest.approx(0.5, rel=0.01)


def test_fisher_exact_expectation_by_summation():
    # E[score^2] over the support, truncated where the tail is negligible
    for mu, theta in [(2.0, 3.0), (0.4, 0.7), (12.0, 5.0)]:
        x = np.arange(0, 20000)
        p = np.exp(nb_log_pmf(x, mu, theta))
        score = x / mu - (theta + x) / (theta + mu)
        assert np.sum(p * score**2) == pytest.approx(nb_fisher_mu(mu, theta), rel=1e-9)


@given(mu=pos, theta=pos, c=st.floats(0.1, 10.0))
def test_fisher_scaling_law(mu, theta, c):
    assert nb_fisher_mu(c * mu, c * theta) == pytest.approx(nb_fisher_mu(mu, theta) / c, rel=1e-12)


def test_fisher_poisson_limit():
    assert abs(nb_fisher_mu(4.0, 1e6) - 0.25) < 1e-3


def test_fisher_is_negative_expected_hessian(rng):
    for _ in range(5):
        mu, theta = rng.uniform(0.2, 10.0), rng.uniform(0.2, 10.0)
        x = nb_sample(mu, theta, rng, size=400_000)
        hess = -(theta + x) / (theta + mu) ** 2 + x / mu**2
        assert np.mean(hess) == pytest.approx(nb_fisher_mu(mu, theta), rel=0.02)


# ---------------------------------------------------------------- KL


def test_kl_identical_is_zero():
    assert nb_kl_same_theta(3.0, 3.0, 2.0) == 0.0


def test_kl_matches_exhaustive_sum():
    x = np.arange(0, 10001)
    lp1, lp2 = nb_log_pmf(x, 1.0, 1.0), nb_log_pmf(x, 2.0, 1.0)
    brute = np.sum(np.exp(lp1) * (lp1 - lp2))
    assert abs(nb_kl_same_theta(1.0, 2.0, 1.0) - brute) < 1e-8


def test_kl_second_order_matches_fisher():
    mu, theta, d = 2.0, 3.0, 1e-3
    assert 2 * nb_kl_same_theta(mu, mu + d, theta) / d**2 == pytest.approx(nb_fisher_mu(mu, theta), rel=1e-3)


@given(a=pos, b=pos, theta=pos)
def test_kl_nonnegative_and_zero_only_on_diagonal(a, b, theta):
    kl = nb_kl_same_theta(a, b, theta)
    assert kl >= 0.0
    if abs(a - b) > 1e-3 * max(a, b):
        assert kl > 0.0


def test_kl_batched_torch_matches_scalar():
    a = torch.tensor([[1.0, 2.0], [0.5, 8.0]], dtype=torch.float64)
    b = torch.tensor([[1.5, 2.0], [0.25, 9.0]], dtype=torch.float64)
    th = torch.tensor([0.7, 4.0], dtype=torch.float64)
    got = nb_kl_same_theta(a, b, th)
    for i in range(2):
        for j in range(2):
            assert float(got[i, j]) == pytest.approx(
                nb_kl_same_theta(float(a[i, j]), float(b[i, j]), float(th[j])), rel=1e-14, abs=1e-300)


# ---------------------------------------------------------------- sampling


def test_sample_moments():
    rng = np.random.default_rng(1)
    x = nb_sample(5.0, 2.0, rng, size=100_000)
    assert x.dtype == np.int64
    assert abs(x.mean() - 5.0) < 0.1
    assert abs(x.var() - 17.5) < 0.6


def test_sample_poisson_limit():
    x = nb_sample(3.0, 1e6, np.random.default_rng(2), size=100_000)
    assert abs(x.var() - 3.0) < 0.1


def test_sample_is_seed_deterministic():
    a = nb_sample(np.full(50, 4.0), 1.5, np.random.default_rng(7))
    b = nb_sample(np.full(50, 4.0), 1.5, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_sample_overflow_is_an_error():
    with pytest.raises(OverflowError):
        nb_sample(1e15, 1e6, np.random.default_rng(0), size=3)
