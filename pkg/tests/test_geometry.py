import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from flatvi.errors import DomainError, ShapeError
from flatvi.geometry import (affine_invariant_distance, condition_number, eigenvalues, flattening_loss,
                             metric_report, pullback_metric, pullback_metric_outer, vor, vor_terms)
from flatvi.nb import nb_kl_same_theta
from flatvi.nbvae import NbVaeModel, decode


def random_model(seed, d=3, g=6):
    m = NbVaeModel(g, latent_dim=d, hidden=(8,), seed=seed)
    with torch.no_grad():
        m.log_theta.copy_(torch.randn(g, generator=torch.Generator().manual_seed(seed), dtype=torch.float64))
    m.eval()
    return m


def random_spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + 0.1 * np.eye(d)


# ---------------------------------------------------------------- pullback metric


def test_metric_matches_finite_difference_jacobian():
    m = random_model(0)
    z = torch.randn(3, dtype=torch.float64)
    l = 7.0
    eps = 1e-6
    cols = []
    for i in range(3):
        e = torch.zeros(3, dtype=torch.float64)
        e[i] = eps
        cols.append((decode(m, (z + e)[None], l) - decode(m, (z - e)[None], l))[0] / (2 * eps))
    jac = torch.stack(cols, dim=1)
    h = decode(m, z[None], l)[0]
    w = m.theta / (h * (h + m.theta))
    expected = jac.T @ torch.diag(w) @ jac
    got = pullback_metric(m, z, l)
    torch.testing.assert_close(got, expected.detach(), rtol=1e-6, atol=1e-12)


def test_two_assembly_routes_agree():
    m = random_model(1, d=4, g=9)
    z = torch.randn(5, 4, dtype=torch.float64)
    a = pullback_metric(m, z, 3.0).detach()
    b = pullback_metric_outer(m, z, 3.0).detach()
    assert float((a - b).abs().max()) <= 1e-12 * float(b.abs().max())


def test_metric_scales_linearly_with_size_factor_in_poisson_regime():
    m = random_model(2)
    with torch.no_grad():
        m.log_theta.fill_(10.0)  # theta ~ 2.2e4, so the weights are ~1/h
    z = torch.randn(3, dtype=torch.float64)
    m1 = pullback_metric(m, z, 1.0)
    m10 = pullback_metric(m, z, 10.0)
    torch.testing.assert_close(m10, 10 * m1, rtol=1e-3, atol=0)


def test_quadratic_form_matches_kl_second_order(trained_model):
    rng = np.random.default_rng(0)
    m = trained_model
    eps = 1e-3
    for _ in range(10):
        z = torch.as_tensor(rng.standard_normal(2), dtype=torch.float64)
        v = torch.as_tensor(rng.standard_normal(2), dtype=torch.float64)
        quad = float(v @ pullback_metric(m, z, 1.0).detach() @ v)
        with torch.no_grad():
            mu = decode(m, torch.stack([z, z + eps * v]), 1.0)
        kl = float(nb_kl_same_theta(mu[0], mu[1], m.theta.detach()).sum())
        assert 2 * kl / eps**2 == pytest.approx(quad, rel=0.01)


@given(seed=st.integers(0, 1000))
def test_metric_is_symmetric_psd(seed):
    m = random_model(seed % 7)
    z = torch.randn(4, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(seed)) * 3
    ms = pullback_metric(m, z, 2.0).detach()
    assert torch.equal(ms, ms.transpose(-1, -2))
    assert np.all(eigenvalues(ms) >= -1e-12 * ms.diagonal(dim1=-2, dim2=-1).sum(-1).max().item())


def test_bad_size_factor_rejected():
    m = random_model(0)
    with pytest.raises(DomainError):
        pullback_metric(m, torch.zeros(2, 3, dtype=torch.float64), torch.tensor([1.0, 0.0]))
    with pytest.raises(ShapeError):
        pullback_metric(m, torch.zeros(2, 3, dtype=torch.float64), torch.ones(3))


# ---------------------------------------------------------------- flattening loss


def test_flattening_loss_examples():
    eye3 = torch.eye(3, dtype=torch.float64)
    assert float(flattening_loss(torch.stack([2.5 * eye3] * 4), 2.5)) == 0.0
    assert float(flattening_loss(2 * eye3, 1.0)) == pytest.approx(3.0)


def test_flattening_loss_alpha_gradient():
    alpha = torch.tensor(1.0, dtype=torch.float64, requires_grad=True)
    m = torch.zeros(1, 2, 2, dtype=torch.float64)
    flattening_loss(m, alpha).backward()
    assert float(alpha.grad) == pytest.approx(4.0)
    eps = 1e-6
    fd = (float(flattening_loss(m, 1 + eps)) - float(flattening_loss(m, 1 - eps))) / (2 * eps)
    assert fd == pytest.approx(4.0, rel=1e-8)


@given(seed=st.integers(0, 10_000), alpha=st.floats(0.1, 5.0))
def test_flattening_loss_nonnegative_and_zero_only_at_target(seed, alpha):
    rng = np.random.default_rng(seed)
    ms = torch.as_tensor(np.stack([random_spd(rng, 3) for _ in range(4)]))
    assert float(flattening_loss(ms, alpha)) > 0.0
    assert float(flattening_loss(alpha * torch.eye(3, dtype=torch.float64).expand(4, 3, 3), alpha)) == 0.0


def test_flattening_loss_differentiates_through_the_decoder():
    m = random_model(3)
    z = torch.randn(6, 3, dtype=torch.float64)
    flattening_loss(pullback_metric(m, z, 5.0), m.alpha).backward()
    assert torch.count_nonzero(m.decoder.weights[0].grad) > 0
    assert m.log_theta.grad is not None and m.log_alpha_raw.grad is not None
    assert m.encoder.weights[0].grad is None


# ---------------------------------------------------------------- diagnostics


def test_condition_number_examples():
    assert condition_number(np.eye(3)) == 1.0
    assert condition_number(np.diag([4.0, 1.0])) == pytest.approx(4.0)
    assert condition_number(np.diag([1.0, 0.0])) == math.inf


def test_eigenvalues_against_quadratic_formula(rng):
    for _ in range(50):
        a = random_spd(rng, 2)
        tr, det = np.trace(a), np.linalg.det(a)
        disc = math.sqrt(tr * tr / 4 - det)
        expected = [tr / 2 - disc, tr / 2 + disc]
        np.testing.assert_allclose(eigenvalues(a), expected, rtol=1e-8)
        assert condition_number(a) == pytest.approx(expected[1] / expected[0], rel=1e-8)


@given(seed=st.integers(0, 10_000), c=st.floats(1e-3, 1e3))
def test_condition_number_scale_invariant(seed, c):
    a = random_spd(np.random.default_rng(seed), 3)
    assert condition_number(c * a) == pytest.approx(condition_number(a), rel=1e-9)


def test_affine_invariant_distance_examples():
    a = np.eye(2)
    assert affine_invariant_distance(a, a) == 0.0
    assert affine_invariant_distance(math.e**2 * np.eye(2), np.eye(2)) == pytest.approx(math.sqrt(8.0), rel=1e-12)


def test_affine_invariant_distance_congruence_invariance(rng):
    for _ in range(20):
        a, b = random_spd(rng, 3), random_spd(rng, 3)
        p = rng.standard_normal((3, 3)) + 3 * np.eye(3)
        d0 = affine_invariant_distance(a, b)
        d1 = affine_invariant_distance(p.T @ a @ p, p.T @ b @ p)
        assert d1 == pytest.approx(d0, rel=1e-8)
        assert affine_invariant_distance(b, a) == pytest.approx(d0, rel=1e-10)


def test_affine_invariant_distance_singular_b():
    with pytest.raises(DomainError):
        affine_invariant_distance(np.eye(2), np.diag([1.0, 0.0]))


def test_vor_constant_field_is_zero():
    c = random_spd(np.random.default_rng(0), 3)
    assert vor(np.stack([c] * 5)) == pytest.approx(0.0, abs=1e-20)


def test_vor_scalar_closed_form():
    e2 = math.e**2
    mbar = (1 + e2) / 2
    expected = 0.5 * (math.log(1 / mbar) ** 2 + math.log(e2 / mbar) ** 2)
    assert vor(np.array([[[1.0]], [[e2]]])) == pytest.approx(expected, rel=1e-12)


def test_vor_permutation_invariant(rng):
    ms = np.stack([random_spd(rng, 2) for _ in range(6)])
    perm = rng.permutation(6)
    assert vor(ms[perm]) == pytest.approx(vor(ms), rel=1e-12)
    np.testing.assert_allclose(vor_terms(ms)[perm], vor_terms(ms[perm]), rtol=1e-12)


def test_vor_needs_a_batch():
    with pytest.raises(ShapeError):
        vor(np.eye(2)[None])


def test_metric_report_consistent(rng):
    ms = np.stack([random_spd(rng, 3) for _ in range(5)])
    rep = metric_report(ms)
    np.testing.assert_allclose(rep["trace"], np.trace(ms, axis1=1, axis2=2), rtol=1e-12)
    np.testing.assert_allclose(rep["cn"], rep["max_eig"] / rep["min_eig"], rtol=1e-12)
    assert np.mean(rep["vor"]) == pytest.approx(vor(ms), rel=1e-14)
