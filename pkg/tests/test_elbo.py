import math

import numpy as np
import pytest
from scipy import integrate
from scipy.special import logsumexp

from blindsr import degradation as D
from blindsr import elbo as E
from blindsr import kernels as K


def instance(seed, size=16, P=7, sigma=0.05, L=1, b_true=1.5, scale=2):
    rng = np.random.default_rng(seed)
    cfg = D.DegradationConfig(scale=scale, sigma_n=sigma, support=P)
    x = rng.random((size, size))
    y = D.degrade(x, K.make_mixture_kernel([b_true] * L, P), cfg, rng)
    return rng, cfg, x, y


TINY = dict(size=8, P=5, sigma=0.05, L=1, b_true=1.0)


def test_draws_validation():
    with pytest.raises(ValueError):
        E.McDraws(np.zeros((0, 1)))
    with pytest.raises(ValueError):
        E.McDraws(np.array([[1.0]]))
    d = E.McDraws.from_seed(3, 5, 2)
    assert d.xi.shape == (5, 2) and d.n_mc == 5


def test_stratified_draws_cover_strata():
    d = E.McDraws.stratified(np.random.default_rng(0), 16, 3)
    for l in range(3):
        np.testing.assert_array_equal(np.sort(np.floor(d.xi[:, l] * 16)), np.arange(16))


def test_elbo_at_prior_and_single_draw():
    rng, cfg, x, y = instance(0, L=2)
    prior = np.array([0.5, 0.8])
    d = E.McDraws.from_rng(rng, 6, 2)
    est = E.elbo(y, x, prior, prior, cfg, d)
    assert est.kl_term == 0.0 and est.value == est.data_term
    assert est.n_mc == 6 and est.std_error > 0
    one = E.McDraws(np.array([[0.3, 0.6]]))
    rates = np.array([1.1, 0.4])
    est = E.elbo(y, x, rates, prior, cfg, one)
    b2 = K.sample_bandwidths(rates, [0.3, 0.6])
    expected = D.log_likelihood(y, x, b2, cfg) - K.kl_exponential(rates, prior)
    assert est.value == expected
    assert est.std_error == 0.0


def test_elbo_breakdown_and_determinism():
    rng, cfg, x, y = instance(1)
    d = E.McDraws.from_rng(rng, 8, 1)
    a = E.elbo(y, x, [0.9], [0.5], cfg, d)
    b = E.elbo(y, x, [0.9], [0.5], cfg, d)
    assert a == b
    assert a.value == pytest.approx(a.data_term - a.kl_term, abs=0)
    # Same draws, rate further from the prior: larger KL, lower value if data fixed.
    c = E.elbo(y, x, [0.9], [0.1], cfg, d)
    assert c.data_term == a.data_term and c.kl_term > a.kl_term and c.value < a.value


def test_per_draw_loglik_cross_module():
    rng, cfg, x, y = instance(2, L=2)
    d = E.McDraws.from_rng(rng, 4, 2)
    rates = np.array([0.7, 1.3])
    lls = E.sample_logliks(y, x, rates, cfg, d)
    for ll, b2 in zip(lls, d.bandwidths(rates)):
        assert ll == D.log_likelihood(y, x, b2, cfg)


def test_sigma_zero_rejected():
    rng, cfg, x, y = instance(3)
    with pytest.raises(ValueError):
        E.elbo(y, x, [1.0], [1.0], cfg.with_(sigma_n=0.0), E.McDraws.from_rng(rng, 2, 1))


@pytest.mark.parametrize("seed", range(10))
def test_grad_x_finite_differences(seed):
    rng, cfg, x, y = instance(100 + seed, L=2)
    d = E.McDraws.from_rng(rng, 3, 2)
    rates = rng.uniform(0.3, 2.0, 2)
    g = E.grad_elbo_x(y, x, rates, cfg, d)
    pix = rng.choice(x.size, 20, replace=False)
    h = 1e-4
    for p in pix:
        up, dn = x.copy(), x.copy()
        up.flat[p] += h
        dn.flat[p] -= h
        fd = (E.elbo(y, up, rates, [1, 1], cfg, d).value - E.elbo(y, dn, rates, [1, 1], cfg, d).value) / (2 * h)
        assert abs(g.flat[p] - fd) <= 1e-5 * max(abs(fd), 1e-3 * np.abs(g).max())


def test_grad_x_zero_at_exact_fit_and_sigma_scaling():
    rng, cfg, x, _ = instance(4)
    d = E.McDraws(np.array([[0.5]]))
    b2 = d.bandwidths([1.0])[0]
    y = D.forward(x, K.make_mixture_kernel(b2, cfg.support), cfg)
    np.testing.assert_allclose(E.grad_elbo_x(y, x, [1.0], cfg, d), 0.0, atol=1e-10)
    y2 = y + rng.normal(0, 0.05, y.shape)
    g1 = E.grad_elbo_x(y2, x, [1.0], cfg, d)
    g2 = E.grad_elbo_x(y2, x, [1.0], cfg.with_(sigma_n=2 * cfg.sigma_n), d)
    np.testing.assert_allclose(g2, g1 / 4, rtol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_grad_lambda_finite_differences(seed):
    rng, cfg, x, y = instance(200 + seed, L=2, b_true=rng_b(seed))
    d = E.McDraws(rng.uniform(0.05, 0.95, (4, 2)))
    rates = rng.uniform(0.3, 2.0, 2)
    prior = np.array([0.5, 0.5])
    g = E.grad_elbo_lambda(y, x, rates, prior, cfg, d)
    for l in range(2):
        h = 1e-5 * rates[l]
        up, dn = rates.copy(), rates.copy()
        up[l] += h
        dn[l] -= h
        fd = (E.elbo(y, x, up, prior, cfg, d).value - E.elbo(y, x, dn, prior, cfg, d).value) / (2 * h)
        assert abs(g[l] - fd) <= 1e-4 * abs(fd)


def rng_b(seed):
    return float(np.random.default_rng(seed).uniform(0.5, 4.0))


def test_grad_lambda_kl_only():
    rng, cfg, x, y = instance(5, L=3)
    d = E.McDraws.from_rng(rng, 3, 3)
    prior = np.array([0.5, 1.0, 2.0])
    np.testing.assert_array_equal(E.grad_elbo_lambda(y, x, prior, prior, cfg, d, data_weight=0.0), 0.0)
    rates = np.array([0.7, 0.7, 0.7])
    g = E.grad_elbo_lambda(y, x, rates, prior, cfg, d, data_weight=0.0)
    np.testing.assert_allclose(g, -K.kl_exponential_grad(rates, prior))


def test_grad_lambda_sign_beyond_optimum():
    cfg = D.DegradationConfig(scale=2, sigma_n=0.01, support=21)
    rng = np.random.default_rng(9)
    x = D.random_hr_image(rng, 32)
    y = D.degrade(x, K.make_mixture_kernel([3.5], 21), cfg, rng)
    grid = np.linspace(0.1, 6, 119)
    b_star = grid[np.argmax([D.log_likelihood(y, x, [b], cfg) for b in grid])]
    # Mean bandwidth well below the optimum: raising the rate must hurt.
    rate = 3.0 / b_star
    d = E.McDraws.stratified(rng, 16, 1)
    g = E.grad_elbo_lambda(y, x, [rate], [1.0 / b_star], cfg, d)
    assert g[0] < 0


def test_quadrature_matches_adaptive_integral():
    _, cfg, x, y = instance(6, **TINY)
    rate = 0.5
    lls = lambda b2: D.log_likelihood(y, x, [b2], cfg)
    ref_max = max(lls(b) for b in np.linspace(0.01, 30, 300))
    val, _ = integrate.quad(lambda b: math.exp(lls(b) - ref_max) * rate * math.exp(-rate * b),
                            1e-8, 60, limit=200, points=[0.5, 1, 2, 4])
    ref = ref_max + math.log(val)
    assert E.marginal_log_likelihood_quadrature(y, x, [rate], cfg) == pytest.approx(ref, abs=1e-4)


def test_quadrature_refinement():
    _, cfg, x, y = instance(6, **TINY)
    a = E.marginal_log_likelihood_quadrature(y, x, [0.5], cfg, E.QuadratureGrid(200))
    b = E.marginal_log_likelihood_quadrature(y, x, [0.5], cfg, E.QuadratureGrid(400))
    assert abs(a - b) < 1e-4


def test_quadrature_concentrated_prior():
    _, cfg, x, y = instance(7, **TINY)
    rate = 1e7
    q = E.marginal_log_likelihood_quadrature(y, x, [rate], cfg)
    assert q == pytest.approx(D.log_likelihood(y, x, [1e-7], cfg), abs=1e-3)


def test_quadrature_two_components_matches_loop():
    _, cfg, x, y = instance(8, size=8, P=5, sigma=0.05, L=2)
    grid = E.QuadratureGrid(n_nodes=15)
    prior = [0.5, 1.5]
    ba, wa = grid.nodes(prior[0])
    bb, wb = grid.nodes(prior[1])
    terms = [D.log_likelihood(y, x, [p, q], cfg) + u + v
             for p, u in zip(ba, wa) for q, v in zip(bb, wb)]
    ref = logsumexp(terms)
    assert E.marginal_log_likelihood_quadrature(y, x, prior, cfg, grid) == pytest.approx(ref, abs=1e-9)


def test_quadrature_rejects_three_components():
    _, cfg, x, y = instance(9, size=8, P=3)
    with pytest.raises(NotImplementedError):
        E.marginal_log_likelihood_quadrature(y, x, [1, 1, 1], cfg)


def test_jensen_bound():
    rng, cfg, x, y = instance(10, **TINY)
    prior = [0.5]
    bound = E.marginal_log_likelihood_quadrature(y, x, prior, cfg)
    for _ in range(20):
        rate = math.exp(rng.uniform(-3, 3))
        est = E.elbo(y, x, [rate], prior, cfg, E.McDraws.from_rng(rng, 64, 1))
        assert est.value <= bound + 3 * est.std_error
