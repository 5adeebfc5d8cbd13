"""Monte Carlo evidence lower bound and its gradients.

With a fixed set of uniform draws (common random numbers) the estimate is a
deterministic function of ``(x, rates)``, which is what the alternating
solver ascends.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .degradation import forward, forward_adjoint, gaussian_loglik, log_likelihood
from .imaging import as_image

FD_REL_STEP = 1e-4


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    data_term: float
    kl_term: float
    n_mc: int
    std_error: float


@dataclass(frozen=True)
class McDraws:
    """Uniform draws ``xi`` of shape ``(n_mc, L)`` in [0, 1)."""

    xi: np.ndarray

    def __post_init__(self):
        xi = np.atleast_2d(np.asarray(self.xi, dtype=np.float64))
        if xi.size == 0:
            raise ValueError("empty Monte Carlo draws")
        if np.any(xi < 0) or np.any(xi >= 1):
            raise ValueError("draws must lie in [0, 1)")
        object.__setattr__(self, "xi", xi)

    @classmethod
    def from_rng(cls, rng, n_mc, components):
        return cls(rng.random((n_mc, components)))

    @classmethod
    def stratified(cls, rng, n_mc, components):
        """Latin hypercube draws: one uniform per stratum in every column."""
        u = (np.arange(n_mc)[:, None] + rng.random((n_mc, components))) / n_mc
        for l in range(components):
            u[:, l] = rng.permutation(u[:, l])
        # (i + r) / n can round up to 1.0 for r close to 1.
        return cls(np.minimum(u, np.nextafter(1.0, 0.0)))

    @classmethod
    def from_seed(cls, seed, n_mc, components, stratified=False):
        rng = np.random.default_rng(seed)
        if stratified:
            return cls.stratified(rng, n_mc, components)
        return cls.from_rng(rng, n_mc, components)

    @property
    def n_mc(self):
        return self.xi.shape[0]

    def bandwidths(self, rates):
        """Reparameterized ``(n_mc, L)`` bandwidth samples for ``rates``."""
        return kernels.sample_bandwidths(rates, self.xi)


def _check_sigma(cfg):
    if not cfg.sigma_n > 0:
        raise ValueError("sigma_n must be > 0")


def sample_logliks(y, x, rates, cfg, draws):
    """Per-draw log-likelihoods ``log p(y | x, b2_m)``."""
    _check_sigma(cfg)
    return np.array([log_likelihood(y, x, b2, cfg) for b2 in draws.bandwidths(rates)])


def elbo(y, x, rates, prior, cfg, draws):
    """Monte Carlo ELBO: mean draw log-likelihood minus analytic KL."""
    lls = sample_logliks(y, x, rates, cfg, draws)
    n = lls.size
    data = float(np.mean(lls))
    kl = kernels.kl_exponential(rates, prior)
    se = float(np.std(lls, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return ElboEstimate(value=data - kl, data_term=data, kl_term=kl, n_mc=n, std_error=se)


def grad_elbo_x(y, x, rates, cfg, draws):
    """Gradient of the ELBO with respect to the HR image ``x``."""
    _check_sigma(cfg)
    x = as_image(x)
    grad = np.zeros_like(x)
    for b2 in draws.bandwidths(rates):
        k = kernels.make_mixture_kernel(b2, cfg.support)
        resid = np.asarray(y) - forward(x, k, cfg)
        grad += forward_adjoint(resid, k, cfg, x.shape[-2:])
    return grad / (draws.n_mc * cfg.sigma_n**2)


def loglik_bandwidth_grad(y, x, b2, cfg, rel_step=FD_REL_STEP):
    """Central finite-difference gradient of ``log_likelihood`` w.r.t. ``b2``."""
    b2 = np.asarray(b2, dtype=np.float64)
    grad = np.empty_like(b2)
    for l in range(b2.size):
        h = rel_step * b2[l]
        up, dn = b2.copy(), b2.copy()
        up[l] += h
        dn[l] -= h
        grad[l] = (log_likelihood(y, x, up, cfg) - log_likelihood(y, x, dn, cfg)) / (2 * h)
    return grad


def grad_elbo_lambda(y, x, rates, prior, cfg, draws, data_weight=1.0):
    """Pathwise gradient of the ELBO with respect to the posterior rates.

    ``data_weight`` scales the data-term contribution; zero leaves only the
    KL gradient.
    """
    rates = kernels.as_rates(rates)
    grad = np.zeros_like(rates)
    if data_weight:
        db_dr = kernels.sample_bandwidths_grad(rates, draws.xi)
        for b2, jac in zip(draws.bandwidths(rates), db_dr):
            grad += loglik_bandwidth_grad(y, x, b2, cfg) * jac
        grad *= data_weight / draws.n_mc
    return grad - kernels.kl_exponential_grad(rates, prior)


@dataclass(frozen=True)
class QuadratureGrid:
    """Trapezoid nodes, uniform in prior CDF coordinates.

    Node ``u`` in [0, 1 - tail] maps to ``b2 = -ln(1 - u) / rate``, so the
    covered bandwidth range is [floor, -ln(tail) / rate].
    """

    n_nodes: int = 200
    tail: float = 1e-12

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ValueError("need at least 2 quadrature nodes")
        if not 0 < self.tail < 1:
            raise ValueError("tail must lie in (0, 1)")

    def nodes(self, rate):
        u = np.linspace(0.0, 1.0 - self.tail, self.n_nodes)
        b2 = np.maximum(-np.log1p(-u) / rate, kernels.BANDWIDTH_FLOOR)
        logw = np.full(self.n_nodes, np.log(u[1] - u[0]))
        logw[[0, -1]] -= np.log(2.0)
        return b2, logw


def _component_means(x, b2_nodes, cfg):
    # Per-node noiseless observation for one normalized Gaussian, plus the
    # raw (pre-normalization) mass that weights it inside a mixture.
    P = cfg.support
    raw = kernels._gaussian_stack(b2_nodes, P)
    mass = raw.sum(axis=(1, 2))
    means = np.stack([forward(x, g / m, cfg) for g, m in zip(raw, mass)])
    return means, mass


def marginal_log_likelihood_quadrature(y, x, prior, cfg, grid=None):
    """``log p(y | x)`` by integrating the likelihood against the prior.

    Supports one or two mixture components.
    """
    _check_sigma(cfg)
    prior = kernels.as_rates(prior)
    grid = grid or QuadratureGrid()
    L = prior.size
    if L > 2:
        raise NotImplementedError("quadrature supports at most 2 components")
    y = np.asarray(y, dtype=np.float64)
    if L == 1:
        b2, logw = grid.nodes(prior[0])
        means, _ = _component_means(x, b2, cfg)
        logf = np.array([gaussian_loglik(y, m, cfg.sigma_n) for m in means])
        return float(logsumexp(logf + logw))
    b2a, logwa = grid.nodes(prior[0])
    b2b, logwb = grid.nodes(prior[1])
    ma, sa = _component_means(x, b2a, cfg)
    mb, sb = _component_means(x, b2b, cfg)
    n = y.size
    const = -n * (0.5 * np.log(2 * np.pi) + np.log(cfg.sigma_n))
    ma = ma.reshape(len(b2a), -1)
    mb = mb.reshape(len(b2b), -1)
    yf = y.reshape(-1)
    rows = []
    for i in range(len(b2a)):
        mix = (sa[i] * ma[i] + sb[:, None] * mb) / (sa[i] + sb)[:, None]
        sq = np.sum((yf - mix) ** 2, axis=1)
        rows.append(const - sq / (2 * cfg.sigma_n**2) + logwb)
    logf = np.array(rows) + logwa[:, None]
    return float(logsumexp(logf))
