"""Per-image blind super-resolution by generalized EM.

The E-step ascends the Monte Carlo ELBO over log-rates with an Armijo line
search; the M-step is a capped conjugate-gradient solve of the quadratic
data term plus a ridge toward the bicubic upsampling. Both steps are
only accepted when the surrogate does not decrease, so with fixed draws the
recorded trace is monotone.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .degradation import DegradationConfig, forward, forward_adjoint, gaussian_loglik
from .elbo import ElboEstimate, McDraws, elbo, grad_elbo_lambda
from .imaging import as_image, upsample_bicubic

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Raised when an update produces non-finite values."""


class CGBreakdownWarning(RuntimeWarning):
    """CG met nonpositive curvature; the best iterate so far was returned."""


@dataclass(frozen=True)
class GemConfig:
    max_outer: int = 50
    e_steps: int = 5
    m_cg_iters: int = 20
    tol_rel: float = 1e-5
    ridge: float = 100.0
    n_mc: int = 8
    seed: int = 0
    lambda_init: tuple | None = None
    prior: tuple = tuple(kernels.default_prior())
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    cg_tol: float = 1e-8
    armijo_c: float = 1e-4
    max_log_step: float = 1.0
    max_halvings: int = 20
    fresh_draws: bool = False
    stratified: bool = True

    def __post_init__(self):
        if self.max_outer < 0:
            raise ValueError("max_outer must be >= 0")
        if not self.tol_rel > 0:
            raise ValueError("tol_rel must be > 0")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")
        kernels.as_rates(self.prior)
        if self.lambda_init is not None and len(self.lambda_init) != len(self.prior):
            raise ValueError("lambda_init and prior lengths differ")

    @property
    def components(self):
        return len(self.prior)

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass
class GemState:
    x_hat: np.ndarray
    lambda_hat: np.ndarray
    elbo_trace: list = field(default_factory=list)
    outer_iter: int = 0
    initial_elbo: ElboEstimate | None = None


def conjugate_gradient(apply_a, b, x0, max_iter, tol=0.0):
    """Plain CG for a symmetric positive (semi)definite operator.

    Stops after ``max_iter`` iterations or when ``||r|| <= tol * ||b||``.
    Returns ``(x, iterations, broke_down)``.
    """
    x = x0.copy()
    r = b - apply_a(x)
    p = r.copy()
    rr = float(np.vdot(r, r))
    bnorm = float(np.sqrt(np.vdot(b, b))) or 1.0
    for it in range(max_iter):
        if np.sqrt(rr) <= tol * bnorm or rr == 0.0:
            return x, it, False
        ap = apply_a(p)
        curv = float(np.vdot(p, ap))
        if not curv > 0:
            return x, it, True
        alpha = rr / curv
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = float(np.vdot(r, r))
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, max_iter, False


def solve_quadratic(y, kernel_list, deg, ridge, anchor, x0, iters, tol):
    """Minimize mean_m ||y - D K_m x||^2 / (2 s^2) + ridge ||x - anchor||^2 by CG.

    The normal equations are scaled by ``s^2`` for conditioning. Returns
    ``(x, broke_down)``.
    """
    y = np.asarray(y, dtype=np.float64)
    shape = np.shape(x0)[-2:]
    n = len(kernel_list)
    reg = 2.0 * ridge * deg.sigma_n**2

    def apply_a(v):
        out = reg * v
        for k in kernel_list:
            out = out + forward_adjoint(forward(v, k, deg), k, deg, shape) / n
        return out

    rhs = reg * anchor
    for k in kernel_list:
        rhs = rhs + forward_adjoint(y, k, deg, shape) / n
    x, _, broke = conjugate_gradient(apply_a, rhs, np.asarray(x0, dtype=np.float64), iters, tol)
    return x, broke


def _data_term(y, x, kernel_list, deg):
    return float(np.mean([gaussian_loglik(y, forward(x, k, deg), deg.sigma_n) for k in kernel_list]))


def e_step(y, x, rates_in, prior, cfg, draws):
    """Ascend the ELBO over log-rates; never returns a lower surrogate value."""
    deg = cfg.degradation
    rates = kernels.as_rates(rates_in).copy()
    f0 = elbo(y, x, rates, prior, deg, draws).value
    for _ in range(cfg.e_steps):
        g = grad_elbo_lambda(y, x, rates, prior, deg, draws) * rates
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite rate gradient {g} at rates {rates}")
        gmax = float(np.max(np.abs(g)))
        if gmax == 0.0:
            break
        gg = float(g @ g)
        step = cfg.max_log_step / gmax
        accepted = False
        for _ in range(cfg.max_halvings):
            trial = rates * np.exp(step * g)
            f1 = elbo(y, x, trial, prior, deg, draws).value
            if f1 >= f0 + cfg.armijo_c * step * gg:
                rates, f0, accepted = trial, f1, True
                break
            step *= 0.5
        if not accepted:
            break
    return rates


def m_step(y, rates, x_in, cfg, draws):
    """Partial maximization over ``x`` by capped CG.

    The CG result is accepted only if the data term does not decrease;
    otherwise the step toward it is halved, falling back to ``x_in``.
    """
    deg = cfg.degradation
    x_in = as_image(x_in)
    kernel_list = [kernels.make_mixture_kernel(b2, deg.support) for b2 in draws.bandwidths(rates)]
    anchor = upsample_bicubic(y, deg.scale)
    x_new, broke = solve_quadratic(
        y, kernel_list, deg, cfg.ridge, anchor, x_in, cfg.m_cg_iters, cfg.cg_tol
    )
    if broke:
        warnings.warn("CG hit nonpositive curvature; returning best iterate", CGBreakdownWarning)
    if not np.all(np.isfinite(x_new)):
        raise NumericalError("M-step produced non-finite image")
    f_in = _data_term(y, x_in, kernel_list, deg)
    step = x_new - x_in
    for _ in range(30):
        cand = x_in + step
        if _data_term(y, cand, kernel_list, deg) >= f_in:
            return cand
        step = 0.5 * step
    return x_in


def _draws(rng, cfg, components):
    if cfg.stratified:
        return McDraws.stratified(rng, cfg.n_mc, components)
    return McDraws.from_rng(rng, cfg.n_mc, components)


def solve_blind(y, cfg):
    """Alternate E- and M-steps from the bicubic / prior initialization."""
    deg = cfg.degradation
    y = as_image(y, "y")
    prior = np.asarray(cfg.prior, dtype=np.float64)
    rates = np.asarray(cfg.lambda_init if cfg.lambda_init is not None else prior, dtype=np.float64)
    x = upsample_bicubic(y, deg.scale)
    rng = np.random.default_rng(cfg.seed)
    draws = _draws(rng, cfg, prior.size)
    state = GemState(x_hat=x, lambda_hat=rates)
    state.initial_elbo = elbo(y, x, rates, prior, deg, draws)
    prev = state.initial_elbo.value
    for it in range(cfg.max_outer):
        if cfg.fresh_draws and it > 0:
            draws = _draws(rng, cfg, prior.size)
        rates = e_step(y, x, rates, prior, cfg, draws)
        state.elbo_trace.append(elbo(y, x, rates, prior, deg, draws))
        x = m_step(y, rates, x, cfg, draws)
        cur = elbo(y, x, rates, prior, deg, draws)
        state.elbo_trace.append(cur)
        state.x_hat, state.lambda_hat, state.outer_iter = x, rates, it + 1
        if abs(cur.value - prev) < cfg.tol_rel * abs(prev):
            break
        prev = cur.value
    if not np.all(np.isfinite(state.x_hat)):
        raise NumericalError("solver produced a non-finite image")
    return state


def solve_nonblind(y, b2, cfg):
    """Restore with the kernel fixed at ``k(b2)``: one capped CG solve."""
    deg = cfg.degradation
    y = as_image(y, "y")
    k = kernels.make_mixture_kernel(b2, deg.support)
    anchor = upsample_bicubic(y, deg.scale)
    x, broke = solve_quadratic(y, [k], deg, cfg.ridge, anchor, anchor, cfg.m_cg_iters, cfg.cg_tol)
    if broke:
        warnings.warn("CG hit nonpositive curvature; returning best iterate", CGBreakdownWarning)
    return x
