"""Amortized estimators and the semi-supervised training objective.

The bandwidth predictor maps six global LR image statistics through an
affine layer and a softplus to posterior rates. The restorer runs a fixed
number of CG iterations on the ridge-regularized non-blind problem, with the
ridge weight learnable. Both have few enough parameters that gradients are
taken by central finite differences.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .degradation import forward, gaussian_loglik
from .elbo import McDraws
from .fileio import write_text_atomic
from .gem import solve_quadratic
from .imaging import as_image, rgb_to_y, upsample_bicubic

log = logging.getLogger(__name__)

N_FEATURES = 6
RATE_OFFSET = 1e-6
DEFAULT_RIDGE = 100.0


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite or explodes."""


def softplus(z):
    return np.logaddexp(0.0, z)


def softplus_inv(v):
    v = np.asarray(v, dtype=np.float64)
    return v + np.log(-np.expm1(-v))


def features(y):
    """Global statistics of an LR image, invariant to circular shifts.

    Returns ``[mean, std, mean |dx|, mean |dy|, mean |laplacian|,
    high-frequency power ratio]``; the ratio is the share of non-DC Fourier
    power beyond half the Nyquist radius.
    """
    y = as_image(y)
    if y.ndim == 3:
        y = rgb_to_y(y)
        if y.ndim == 3:
            y = y[0]
    dx = np.roll(y, -1, axis=1) - y
    dy = np.roll(y, -1, axis=0) - y
    lap = (
        np.roll(y, 1, axis=0) + np.roll(y, -1, axis=0)
        + np.roll(y, 1, axis=1) + np.roll(y, -1, axis=1) - 4.0 * y
    )
    power = np.abs(np.fft.fft2(y - y.mean())) ** 2
    fy = np.fft.fftfreq(y.shape[0])[:, None]
    fx = np.fft.fftfreq(y.shape[1])[None, :]
    total = power.sum()
    hf = power[np.hypot(fx, fy) > 0.25].sum() / total if total > 0 else 0.0
    return np.array(
        [y.mean(), y.std(), np.abs(dx).mean(), np.abs(dy).mean(), np.abs(lap).mean(), hf]
    )


@dataclass
class EstimatorParams:
    W: np.ndarray
    c: np.ndarray
    log_ridge: float
    T: int = 5
    support: int = kernels.DEFAULT_SUPPORT

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64).reshape(-1, N_FEATURES)
        self.c = np.asarray(self.c, dtype=np.float64).reshape(-1)
        self.log_ridge = float(self.log_ridge)
        if self.W.shape[0] != self.c.size:
            raise ValueError("W rows and c length differ")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.c))
                and math.isfinite(self.log_ridge)):
            raise ValueError("non-finite estimator parameters")

    @classmethod
    def initial(cls, prior, ridge=DEFAULT_RIDGE, T=5, support=kernels.DEFAULT_SUPPORT):
        """Zero weights with biases chosen so the prediction equals ``prior``."""
        prior = kernels.as_rates(prior)
        return cls(
            W=np.zeros((prior.size, N_FEATURES)),
            c=softplus_inv(prior - RATE_OFFSET),
            log_ridge=float(softplus_inv(ridge)),
            T=T,
            support=support,
        )

    @property
    def components(self):
        return self.c.size

    @property
    def ridge(self):
        return float(softplus(self.log_ridge))

    def flat(self):
        return np.concatenate([self.W.ravel(), self.c, [self.log_ridge]])

    def with_flat(self, theta):
        L = self.components
        n = L * N_FEATURES
        return EstimatorParams(
            W=theta[:n], c=theta[n : n + L], log_ridge=theta[n + L], T=self.T, support=self.support
        )

    def to_dict(self):
        return {
            "W": self.W.tolist(),
            "c": self.c.tolist(),
            "log_ridge": self.log_ridge,
            "T": self.T,
            "L": self.components,
            "P": self.support,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(W=d["W"], c=d["c"], log_ridge=d["log_ridge"], T=int(d["T"]), support=int(d["P"]))

    def save(self, path):
        write_text_atomic(path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class LossWeights:
    alpha_g: float = 1.0
    alpha_r: float = 1.0

    def __post_init__(self):
        if self.alpha_g < 0 or self.alpha_r < 0:
            raise ValueError("loss weights must be >= 0")
        if self.alpha_g == 0 and self.alpha_r == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.0002
    beta1: float = 0.9
    beta2: float = 0.99
    seed: int = 0
    n_mc: int = 2
    fd_step: float = 1e-4
    adam_eps: float = 1e-8
    divergence_limit: float = 1e6

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.n_mc < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and n_mc >= 1 required")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be > 0")


def predict_lambda(params, y):
    """Posterior rates ``softplus(W psi(y) + c) + 1e-6``."""
    return softplus(params.W @ features(y) + params.c) + RATE_OFFSET


def restore(params, y, b2, cfg):
    """Exactly ``T`` CG iterations on the non-blind problem for kernel ``k(b2)``."""
    y = as_image(y, "y")
    k = kernels.make_mixture_kernel(b2, params.support)
    anchor = upsample_bicubic(y, cfg.scale)
    deg = cfg if cfg.support == params.support else cfg.with_(support=params.support)
    x, _ = solve_quadratic(y, [k], deg, params.ridge, anchor, anchor, params.T, tol=0.0)
    return x


def _rollout(params, y, cfg, draws):
    # Rates, per-draw bandwidths and per-draw restorations for one LR image.
    rates = predict_lambda(params, y)
    b2s = draws.bandwidths(rates)
    return rates, b2s, [restore(params, y, b2, cfg) for b2 in b2s]


class _RolloutCache:
    """Memoizes rollouts per image object within a single loss evaluation."""

    def __init__(self, params, cfg, draws):
        self.params, self.cfg, self.draws = params, cfg, draws
        self._store = {}

    def __call__(self, y):
        key = id(y)
        if key not in self._store:
            self._store[key] = (y, _rollout(self.params, y, self.cfg, self.draws))
        return self._store[key][1]


def _gem_objective(y, rollout, prior, params, cfg):
    rates, b2s, xs = rollout
    deg = cfg if cfg.support == params.support else cfg.with_(support=params.support)
    lls = [
        gaussian_loglik(y, forward(x, kernels.make_mixture_kernel(b2, params.support), deg), cfg.sigma_n)
        for b2, x in zip(b2s, xs)
    ]
    return float(np.mean(lls)) - kernels.kl_exponential(rates, prior)


def loss_gem(params, batch, prior, cfg, draws, _cache=None):
    """Negative mean per-image ELBO over LR images (labeled and unlabeled)."""
    batch = list(batch)
    if not batch:
        raise ValueError("loss_gem needs a non-empty batch")
    cache = _cache or _RolloutCache(params, cfg, draws)
    vals = [_gem_objective(y, cache(y), prior, params, cfg) for y in batch]
    return -float(np.mean(vals))


def _mse(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def loss_sup(params, pairs, cfg, draws, _cache=None):
    """Mean per-pixel squared error between HR targets and restorations."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("loss_sup needs a non-empty batch")
    cache = _cache or _RolloutCache(params, cfg, draws)
    vals = []
    for item in pairs:
        x, y = item[0], item[1]
        _, _, xs = cache(y)
        vals.append(np.mean([_mse(x, xh) for xh in xs]))
    return float(np.mean(vals))


def fit_kernel_support(k, P):
    """Zero-pad a square odd kernel grid to support ``P``."""
    grid = np.asarray(getattr(k, "grid", k), dtype=np.float64)
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1] or grid.shape[0] % 2 == 0:
        raise ValueError(f"kernel must be square with odd support, got {grid.shape}")
    n = grid.shape[0]
    if n > P:
        raise ValueError(f"kernel support {n} exceeds model support {P}")
    pad = (P - n) // 2
    return np.pad(grid, pad)


def kernel_term(params, triples, cfg, draws, _cache=None):
    """Mean squared Frobenius distance between true and sampled mixture kernels."""
    cache = _cache or _RolloutCache(params, cfg, draws)
    vals = []
    for x, y, k in triples:
        target = fit_kernel_support(k, params.support)
        _, b2s, _ = cache(y)
        vals.append(np.mean([
            np.sum((target - kernels.make_mixture_kernel(b2, params.support).grid) ** 2)
            for b2 in b2s
        ]))
    return float(np.mean(vals))


def loss_sup_kernel(params, triples, cfg, draws, _cache=None):
    """Supervised loss plus the kernel-matching penalty for ``(x, y, k)`` triples."""
    triples = list(triples)
    if not triples:
        raise ValueError("loss_sup_kernel needs a non-empty batch")
    cache = _cache or _RolloutCache(params, cfg, draws)
    return loss_sup(params, triples, cfg, draws, cache) + kernel_term(params, triples, cfg, draws, cache)


def total_loss(params, labeled, unlabeled, weights, prior, cfg, draws):
    """``alpha_g * loss_gem(Y + Ybar) + alpha_r * supervised`` on the given batches.

    ``labeled`` holds ``(x, y)`` pairs or ``(x, y, k)`` triples; the kernel
    variant of the supervised term is used when every item carries a kernel.
    Terms with zero weight or no data are dropped.
    """
    labeled = list(labeled)
    unlabeled = list(unlabeled)
    if not labeled and not unlabeled:
        raise ValueError("both datasets are empty")
    cache = _RolloutCache(params, cfg, draws)
    total = 0.0
    active = False
    lr_images = [item[1] for item in labeled] + unlabeled
    if weights.alpha_g > 0 and lr_images:
        total += weights.alpha_g * loss_gem(params, lr_images, prior, cfg, draws, cache)
        active = True
    if weights.alpha_r > 0 and labeled:
        if all(len(item) > 2 and item[2] is not None for item in labeled):
            sup = loss_sup_kernel(params, labeled, cfg, draws, cache)
        else:
            sup = loss_sup(params, labeled, cfg, draws, cache)
        total += weights.alpha_r * sup
        active = True
    if not active:
        raise ValueError("no active loss term for the given weights and data")
    return total


def unsupervised_rate(n_labeled, n_unlabeled):
    """``eta = M / (M + N)`` for N labeled pairs and M unlabeled images."""
    if n_labeled + n_unlabeled == 0:
        raise ValueError("no training data")
    return n_unlabeled / (n_unlabeled + n_labeled)


def derive_seed(seed, purpose):
    """Stable 63-bit seed from a master seed and a purpose string."""
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def fd_gradient(fun, theta, step):
    """Central finite-difference gradient with per-coordinate step ``step * max(1, |theta_i|)``."""
    grad = np.empty_like(theta)
    for i in range(theta.size):
        h = step * max(1.0, abs(theta[i]))
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (fun(up) - fun(dn)) / (2 * h)
    return grad


@dataclass
class TrainResult:
    params: EstimatorParams
    curve: list = field(default_factory=list)
    eta: float = 0.0


def _check_loss(value, limit, where):
    if not math.isfinite(value) or value > limit:
        raise TrainingDiverged(f"loss {value!r} at {where}")


def train(labeled, unlabeled, weights, train_cfg, prior, cfg, init=None):
    """Adam on ``total_loss`` with finite-difference parameter gradients.

    Each epoch reshuffles both datasets and draws fresh Monte Carlo samples
    from a seed derived from ``(seed, epoch)``. The returned curve holds the
    full-data loss before training and after every epoch, evaluated on one
    fixed set of draws so epochs are comparable.
    """
    labeled = list(labeled)
    unlabeled = list(unlabeled)
    if weights.alpha_r > 0 and weights.alpha_g == 0 and not labeled:
        raise ValueError("supervised-only training needs labeled data")
    if not labeled and not unlabeled:
        raise ValueError("no training data")
    prior = kernels.as_rates(prior)
    params = init or EstimatorParams.initial(prior, support=cfg.support)
    eta = unsupervised_rate(len(labeled), len(unlabeled))
    eval_draws = McDraws.from_seed(derive_seed(train_cfg.seed, "eval"), train_cfg.n_mc, prior.size)

    def full_loss(p):
        return total_loss(p, labeled, unlabeled, weights, prior, cfg, eval_draws)

    curve = [full_loss(params)]
    _check_loss(curve[0], train_cfg.divergence_limit, "initialization")
    theta = params.flat()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    t = 0
    union = [("l", item) for item in labeled] + [("u", y) for y in unlabeled]
    for epoch in range(train_cfg.epochs):
        rng = np.random.default_rng(derive_seed(train_cfg.seed, f"epoch-{epoch}"))
        order = rng.permutation(len(union))
        bs = train_cfg.batch_size
        for step in range(math.ceil(len(union) / bs)):
            chunk = [union[i] for i in order[step * bs : (step + 1) * bs]]
            bl = [item for tag, item in chunk if tag == "l"]
            bu = [item for tag, item in chunk if tag == "u"]
            draws = McDraws.from_rng(rng, train_cfg.n_mc, prior.size)

            def batch_loss(th):
                p = params.with_flat(th)
                return total_loss(p, bl, bu, weights, prior, cfg, draws)

            grad = fd_gradient(batch_loss, theta, train_cfg.fd_step)
            if not np.all(np.isfinite(grad)):
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch}, step {step}")
            t += 1
            m = train_cfg.beta1 * m + (1 - train_cfg.beta1) * grad
            v = train_cfg.beta2 * v + (1 - train_cfg.beta2) * grad**2
            mhat = m / (1 - train_cfg.beta1**t)
            vhat = v / (1 - train_cfg.beta2**t)
            theta = theta - train_cfg.learning_rate * mhat / (np.sqrt(vhat) + train_cfg.adam_eps)
        params = params.with_flat(theta)
        curve.append(full_loss(params))
        _check_loss(curve[-1], train_cfg.divergence_limit, f"epoch {epoch}")
        log.info("epoch %d loss %.6g", epoch, curve[-1])
    return TrainResult(params=params, curve=curve, eta=eta)
