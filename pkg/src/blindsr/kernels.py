"""Mixture-of-Gaussians blur kernels and exponential bandwidth distributions.

Exponentials are parameterized by their rate: ``p(t) = rate * exp(-rate * t)``,
so the mean bandwidth of a component is ``1 / rate``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import write_text_atomic

BANDWIDTH_FLOOR = 1e-8
DEFAULT_COMPONENTS = 3
DEFAULT_PRIOR_RATE = 0.5
DEFAULT_SUPPORT = 21


class DomainError(ValueError):
    """Raised for parameters outside their mathematical domain."""


def _positive_vector(values, name):
    arr = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if arr.ndim != 1 or arr.size < 1:
        raise DomainError(f"{name} must be a non-empty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise DomainError(f"{name} must be finite and > 0, got {arr}")
    return arr


def as_bandwidths(b2):
    """Validate a bandwidth vector ``b^2`` (pixel^2)."""
    return _positive_vector(b2, "bandwidths")


def as_rates(rates):
    """Validate a vector of exponential rates (1/pixel^2)."""
    return _positive_vector(rates, "rates")


def default_prior(components=DEFAULT_COMPONENTS, rate=DEFAULT_PRIOR_RATE):
    return np.full(components, float(rate))


@dataclass(frozen=True)
class MixtureKernel:
    """Normalized P x P blur kernel together with the bandwidths that made it."""

    grid: np.ndarray
    source_b2: np.ndarray = field(default=None)

    @property
    def support(self):
        return self.grid.shape[0]


def _gaussian_stack(b2, P):
    # Unnormalized isotropic Gaussians, one P x P slice per bandwidth.
    r = (P - 1) // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    d2 = ax[:, None] ** 2 + ax[None, :] ** 2
    b2 = np.asarray(b2, dtype=np.float64)[:, None, None]
    return np.exp(-d2 / (2.0 * b2)) / (2.0 * np.pi * b2)


def make_mixture_kernel(b2, P=DEFAULT_SUPPORT):
    """Average of isotropic Gaussians sampled on integer offsets, sum-normalized.

    Parameters
    ----------
    b2 : array_like
        Component bandwidths (variances, pixel^2), all > 0.
    P : int
        Odd kernel support.
    """
    b2 = as_bandwidths(b2)
    if int(P) != P or P < 1 or P % 2 == 0:
        raise DomainError(f"kernel support must be a positive odd integer, got {P}")
    grid = _gaussian_stack(b2, int(P)).mean(axis=0)
    grid = grid / grid.sum()
    # Enforce exact centro-symmetry against rounding in the sum.
    grid = 0.5 * (grid + grid[::-1, ::-1])
    return MixtureKernel(grid=grid, source_b2=b2)


def delta_kernel():
    return MixtureKernel(grid=np.ones((1, 1)), source_b2=None)


def sample_bandwidths(rates, xi):
    """Inverse-CDF reparameterized draw ``b^2 = -ln(1 - xi) / rate``.

    ``xi`` has the same trailing length as ``rates``; a leading batch axis is
    allowed. Results are floored at ``BANDWIDTH_FLOOR``.
    """
    rates = as_rates(rates)
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape[-1] != rates.size:
        raise DomainError(f"uniform draws have {xi.shape[-1]} components, rates have {rates.size}")
    if np.any(xi < 0) or np.any(xi >= 1) or not np.all(np.isfinite(xi)):
        raise DomainError("uniform draws must lie in [0, 1)")
    return np.maximum(-np.log1p(-xi) / rates, BANDWIDTH_FLOOR)


def sample_bandwidths_grad(rates, xi):
    """Elementwise derivative of :func:`sample_bandwidths` w.r.t. the rates.

    Zero where the floor is active.
    """
    rates = as_rates(rates)
    xi = np.asarray(xi, dtype=np.float64)
    raw = -np.log1p(-xi) / rates
    return np.where(raw > BANDWIDTH_FLOOR, np.log1p(-xi) / rates**2, 0.0)


def kl_exponential(rates_q, rates_p):
    """KL(Exp(rates_q) || Exp(rates_p)) summed over independent components."""
    q = as_rates(rates_q)
    p = as_rates(rates_p)
    if q.shape != p.shape:
        raise DomainError(f"length mismatch {q.size} vs {p.size}")
    return float(np.sum(np.log(q / p) + p / q - 1.0))


def kl_exponential_grad(rates_q, rates_p):
    """Gradient of :func:`kl_exponential` w.r.t. ``rates_q``."""
    q = as_rates(rates_q)
    p = as_rates(rates_p)
    # 1/q - p/q^2, written so it is exactly zero at q = p.
    return (q - p) / q**2


def posterior_mean_bandwidth(rates):
    return 1.0 / as_rates(rates)


def write_kernel(path, k):
    """Write a kernel as text: a "P P" header then P rows of 17-digit values."""
    grid = np.asarray(getattr(k, "grid", k), dtype=np.float64)
    P = grid.shape[0]
    lines = [f"{P} {P}"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in grid]
    write_text_atomic(path, "\n".join(lines) + "\n")


def read_kernel(path):
    """Read a kernel grid written by :func:`write_kernel`."""
    rows = Path(path).read_text(encoding="utf-8").split("\n")
    header = rows[0].split()
    if len(header) != 2:
        raise ValueError(f"{path}: bad kernel header {rows[0]!r}")
    h, w = int(header[0]), int(header[1])
    data = [[float(v) for v in r.split()] for r in rows[1 : 1 + h]]
    grid = np.array(data, dtype=np.float64)
    if grid.shape != (h, w):
        raise ValueError(f"{path}: expected {h}x{w} values, got {grid.shape}")
    return grid
