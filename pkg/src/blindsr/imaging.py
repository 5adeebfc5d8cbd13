"""Image containers, degradation-pipeline operators and quality metrics.

Images are plain float64 numpy arrays, either ``(H, W)`` for a single
channel or ``(C, H, W)`` with ``C`` in {1, 3}. Every spatial operator acts
on the last two axes, so channels are processed independently.

All linear operators come in forward/adjoint pairs satisfying
``<A x, u> == <x, A^T u>`` to rounding error.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import signal

CIRCULAR = "circular"
REPLICATE = "replicate"
BOUNDARY_MODES = (CIRCULAR, REPLICATE)

PSNR_CAP_DB = 100.0
_KERNEL_SUM_TOL = 1e-9


class DimensionError(ValueError):
    """Raised when array shapes are inconsistent with an operator."""


def as_image(x, name="image"):
    """Validate and convert ``x`` to a float64 image array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] not in (1, 3):
            raise DimensionError(f"{name}: channels must be 1 or 3, got {arr.shape[0]}")
    elif arr.ndim != 2:
        raise DimensionError(f"{name}: expected (H, W) or (C, H, W), got shape {arr.shape}")
    if arr.shape[-1] < 1 or arr.shape[-2] < 1:
        raise DimensionError(f"{name}: empty spatial dimensions {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def kernel_grid(k):
    """Return the P x P grid of a kernel given as array or ``MixtureKernel``."""
    grid = np.asarray(getattr(k, "grid", k), dtype=np.float64)
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1] or grid.shape[0] % 2 == 0:
        raise DimensionError(f"kernel must be square with odd support, got {grid.shape}")
    if abs(grid.sum() - 1.0) > _KERNEL_SUM_TOL:
        raise ValueError(f"kernel is not normalized (sum = {grid.sum():.15g})")
    return grid


@lru_cache(maxsize=256)
def _pad_matrix(n, r, boundary):
    # One-hot (n + 2r) x n map from an axis to its padded version.
    idx = np.arange(-r, n + r)
    idx = idx % n if boundary == CIRCULAR else np.clip(idx, 0, n - 1)
    mat = np.zeros((n + 2 * r, n))
    mat[np.arange(n + 2 * r), idx] = 1.0
    return mat


def _check_boundary(boundary):
    if boundary not in BOUNDARY_MODES:
        raise ValueError(f"unknown boundary mode {boundary!r}; use one of {BOUNDARY_MODES}")


def _pad(x, r, boundary):
    rows = _pad_matrix(x.shape[-2], r, boundary)
    cols = _pad_matrix(x.shape[-1], r, boundary)
    return rows @ x @ cols.T


def _unpad(g, shape, r, boundary):
    """Adjoint of ``_pad``: fold padded values back onto their source pixels."""
    rows = _pad_matrix(shape[0], r, boundary)
    cols = _pad_matrix(shape[1], r, boundary)
    return rows.T @ g @ cols


def _conv_valid(xp, kernel, mode):
    if xp.ndim == 2:
        return signal.fftconvolve(xp, kernel, mode=mode)
    return np.stack([signal.fftconvolve(c, kernel, mode=mode) for c in xp])


def _check_kernel_fits(shape, P, boundary):
    if boundary == REPLICATE and (P > shape[-2] or P > shape[-1]):
        raise DimensionError(
            f"kernel support {P} exceeds image {shape[-2]}x{shape[-1]} with replicate boundary"
        )


def conv2d(x, k, boundary=REPLICATE):
    """'Same'-size 2-D convolution of each channel of ``x`` with kernel ``k``.

    The kernel centre sits at index ``(P // 2, P // 2)``. With the circular
    boundary this is exactly cyclic convolution.
    """
    _check_boundary(boundary)
    x = as_image(x)
    grid = kernel_grid(k)
    P = grid.shape[0]
    _check_kernel_fits(x.shape, P, boundary)
    if P == 1:
        return x * grid[0, 0]
    r = P // 2
    return _conv_valid(_pad(x, r, boundary), grid, "valid")


def conv2d_adjoint(u, k, boundary=REPLICATE):
    """Adjoint of :func:`conv2d`: correlation with ``k`` plus boundary folding."""
    _check_boundary(boundary)
    u = as_image(u)
    grid = kernel_grid(k)
    P = grid.shape[0]
    _check_kernel_fits(u.shape, P, boundary)
    if P == 1:
        return u * grid[0, 0]
    r = P // 2
    flipped = grid[::-1, ::-1]
    full = _conv_valid(u, flipped, "full")
    return _unpad(full, u.shape[-2:], r, boundary)


def _check_scale(s):
    if int(s) != s or s < 1:
        raise ValueError(f"scale factor must be an integer >= 1, got {s}")
    return int(s)


def downsample(z, s):
    """Keep every ``s``-th pixel starting at the top-left corner."""
    s = _check_scale(s)
    z = as_image(z)
    h, w = z.shape[-2:]
    if h % s or w % s:
        raise DimensionError(f"image {h}x{w} not divisible by scale {s}")
    return z[..., ::s, ::s].copy()


def downsample_adjoint(u, s, shape=None):
    """Zero-filling upsampler, the adjoint of :func:`downsample`.

    ``shape`` is the fine ``(H, W)``; by default ``s`` times the input.
    """
    s = _check_scale(s)
    u = as_image(u)
    h, w = u.shape[-2:]
    if shape is None:
        shape = (h * s, w * s)
    if tuple(shape) != (h * s, w * s):
        raise DimensionError(f"coarse {h}x{w} inconsistent with fine {shape} at scale {s}")
    out = np.zeros(u.shape[:-2] + tuple(shape))
    out[..., ::s, ::s] = u
    return out


def _cubic_weight(t, a=-0.5):
    t = np.abs(t)
    return np.where(
        t <= 1,
        (a + 2) * t**3 - (a + 3) * t**2 + 1,
        np.where(t < 2, a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a, 0.0),
    )


@lru_cache(maxsize=64)
def _bicubic_matrix(n, s):
    # Output sample i sits at coarse coordinate i / s, aligned with the
    # top-left phase of ``downsample`` so that downsample(up(y)) == y.
    pos = np.arange(n * s) / s
    base = np.floor(pos).astype(int)
    mat = np.zeros((n * s, n))
    for offset in range(-1, 3):
        src = base + offset
        wgt = _cubic_weight(pos - src)
        np.add.at(mat, (np.arange(n * s), np.clip(src, 0, n - 1)), wgt)
    return mat


def upsample_bicubic(y, s):
    """Catmull-Rom (a = -0.5) bicubic upsampling by integer factor ``s``.

    Borders replicate; the result is clamped to [0, 1].
    """
    s = _check_scale(s)
    y = as_image(y)
    if s == 1:
        return y.copy()
    rows = _bicubic_matrix(y.shape[-2], s)
    cols = _bicubic_matrix(y.shape[-1], s)
    out = np.einsum("ih,...hw,jw->...ij", rows, y, cols)
    return np.clip(out, 0.0, 1.0)


def rgb_to_y(x):
    """BT.601 studio-range luma of an RGB image in [0, 1].

    Single-channel input is returned unchanged.
    """
    x = as_image(x)
    if x.ndim == 2 or x.shape[0] == 1:
        return x.copy()
    r, g, b = x
    return (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0


def _check_pair(a, b):
    a = as_image(a, "a")
    b = as_image(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _crop(a, border):
    if border <= 0:
        return a
    return a[..., border:-border, border:-border]


def psnr(a, b, crop_border=0):
    """Peak signal-to-noise ratio in dB for unit dynamic range, capped at 100."""
    a, b = _check_pair(a, b)
    a, b = _crop(a, crop_border), _crop(b, crop_border)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


@lru_cache(maxsize=8)
def _gaussian_window(size, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, crop_border=0):
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), unit data range.

    Images smaller than the window use the largest odd window that fits.
    """
    a, b = _check_pair(a, b)
    a, b = _crop(a, crop_border), _crop(b, crop_border)
    if a.ndim == 3:
        return float(np.mean([ssim(ca, cb) for ca, cb in zip(a, b)]))
    size = min(11, a.shape[0], a.shape[1])
    if size % 2 == 0:
        size -= 1
    win = _gaussian_window(size)
    c1, c2 = 0.01**2, 0.03**2

    def filt(img):
        return signal.correlate2d(img, win, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))
