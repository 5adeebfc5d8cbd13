"""Forward observation model, Gaussian likelihood and synthetic datasets.

The observation model is ``y = downsample(conv2d(x, k), s) + sigma_n * g``
with ``g`` standard normal; noise is added after decimation and never
clamped here.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import imaging
from .fileio import read_png, write_png, write_text_atomic
from .kernels import (
    DEFAULT_SUPPORT,
    MixtureKernel,
    as_rates,
    make_mixture_kernel,
    sample_bandwidths,
    write_kernel,
)

log = logging.getLogger(__name__)

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class DegradationConfig:
    scale: int = 2
    sigma_n: float = 0.01
    support: int = DEFAULT_SUPPORT
    boundary: str = imaging.REPLICATE
    seed: int = 0

    def __post_init__(self):
        if int(self.scale) != self.scale or self.scale < 1:
            raise ValueError(f"scale must be an integer >= 1, got {self.scale}")
        if not np.isfinite(self.sigma_n) or self.sigma_n < 0:
            raise ValueError(f"sigma_n must be >= 0, got {self.sigma_n}")
        if int(self.support) != self.support or self.support < 1 or self.support % 2 == 0:
            raise ValueError(f"support must be a positive odd integer, got {self.support}")
        if self.boundary not in imaging.BOUNDARY_MODES:
            raise ValueError(f"unknown boundary {self.boundary!r}")

    def with_(self, **changes):
        return replace(self, **changes)


def forward(x, k, cfg):
    """Noiseless observation ``downsample(conv2d(x, k), s)``."""
    return imaging.downsample(imaging.conv2d(x, k, cfg.boundary), cfg.scale)


def forward_adjoint(u, k, cfg, shape):
    return imaging.conv2d_adjoint(imaging.downsample_adjoint(u, cfg.scale, shape), k, cfg.boundary)


def degrade(x, k, cfg, rng):
    """Blur, decimate and add white Gaussian noise drawn from ``rng``."""
    y = forward(x, k, cfg)
    if cfg.sigma_n > 0:
        y = y + cfg.sigma_n * rng.standard_normal(y.shape)
    return y


def gaussian_loglik(y, mu, sigma_n):
    """Sum of independent N(mu_i, sigma_n^2) log-densities at ``y``."""
    if not sigma_n > 0:
        raise ValueError("sigma_n must be > 0 for a non-degenerate likelihood")
    r = np.asarray(y) - np.asarray(mu)
    n = r.size
    return float(-n * (_HALF_LOG_2PI + np.log(sigma_n)) - np.sum(r * r) / (2.0 * sigma_n**2))


def log_likelihood(y, x, b2, cfg):
    """log p(y | x, b^2) in nats for the mixture kernel built from ``b2``."""
    if not cfg.sigma_n > 0:
        raise ValueError("sigma_n must be > 0 for a non-degenerate likelihood")
    k = make_mixture_kernel(b2, cfg.support)
    return gaussian_loglik(y, forward(x, k, cfg), cfg.sigma_n)


def center_crop(x, s):
    """Crop the last two axes to the largest multiples of ``s``, centred."""
    h, w = x.shape[-2:]
    hh, ww = h - h % s, w - w % s
    if hh == 0 or ww == 0:
        raise imaging.DimensionError(f"image {h}x{w} smaller than scale {s}")
    t, l = (h - hh) // 2, (w - ww) // 2
    return x[..., t : t + hh, l : l + ww]


def make_anisotropic_kernel(var_major, var_minor, theta, P=DEFAULT_SUPPORT):
    """Rotated anisotropic Gaussian on integer offsets, sum-normalized."""
    r = (P - 1) // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    px, py = np.meshgrid(ax, ax, indexing="xy")
    c, s = np.cos(theta), np.sin(theta)
    u = c * px + s * py
    v = -s * px + c * py
    grid = np.exp(-0.5 * (u**2 / var_major + v**2 / var_minor))
    grid = grid / grid.sum()
    return MixtureKernel(grid=0.5 * (grid + grid[::-1, ::-1]))


def random_hr_image(rng, size=64, channels=1):
    """Procedural test image: smooth shading, random shapes and stripes.

    Values lie in [0.05, 0.95]; edges are softened by a light blur so the
    content resembles a downsampled photograph rather than a cartoon.
    """
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / size
    out = []
    for _ in range(channels):
        img = 0.5 + 0.2 * (rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy - 0.5)
        for _ in range(rng.integers(4, 8)):
            cx, cy = rng.uniform(0, 1, 2)
            rx, ry = rng.uniform(0.06, 0.3, 2)
            mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 < 1
            img = np.where(mask, rng.uniform(0.1, 0.9), img)
        for _ in range(rng.integers(1, 3)):
            x0, y0 = rng.uniform(0, 0.7, 2)
            wd, ht = rng.uniform(0.15, 0.35, 2)
            freq = rng.uniform(4, 10)
            ang = rng.uniform(0, np.pi)
            stripes = 0.5 + 0.3 * np.sin(2 * np.pi * freq * (np.cos(ang) * xx + np.sin(ang) * yy))
            mask = (xx > x0) & (xx < x0 + wd) & (yy > y0) & (yy < y0 + ht)
            img = np.where(mask, stripes, img)
        img = imaging.conv2d(img, make_mixture_kernel([0.36], 5), imaging.REPLICATE)
        out.append(np.clip(img, 0.05, 0.95))
    return out[0] if channels == 1 else np.stack(out)


@dataclass
class DatasetRecord:
    id: str
    lr_path: str
    hr_path: str | None = None
    kernel_path: str | None = None
    b2_true: list | None = None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


def write_manifest(path, records):
    text = "".join(r.to_json() + "\n" for r in records)
    write_text_atomic(path, text)


def read_manifest(path):
    """Parse a JSON-lines manifest; relative paths resolve against its folder."""
    path = Path(path)
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(DatasetRecord.from_json(line))
    return records


def resolve(manifest_path, rel):
    if rel is None:
        return None
    p = Path(rel)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def record_rng(seed, index):
    """Independent generator for record ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng([int(seed), int(index)])


def draw_record_bandwidths(prior, rng):
    prior = as_rates(prior)
    return sample_bandwidths(prior, rng.random(prior.size))


def synthesize_record(x, index, cfg, prior, anisotropic=False):
    """Draw a kernel for record ``index`` and degrade ``x``.

    Returns ``(cropped_hr, lr, kernel, b2)``; ``b2`` is None for the
    anisotropic stress-test mode.
    """
    rng = record_rng(cfg.seed, index)
    x = center_crop(imaging.as_image(x), cfg.scale)
    if anisotropic:
        var = np.sort(rng.uniform(0.3, 4.0, 2))[::-1]
        k = make_anisotropic_kernel(var[0], var[1], rng.uniform(0, np.pi), cfg.support)
        b2 = None
    else:
        b2 = draw_record_bandwidths(prior, rng)
        k = make_mixture_kernel(b2, cfg.support)
    y = degrade(x, k, cfg, rng)
    return x, y, k, b2


def synth_dataset(hr_images, cfg, prior, out_dir, anisotropic=False):
    """Degrade HR images and write ``lr/``, ``hr/``, ``kernels/`` plus a manifest.

    ``hr_images`` holds file paths or ``(id, array)`` pairs. Unreadable files
    are skipped with a warning. Returns the list of written records.
    """
    hr_images = list(hr_images)
    if not hr_images:
        raise ValueError("no HR images given")
    out_dir = Path(out_dir)
    records = []
    for index, item in enumerate(hr_images):
        if isinstance(item, (str, Path)):
            rid = Path(item).stem
            try:
                x = read_png(item)
            except (OSError, ValueError) as exc:
                log.warning("skipping unreadable image %s: %s", item, exc)
                continue
        else:
            rid, x = item
        hr, lr, k, b2 = synthesize_record(x, index, cfg, prior, anisotropic)
        rec = DatasetRecord(
            id=rid,
            lr_path=f"lr/{rid}.png",
            hr_path=f"hr/{rid}.png",
            kernel_path=f"kernels/{rid}.txt",
            b2_true=None if b2 is None else [float(v) for v in b2],
        )
        write_png(out_dir / rec.lr_path, lr)
        write_png(out_dir / rec.hr_path, hr)
        (out_dir / "kernels").mkdir(parents=True, exist_ok=True)
        write_kernel(out_dir / rec.kernel_path, k)
        records.append(rec)
    write_manifest(out_dir / "manifest.jsonl", records)
    return records
