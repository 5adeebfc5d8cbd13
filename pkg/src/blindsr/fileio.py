"""8-bit PNG I/O and atomic file writes."""

from __future__ import annotations

import os
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from PIL import Image


@contextmanager
def atomic_path(path):
    """Yield a temporary sibling path that replaces ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=path.suffix)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_text_atomic(path, text):
    with atomic_path(path) as tmp:
        tmp.write_text(text, encoding="utf-8")


def read_png(path):
    """Read a PNG as float64 in [0, 1]: ``(H, W)`` gray or ``(3, H, W)`` RGB."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 3:
        arr = np.moveaxis(arr, -1, 0)
    return arr


def to_uint8(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[0] == 1:
        x = x[0]
    q = np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    if q.ndim == 3:
        q = np.moveaxis(q, 0, -1)
    return q


def write_png(path, x):
    """Clamp to [0, 1], quantize to 8 bits and write atomically."""
    im = Image.fromarray(to_uint8(x))
    with atomic_path(path) as tmp:
        im.save(tmp, format="PNG")
