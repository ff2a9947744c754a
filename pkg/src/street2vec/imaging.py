"""Low-level image helpers: PNG i/o, box resampling, HSV conversion.

All in-memory images are numpy arrays. Files on disk are 8-bit RGB PNGs;
in-memory working images are floats in [0, 1].
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image


def load_image(path) -> np.ndarray:
    """Read an image file as an (H, W, 3) uint8 RGB array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_image(path, image: np.ndarray, compress_level: int = 6) -> None:
    """Write an (H, W, 3) array as RGB PNG.

    Float inputs are treated as [0, 1] and quantized with round-half-even;
    uint8 inputs are written as-is. Output bytes are deterministic for a
    given input and compress level.
    """
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    Image.fromarray(arr).save(os.fspath(path), format="PNG", compress_level=compress_level)


def to_unit_float(image: np.ndarray) -> np.ndarray:
    """uint8 image -> float64 in [0, 1] (exact multiples of 1/255)."""
    return image.astype(np.float64) / 255.0


def _box_axis(arr: np.ndarray, out_n: int) -> np.ndarray:
    """Box-average axis 0 of ``arr`` from n to out_n samples.

    Uses exact fractional prefix sums, so the overall mean is conserved up
    to float rounding for any n/out_n ratio.
    """
    n = arr.shape[0]
    if out_n == n:
        return arr
    flat = arr.reshape(n, -1)
    prefix = np.empty((n + 1, flat.shape[1]), dtype=np.float64)
    prefix[0] = 0.0
    np.cumsum(flat, axis=0, out=prefix[1:])
    edges = np.linspace(0.0, float(n), out_n + 1)
    lo = np.minimum(np.floor(edges).astype(np.int64), n)
    frac = np.where(lo >= n, 0.0, edges - lo)
    at = prefix[lo]
    nz = frac > 0
    if nz.any():
        at[nz] += flat[lo[nz]] * frac[nz, None]
    scale = n / out_n
    out = (at[1:] - at[:-1]) / scale
    return out.reshape((out_n,) + arr.shape[1:])


def area_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-average (box) resample to (out_h, out_w); returns float64.

    Deterministic and alias-resistant; a constant image resizes to the same
    constant and the pixel mean is conserved.
    """
    if image.ndim not in (2, 3):
        raise ValueError(f"expected 2-D or 3-D image, got shape {image.shape}")
    work = np.asarray(image, dtype=np.float64)
    work = _box_axis(work, out_h)
    work = np.moveaxis(_box_axis(np.moveaxis(work, 1, 0), out_w), 0, 1)
    return work


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB -> HSV on [..., 3] float arrays, all channels in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.max(rgb, axis=-1)
    minc = np.min(rgb, axis=-1)
    v = maxc
    c = maxc - minc
    safe_max = np.where(maxc == 0.0, 1.0, maxc)
    s = np.where(maxc == 0.0, 0.0, c / safe_max)
    safe_c = np.where(c == 0.0, 1.0, c)
    rc = (maxc - r) / safe_c
    gc = (maxc - g) / safe_c
    bc = (maxc - b) / safe_c
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(c == 0.0, 0.0, (h / 6.0) % 1.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Vectorized HSV -> RGB inverse of :func:`rgb_to_hsv`.

    Gray pixels (s == 0) pass through bit-identically.
    """
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)
