"""Owned 8-bit RGB image buffers plus the exact pixel math shared by the
synthetic generator and the augmentation pipeline.

All float->byte write-backs round half-up so results are bit-reproducible
across platforms; resampling is plain bilinear implemented here rather than
delegated to an image library so the identity and constant-image contracts
hold exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from PIL import Image as PILImage

from .errors import IoFailure, ShapeMismatch

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def round_half_up(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero-point-five upward."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def to_u8(x: np.ndarray) -> np.ndarray:
    """Clamp to [0, 255] and round half-up into uint8."""
    return round_half_up(np.clip(x, 0.0, 255.0)).astype(np.uint8)


@dataclass
class Image:
    """H x W x 3 8-bit pixel buffer with an optional per-pixel alpha mask."""

    pixels: np.ndarray
    alpha: Optional[np.ndarray] = None

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeMismatch(f"pixels must be HxWx3, got {self.pixels.shape}")
        if self.alpha is not None:
            self.alpha = np.ascontiguousarray(self.alpha, dtype=np.uint8)
            if self.alpha.shape != self.pixels.shape[:2]:
                raise ShapeMismatch(
                    f"alpha shape {self.alpha.shape} != image plane {self.pixels.shape[:2]}"
                )

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def solid(cls, width: int, height: int, color: Tuple[int, int, int]) -> "Image":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[:, :] = np.asarray(color, dtype=np.uint8)
        return cls(px)

    def copy(self) -> "Image":
        return Image(self.pixels.copy(), None if self.alpha is None else self.alpha.copy())

    def luminance(self) -> np.ndarray:
        """Float64 luminance plane, 0.299 R + 0.587 G + 0.114 B."""
        r, g, b = LUMA_WEIGHTS
        p = self.pixels.astype(np.float64)
        return r * p[:, :, 0] + g * p[:, :, 1] + b * p[:, :, 2]


def load_png(path) -> Image:
    try:
        with PILImage.open(path) as im:
            if im.mode == "RGBA":
                arr = np.asarray(im)
                return Image(arr[:, :, :3].copy(), arr[:, :, 3].copy())
            arr = np.asarray(im.convert("RGB"))
            return Image(arr.copy())
    except OSError as exc:
        raise IoFailure(f"cannot read image {path}: {exc}") from exc


def save_png(img: Image, path) -> None:
    if img.alpha is not None:
        rgba = np.dstack([img.pixels, img.alpha])
        PILImage.fromarray(rgba, mode="RGBA").save(path, format="PNG")
    else:
        PILImage.fromarray(img.pixels, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# resampling


def _bilinear_gather(plane: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample float plane (H, W, C) at fractional coords, zero outside."""
    h, w = plane.shape[:2]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]

    def tap(yy, xx):
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        vals = plane[yc, xc]
        return vals * inside[..., None]

    top = tap(y0, x0) * (1 - fx) + tap(y0, x0 + 1) * fx
    bot = tap(y0 + 1, x0) * (1 - fx) + tap(y0 + 1, x0 + 1) * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a float (H, W, C) array using half-pixel centers.

    When out size equals in size the sample points land exactly on the
    source pixels, so the resize is an exact identity.
    """
    h, w = plane.shape[:2]
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    # Clamp instead of zero-padding: edge samples replicate the border pixel.
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    grid_y = np.repeat(ys[:, None], out_w, axis=1)
    grid_x = np.repeat(xs[None, :], out_h, axis=0)
    return _bilinear_gather(plane, grid_y, grid_x)


def rotate_rgba(pixels: np.ndarray, alpha: np.ndarray, degrees: float) -> Tuple[np.ndarray, np.ndarray]:
    """Rotate an RGBA cutout about its center, expanding to the rotated bbox.

    Color is resampled premultiplied by alpha so transparent surround never
    bleeds dark fringes into the edge pixels. Returns float64 (rgb, alpha).
    """
    h, w = alpha.shape
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    out_w = int(math.ceil(abs(w * c) + abs(h * s) - 1e-9))
    out_h = int(math.ceil(abs(w * s) + abs(h * c) - 1e-9))
    out_w = max(out_w, 1)
    out_h = max(out_h, 1)

    a = alpha.astype(np.float64) / 255.0
    premul = pixels.astype(np.float64) * a[:, :, None]

    cy_in, cx_in = (h - 1) / 2.0, (w - 1) / 2.0
    cy_out, cx_out = (out_h - 1) / 2.0, (out_w - 1) / 2.0
    yo, xo = np.meshgrid(
        np.arange(out_h, dtype=np.float64) - cy_out,
        np.arange(out_w, dtype=np.float64) - cx_out,
        indexing="ij",
    )
    # Inverse map: rotate output coords by -theta back into the source frame.
    xs = c * xo + s * yo + cx_in
    ys = -s * xo + c * yo + cy_in

    premul_s = _bilinear_gather(premul, ys, xs)
    alpha_s = _bilinear_gather(a[:, :, None], ys, xs)[:, :, 0]
    rgb = np.zeros_like(premul_s)
    mask = alpha_s > 1e-12
    rgb[mask] = premul_s[mask] / alpha_s[mask, None]
    return rgb, alpha_s * 255.0


def alpha_blend(canvas: np.ndarray, rgb: np.ndarray, alpha: np.ndarray, x: int, y: int) -> None:
    """Blend a float RGBA patch onto a uint8 canvas in place at (x, y).

    Fully opaque source pixels replace the background exactly; fully
    transparent ones leave it untouched.
    """
    h, w = alpha.shape
    region = canvas[y : y + h, x : x + w].astype(np.float64)
    a = (alpha / 255.0)[:, :, None]
    blended = a * rgb + (1.0 - a) * region
    canvas[y : y + h, x : x + w] = to_u8(blended)


# ---------------------------------------------------------------------------
# color space


def rgb_to_hsv(rgb: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized RGB (float 0..255) -> hue degrees [0,360), sat [0,1], val 0..255."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = np.max(rgb, axis=-1)
    mn = np.min(rgb, axis=-1)
    delta = v - mn
    safe = np.where(delta == 0, 1.0, delta)
    h = np.select(
        [delta == 0, v == r, v == g],
        [0.0, ((g - b) / safe) % 6.0, (b - r) / safe + 2.0],
        default=(r - g) / safe + 4.0,
    )
    s = np.where(v == 0, 0.0, delta / np.where(v == 0, 1.0, v))
    return (h * 60.0) % 360.0, s, v


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Inverse of rgb_to_hsv; returns float 0..255 with trailing channel axis."""
    h = np.asarray(h, dtype=np.float64) % 360.0
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    c = v * s
    hp = h / 60.0
    x = c * (1.0 - np.abs(hp % 2.0 - 1.0))
    z = np.zeros_like(c)
    sext = np.floor(hp).astype(np.int64) % 6
    r = np.choose(sext, [c, x, z, z, x, c])
    g = np.choose(sext, [x, c, c, x, z, z])
    b = np.choose(sext, [z, z, x, c, c, x])
    m = v - c
    return np.stack([r + m, g + m, b + m], axis=-1)
