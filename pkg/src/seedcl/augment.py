"""Stochastic two-view augmentation pipeline: crop-resize, horizontal flip,
color jitter, grayscale conversion.

Transforms compute per channel in float64 and round half-up on write-back.
Each operation is a pure function of (inputs, rng state), so a fixed stream
reproduces views bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .errors import ConfigError
from .image import Image, LUMA_WEIGHTS, hsv_to_rgb, resize_bilinear, rgb_to_hsv, round_half_up, to_u8


@dataclass
class JitterStrengths:
    brightness: float = 0.8  # factor drawn from [1-s, 1+s]
    contrast: float = 0.8
    saturation: float = 0.8
    hue: float = 36.0  # max shift in degrees

    def validate(self):
        for name in ("brightness", "contrast", "saturation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"jitter strength {name}={v} outside [0, 1]")
        if not 0.0 <= self.hue <= 180.0:
            raise ConfigError(f"hue strength {self.hue} outside [0, 180] degrees")


@dataclass
class AugmentationPolicy:
    crop_scale_range: Tuple[float, float] = (0.2, 1.0)
    flip_probability: float = 0.5
    jitter: JitterStrengths = field(default_factory=JitterStrengths)
    grayscale_probability: float = 0.2
    output_size: int = 32

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"crop_scale_range must satisfy 0 < min <= max <= 1, got {self.crop_scale_range}")
        for name in ("flip_probability", "grayscale_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name}={p} outside [0, 1]")
        if self.output_size <= 0:
            raise ConfigError("output_size must be positive")
        self.jitter.validate()

    def to_dict(self) -> dict:
        return {
            "crop_scale_range": list(self.crop_scale_range),
            "flip_probability": self.flip_probability,
            "jitter": {
                "brightness": self.jitter.brightness,
                "contrast": self.jitter.contrast,
                "saturation": self.jitter.saturation,
                "hue": self.jitter.hue,
            },
            "grayscale_probability": self.grayscale_probability,
            "output_size": self.output_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        d = dict(d)
        jitter = JitterStrengths(**d.pop("jitter", {}))
        if "crop_scale_range" in d:
            d["crop_scale_range"] = tuple(d["crop_scale_range"])
        return cls(jitter=jitter, **d)


@dataclass
class ViewPair:
    view_a: Image
    view_b: Image
    source_index: int = 0


def random_crop_resize(
    img: Image, scale_range: Tuple[float, float], rng: np.random.Generator, output_size: int
) -> Image:
    """Crop a random sub-rectangle with area fraction in scale_range and
    bilinearly resize it to output_size squared."""
    h, w = img.height, img.width
    frac = float(rng.uniform(scale_range[0], scale_range[1]))
    side = np.sqrt(frac)
    cw = max(1, int(round_half_up(w * side)))
    ch = max(1, int(round_half_up(h * side)))
    x0 = int(rng.integers(0, w - cw + 1))
    y0 = int(rng.integers(0, h - ch + 1))
    crop = img.pixels[y0 : y0 + ch, x0 : x0 + cw].astype(np.float64)
    out = resize_bilinear(crop, output_size, output_size)
    return Image(to_u8(out))


def horizontal_flip(img: Image, probability: float, rng: np.random.Generator) -> Image:
    """Reverse columns with the given probability, otherwise pass through."""
    if rng.random() < probability:
        alpha = None if img.alpha is None else img.alpha[:, ::-1].copy()
        return Image(img.pixels[:, ::-1].copy(), alpha)
    return img.copy()


def _apply_brightness(px: np.ndarray, factor: float) -> np.ndarray:
    return px * factor


def _apply_contrast(px: np.ndarray, factor: float) -> np.ndarray:
    r, g, b = LUMA_WEIGHTS
    mean = (r * px[:, :, 0] + g * px[:, :, 1] + b * px[:, :, 2]).mean()
    return mean + (px - mean) * factor


def _apply_saturation(px: np.ndarray, factor: float) -> np.ndarray:
    r, g, b = LUMA_WEIGHTS
    lum = (r * px[:, :, 0] + g * px[:, :, 1] + b * px[:, :, 2])[:, :, None]
    return lum + (px - lum) * factor


def _apply_hue(px: np.ndarray, shift_degrees: float) -> np.ndarray:
    h, s, v = rgb_to_hsv(px)
    return hsv_to_rgb(h + shift_degrees, s, v)


def color_jitter(img: Image, strengths: JitterStrengths, rng: np.random.Generator) -> Image:
    """Jitter brightness/contrast/saturation by uniform factors and hue by a
    uniform shift, applied in a random order; zero-strength ops are exact
    pass-throughs."""
    factors = {
        "brightness": float(rng.uniform(1.0 - strengths.brightness, 1.0 + strengths.brightness)),
        "contrast": float(rng.uniform(1.0 - strengths.contrast, 1.0 + strengths.contrast)),
        "saturation": float(rng.uniform(1.0 - strengths.saturation, 1.0 + strengths.saturation)),
        "hue": float(rng.uniform(-strengths.hue, strengths.hue)),
    }
    order = rng.permutation(4)
    names = ("brightness", "contrast", "saturation", "hue")
    ops = {
        "brightness": _apply_brightness,
        "contrast": _apply_contrast,
        "saturation": _apply_saturation,
        "hue": _apply_hue,
    }
    px = img.pixels.astype(np.float64)
    for k in order:
        name = names[k]
        f = factors[name]
        if (name == "hue" and f == 0.0) or (name != "hue" and f == 1.0):
            continue
        px = np.clip(ops[name](px, f), 0.0, 255.0)
    return Image(to_u8(px))


def to_grayscale(img: Image, probability: float, rng: np.random.Generator) -> Image:
    """Replace pixels by replicated luminance with the given probability."""
    if rng.random() < probability:
        lum = to_u8(img.luminance())
        return Image(np.repeat(lum[:, :, None], 3, axis=2))
    return img.copy()


def augment_once(img: Image, policy: AugmentationPolicy, rng: np.random.Generator) -> Image:
    """One full pipeline draw: crop-resize -> flip -> jitter -> grayscale."""
    out = random_crop_resize(img, policy.crop_scale_range, rng, policy.output_size)
    out = horizontal_flip(out, policy.flip_probability, rng)
    out = color_jitter(out, policy.jitter, rng)
    out = to_grayscale(out, policy.grayscale_probability, rng)
    return out


def make_views(img: Image, policy: AugmentationPolicy, rng: np.random.Generator, source_index: int = 0) -> ViewPair:
    """Two independent pipeline draws over the same source image."""
    return ViewPair(
        view_a=augment_once(img, policy, rng),
        view_b=augment_once(img, policy, rng),
        source_index=source_index,
    )
