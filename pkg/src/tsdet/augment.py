"""Weak and strong augmentation pipelines.

Weak augmentation is a random horizontal flip.  Strong augmentation runs the
weak pipeline and then photometric ops (grayscale, color jitter, Gaussian
blur, cutout) that never move boxes.  Every application records a recipe
that re-applies bit-identically, which is also how the pipelines themselves
are executed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from .geometry import Box

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class AugmentConfig:
    flip_p: float = 0.5
    grayscale_p: float = 0.2
    jitter_p: float = 0.8
    jitter_lo: float = 0.6
    jitter_hi: float = 1.4
    blur_p: float = 0.5
    blur_sigma_lo: float = 0.1
    blur_sigma_hi: float = 2.0
    cutout_p: float = 0.7
    cutout_min: int = 1
    cutout_max: int = 3
    cutout_area_lo: float = 0.02
    cutout_area_hi: float = 0.10
    cutout_fill: Tuple[float, float, float] = (0.5, 0.5, 0.5)

    def validate(self) -> None:
        for key in ("flip_p", "grayscale_p", "jitter_p", "blur_p", "cutout_p"):
            v = getattr(self, key)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"augment.{key} must be in [0,1], got {v}")
        if self.jitter_lo <= 0 or self.jitter_lo > self.jitter_hi:
            raise ValueError("augment jitter range must satisfy 0 < lo <= hi")
        if self.blur_sigma_lo <= 0 or self.blur_sigma_lo > self.blur_sigma_hi:
            raise ValueError("augment blur sigma range must satisfy 0 < lo <= hi")
        if not (1 <= self.cutout_min <= self.cutout_max):
            raise ValueError("augment cutout count must satisfy 1 <= min <= max")


@dataclass
class AugmentedScene:
    image: np.ndarray
    annotations: list   # (Box, class_id), moved consistently with geometric ops
    recipe: list        # JSON-serializable ordered transform list


def _hflip(image, annotations):
    w = image.shape[1]
    out = np.ascontiguousarray(image[:, ::-1, :])
    anns = [(Box(w - b.x2, b.y1, w - b.x1, b.y2), c) for b, c in annotations]
    return out, anns


def _grayscale(image):
    lum = image @ _LUMA
    return np.clip(np.repeat(lum[:, :, None], 3, axis=2), 0.0, 1.0).astype(np.float32)


def _color_jitter(image, brightness, contrast, saturation):
    img = image * np.float32(brightness)
    mean = np.float32((img @ _LUMA).mean())
    img = (img - mean) * np.float32(contrast) + mean
    lum = (img @ _LUMA)[:, :, None]
    img = lum + (img - lum) * np.float32(saturation)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _gaussian_blur(image, sigma):
    out = ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0.0), mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _cutout(image, rects, fill):
    out = image.copy()
    color = np.asarray(fill, dtype=np.float32)
    for x1, y1, x2, y2 in rects:
        out[y1:y2, x1:x2] = color
    return out


def apply_recipe(image: np.ndarray, annotations: Sequence, recipe: Sequence[dict]) -> AugmentedScene:
    """Deterministically re-apply a recorded augmentation recipe."""
    img = image
    anns = list(annotations)
    for step in recipe:
        op = step["op"]
        if op == "hflip":
            img, anns = _hflip(img, anns)
        elif op == "grayscale":
            img = _grayscale(img)
        elif op == "color_jitter":
            img = _color_jitter(img, step["brightness"], step["contrast"], step["saturation"])
        elif op == "gaussian_blur":
            img = _gaussian_blur(img, step["sigma"])
        elif op == "cutout":
            img = _cutout(img, step["rects"], step["fill"])
        else:
            raise ValueError(f"unknown augmentation op {op!r}")
    return AugmentedScene(image=img, annotations=anns, recipe=list(recipe))


def weak_augment(image: np.ndarray, annotations: Sequence, rng: np.random.Generator,
                 config: AugmentConfig | None = None) -> AugmentedScene:
    """Horizontal flip with probability flip_p; nothing else."""
    config = config or AugmentConfig()
    recipe = []
    if rng.random() < config.flip_p:
        recipe.append({"op": "hflip"})
    return apply_recipe(image, annotations, recipe)


def strong_augment(image: np.ndarray, annotations: Sequence, rng: np.random.Generator,
                   config: AugmentConfig | None = None) -> AugmentedScene:
    """Weak pipeline followed by independently sampled photometric ops."""
    config = config or AugmentConfig()
    h, w = image.shape[:2]
    recipe = []
    if rng.random() < config.flip_p:
        recipe.append({"op": "hflip"})
    if rng.random() < config.grayscale_p:
        recipe.append({"op": "grayscale"})
    if rng.random() < config.jitter_p:
        b, c, s = rng.uniform(config.jitter_lo, config.jitter_hi, size=3)
        recipe.append({"op": "color_jitter", "brightness": float(b),
                       "contrast": float(c), "saturation": float(s)})
    if rng.random() < config.blur_p:
        recipe.append({"op": "gaussian_blur",
                       "sigma": float(rng.uniform(config.blur_sigma_lo, config.blur_sigma_hi))})
    if rng.random() < config.cutout_p:
        count = int(rng.integers(config.cutout_min, config.cutout_max + 1))
        rects = []
        for _ in range(count):
            frac = rng.uniform(config.cutout_area_lo, config.cutout_area_hi)
            aspect = rng.uniform(0.5, 2.0)
            rw = math.sqrt(frac * w * h * aspect)
            rh = frac * w * h / rw
            rw = max(1, min(int(round(rw)), w))
            rh = max(1, min(int(round(rh)), h))
            x1 = int(rng.integers(0, w - rw + 1))
            y1 = int(rng.integers(0, h - rh + 1))
            rects.append([x1, y1, x1 + rw, y1 + rh])
        recipe.append({"op": "cutout", "rects": rects, "fill": list(config.cutout_fill)})
    return apply_recipe(image, annotations, recipe)
