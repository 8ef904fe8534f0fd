"""Geometric and photometric augmentation, mirroring, and square padding.

Every geometric transform is applied identically to the image (bilinear)
and the label map (nearest neighbor, so labels stay integral). Image
values are clamped back to [0, 1] after photometric changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import affine_transform, gaussian_filter

from .errors import ConfigError
from .synth import Sample


@dataclass(frozen=True)
class AugmentConfig:
    p_affine: float = 0.5
    p_noise: float = 0.5
    p_blur: float = 0.5
    p_gamma: float = 0.5
    max_rotate_deg: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_shift_frac: float = 0.05
    noise_sigma_max: float = 0.05
    blur_sigma_max: float = 1.5
    gamma_range: tuple[float, float] = (0.7, 1.4)


NO_AUGMENT = AugmentConfig(p_affine=0.0, p_noise=0.0, p_blur=0.0, p_gamma=0.0)


def affine_sample(s: Sample, angle_deg: float, scale: float,
                  shift: tuple[float, float]) -> Sample:
    """Rotate/scale about the center and translate, one shared transform.

    `shift` is (rows, columns) in pixels. Out-of-frame regions become
    black image / class-0 labels.
    """
    h, w = s.labels.shape
    theta = math.radians(angle_deg)
    # output -> input mapping: inverse of scale-and-rotate about the center
    inv = np.array([[math.cos(theta), -math.sin(theta)],
                    [math.sin(theta), math.cos(theta)]]) / scale
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - inv @ (center + np.asarray(shift))
    image = affine_transform(s.image[0], inv, offset=offset, order=1,
                             mode="constant", cval=0.0)
    labels = affine_transform(s.labels, inv, offset=offset, order=0,
                              mode="constant", cval=0)
    return s.copy_with(image=np.clip(image, 0.0, 1.0)[None], labels=labels,
                       provenance=s.provenance + "+affine")


def augment(s: Sample, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> Sample:
    """Each transform fires independently with its configured probability."""
    out = s
    if rng.random() < cfg.p_affine:
        angle = rng.uniform(-cfg.max_rotate_deg, cfg.max_rotate_deg)
        scale = rng.uniform(*cfg.scale_range)
        shift = (rng.uniform(-cfg.max_shift_frac, cfg.max_shift_frac) * s.labels.shape[0],
                 rng.uniform(-cfg.max_shift_frac, cfg.max_shift_frac) * s.labels.shape[1])
        out = affine_sample(out, angle, scale, shift)

    image = out.image[0]
    tags = []
    if rng.random() < cfg.p_noise:
        sigma = rng.uniform(0.0, cfg.noise_sigma_max)
        image = image + rng.normal(0.0, sigma, size=image.shape)
        tags.append("noise")
    if rng.random() < cfg.p_blur:
        image = gaussian_filter(image, rng.uniform(0.2, cfg.blur_sigma_max))
        tags.append("blur")
    if rng.random() < cfg.p_gamma:
        gamma = rng.uniform(*cfg.gamma_range)
        image = np.clip(image, 0.0, 1.0) ** gamma
        tags.append("gamma")
    if tags or out is not s:
        provenance = out.provenance + ("+" + "+".join(tags) if tags else "")
        out = out.copy_with(image=np.clip(image, 0.0, 1.0)[None], provenance=provenance)
    return out


def flip_horizontal(s: Sample) -> Sample:
    """Mirror about the vertical axis (the anatomy is bilaterally symmetric)."""
    return s.copy_with(
        image=np.ascontiguousarray(s.image[:, :, ::-1]),
        labels=np.ascontiguousarray(s.labels[:, ::-1]),
        provenance=s.provenance + "+flip",
    )


def flip_double(samples: list[Sample]) -> list[Sample]:
    """The dataset plus a mirrored copy of every sample."""
    return list(samples) + [flip_horizontal(s) for s in samples]


def pad_to_square(arr: np.ndarray, target: int, fill=0) -> tuple[np.ndarray, tuple[int, int]]:
    """Center `arr` in a target x target canvas of `fill`; returns the
    padded array and the (row, column) offset for un-padding."""
    h, w = arr.shape
    if target < max(h, w):
        raise ConfigError(f"target {target} smaller than input {h}x{w}")
    out = np.full((target, target), fill, dtype=arr.dtype)
    r0 = (target - h) // 2
    c0 = (target - w) // 2
    out[r0:r0 + h, c0:c0 + w] = arr
    return out, (r0, c0)


def unpad(arr: np.ndarray, offset: tuple[int, int], shape: tuple[int, int]) -> np.ndarray:
    r0, c0 = offset
    h, w = shape
    return arr[r0:r0 + h, c0:c0 + w].copy()


def pad_sample(s: Sample, target: int) -> tuple[Sample, tuple[int, int]]:
    image, offset = pad_to_square(s.image[0], target, fill=0.0)
    labels, _ = pad_to_square(s.labels, target, fill=0)
    return s.copy_with(image=image[None], labels=labels,
                       provenance=s.provenance + "+pad"), offset
