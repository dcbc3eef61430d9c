"""Image preprocessing for the pre-training, fine-tuning and evaluation stages.

All functions operate on ``H x W x 3`` float arrays with values in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)
STAGES = ("pretrain", "finetune", "eval")


class BadShape(ValueError):
    pass


@dataclass
class AugmentationPolicy:
    target_size: tuple[int, int] = (256, 128)
    pad: int = 10
    flip_prob: float = 0.5
    color_dropout_prob: float = 0.4
    erase_prob: float = 0.5
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    stage: str = "pretrain"
    # patch geometry shared by grayscale dropout and random erasing
    area_range: tuple[float, float] = (0.02, 0.4)
    aspect_range: tuple[float, float] = (0.3, 3.3)

    def __post_init__(self):
        self.target_size = tuple(int(v) for v in self.target_size)
        self.mean = tuple(float(v) for v in self.mean)
        self.std = tuple(float(v) for v in self.std)
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        for name in ("flip_prob", "color_dropout_prob", "erase_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if any(s <= 0 for s in self.std):
            raise ValueError("std components must be positive")
        if self.pad < 0:
            raise ValueError("pad must be >= 0")

    @classmethod
    def toy(cls, stage: str = "pretrain", **kw) -> "AugmentationPolicy":
        kw.setdefault("target_size", (64, 32))
        kw.setdefault("pad", 4)
        return cls(stage=stage, **kw)


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] < 3:
        raise BadShape(f"expected HxWx3 image, got shape {image.shape}")
    return image[:, :, :3]


def resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize (half-pixel centres, no antialiasing)."""
    image = _check_image(image)
    h, w = size
    if image.shape[:2] == (h, w):
        return np.array(image, dtype=np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy().clip(0.0, 1.0)


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, ::-1])


def to_grayscale(image: np.ndarray) -> np.ndarray:
    gray = image[..., :3] @ LUMA
    return np.repeat(gray[..., None], 3, axis=-1).astype(image.dtype)


def _sample_patch(h: int, w: int, policy: AugmentationPolicy, rng: np.random.Generator):
    """Return (top, left, ph, pw) of a random rectangle, or None after 10 misses."""
    area = h * w
    lo, hi = policy.area_range
    log_lo, log_hi = math.log(policy.aspect_range[0]), math.log(policy.aspect_range[1])
    for _ in range(10):
        target = rng.uniform(lo, hi) * area
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        ph = int(round(math.sqrt(target * aspect)))
        pw = int(round(math.sqrt(target / aspect)))
        if 0 < ph <= h and 0 < pw <= w:
            top = int(rng.integers(0, h - ph + 1))
            left = int(rng.integers(0, w - pw + 1))
            return top, left, ph, pw
    return None


def grayscale_patch(image: np.ndarray, rng: np.random.Generator, policy: AugmentationPolicy) -> np.ndarray:
    out = image.copy()
    patch = _sample_patch(*image.shape[:2], policy, rng)
    if patch is not None:
        t, l, ph, pw = patch
        out[t : t + ph, l : l + pw] = to_grayscale(out[t : t + ph, l : l + pw])
    return out


def random_erase(image: np.ndarray, rng: np.random.Generator, policy: AugmentationPolicy) -> np.ndarray:
    out = image.copy()
    patch = _sample_patch(*image.shape[:2], policy, rng)
    if patch is not None:
        t, l, ph, pw = patch
        out[t : t + ph, l : l + pw] = rng.random((ph, pw, 3), dtype=np.float32)
    return out


def augment(image, policy: AugmentationPolicy, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Resize, then (outside eval) pad / crop / flip / grayscale-patch / erase.

    ``image`` may be an :class:`ImageRecord` or a raw array.
    """
    pixels = getattr(image, "pixels", image)
    pixels = resize(pixels, policy.target_size)
    if policy.stage == "eval":
        return pixels
    if rng is None:
        raise ValueError("stochastic stages need an rng")
    h, w = policy.target_size
    if policy.pad:
        p = policy.pad
        padded = np.pad(pixels, ((p, p), (p, p), (0, 0)), mode="edge")
        top = int(rng.integers(0, 2 * p + 1))
        left = int(rng.integers(0, 2 * p + 1))
        pixels = padded[top : top + h, left : left + w]
    if rng.random() < policy.flip_prob:
        pixels = hflip(pixels)
    if rng.random() < policy.color_dropout_prob:
        pixels = grayscale_patch(pixels, rng, policy)
    if policy.stage == "finetune" and rng.random() < policy.erase_prob:
        pixels = random_erase(pixels, rng, policy)
    return np.ascontiguousarray(pixels, dtype=np.float32)


def normalize(image: np.ndarray, policy: AugmentationPolicy) -> np.ndarray:
    mean = np.asarray(policy.mean, dtype=image.dtype)
    std = np.asarray(policy.std, dtype=image.dtype)
    return (image - mean) / std


def denormalize(image: np.ndarray, policy: AugmentationPolicy) -> np.ndarray:
    mean = np.asarray(policy.mean, dtype=image.dtype)
    std = np.asarray(policy.std, dtype=image.dtype)
    return image * std + mean


def to_batch(images, policy: AugmentationPolicy) -> torch.Tensor:
    """Stack normalized ``H x W x 3`` arrays into an ``N x 3 x H x W`` float tensor."""
    arr = np.stack([normalize(np.asarray(im, dtype=np.float32), policy) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
