"""Camera-style transfer: CycleGAN loss bookkeeping and source-set assembly.

Generator training is not done here. :func:`builtin_style_fn` provides a
deterministic per-camera-pair colour transform that stands in for the
trained translators so the full training set can be assembled.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .datamodel import ImageRecord, MissingIdentity

Image = np.ndarray
Translator = Callable[[Image, int, int], Image]


class EmptyBatch(ValueError):
    pass


class DiscriminatorRange(ValueError):
    pass


class UnknownCamera(ValueError):
    pass


@dataclass
class TranslatorHandle:
    forward: Callable[[Image], Image]
    backward: Callable[[Image], Image]
    pair: tuple[int, int]


@dataclass(frozen=True)
class GanLossReport:
    loss_gan_G: float
    loss_gan_F: float
    loss_cycle: float
    loss_identity: float
    loss_cyclegan_total: float
    loss_total: float
    lambda_cyc: float
    # discriminator-side objectives, reported for completeness
    loss_D_Y: float = 0.0
    loss_D_X: float = 0.0


def count_style_models(num_cameras: int) -> int:
    """Number of directed translators needed for ``num_cameras`` cameras."""
    if num_cameras < 1:
        raise ValueError("need at least one camera")
    return num_cameras * (num_cameras - 1)


def _l1(a: Image, b: Image) -> float:
    return float(np.mean(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def _disc(D, images) -> np.ndarray:
    out = np.array([float(D(im)) for im in images], dtype=np.float64)
    if np.any(out <= 0.0) or np.any(out >= 1.0):
        raise DiscriminatorRange("discriminator outputs must lie strictly inside (0, 1)")
    return out


def cyclegan_losses(
    G: Callable[[Image], Image],
    F: Callable[[Image], Image],
    D_X: Callable[[Image], float],
    D_Y: Callable[[Image], float],
    batch_x: Sequence[Image],
    batch_y: Sequence[Image],
    lambda_cyc: float = 10.0,
) -> GanLossReport:
    """Evaluate the CycleGAN objective plus the identity-mapping term.

    Adversarial terms use the least-squares form; L1 terms are per-image
    pixel means averaged over the batch. Values only, no updates.
    """
    if len(batch_x) == 0 or len(batch_y) == 0:
        raise EmptyBatch("both batches must be non-empty")
    if lambda_cyc < 0:
        raise ValueError("lambda_cyc must be >= 0")

    fake_y = [G(x) for x in batch_x]
    fake_x = [F(y) for y in batch_y]
    d_fake_y = _disc(D_Y, fake_y)
    d_fake_x = _disc(D_X, fake_x)
    d_real_y = _disc(D_Y, batch_y)
    d_real_x = _disc(D_X, batch_x)

    loss_gan_G = float(np.mean((d_fake_y - 1.0) ** 2))
    loss_gan_F = float(np.mean((d_fake_x - 1.0) ** 2))
    loss_D_Y = float(np.mean((d_real_y - 1.0) ** 2) + np.mean(d_fake_y**2))
    loss_D_X = float(np.mean((d_real_x - 1.0) ** 2) + np.mean(d_fake_x**2))

    cyc_x = np.mean([_l1(F(gx), x) for gx, x in zip(fake_y, batch_x)])
    cyc_y = np.mean([_l1(G(fy), y) for fy, y in zip(fake_x, batch_y)])
    loss_cycle = float(cyc_x + cyc_y)

    idt_y = np.mean([_l1(G(y), y) for y in batch_y])
    idt_x = np.mean([_l1(F(x), x) for x in batch_x])
    loss_identity = float(idt_y + idt_x)

    cg_total = loss_gan_G + loss_gan_F + lambda_cyc * loss_cycle
    return GanLossReport(
        loss_gan_G=loss_gan_G,
        loss_gan_F=loss_gan_F,
        loss_cycle=loss_cycle,
        loss_identity=loss_identity,
        loss_cyclegan_total=cg_total,
        loss_total=cg_total + loss_identity,
        lambda_cyc=lambda_cyc,
        loss_D_Y=loss_D_Y,
        loss_D_X=loss_D_X,
    )


def style_params(cam_src: int, cam_dst: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (gain, offset) for a camera pair, derived from a hash of the pair."""
    digest = hashlib.sha256(f"camstyle:{cam_src}->{cam_dst}".encode()).digest()
    u = np.frombuffer(digest[:6], dtype=np.uint8).astype(np.float64) / 255.0
    gains = 0.8 + 0.4 * u[:3]
    offsets = -0.08 + 0.16 * u[3:]
    return gains.astype(np.float32), offsets.astype(np.float32)


def color_transform(gains, offsets) -> Callable[[Image], Image]:
    gains = np.asarray(gains, dtype=np.float32)
    offsets = np.asarray(offsets, dtype=np.float32)

    def apply(image: Image) -> Image:
        return np.clip(image * gains + offsets, 0.0, 1.0).astype(np.float32)

    return apply


def builtin_style_fn(cam_src: int, cam_dst: int) -> Callable[[Image], Image]:
    if cam_src < 0 or cam_dst < 0:
        raise UnknownCamera(f"invalid camera pair ({cam_src}, {cam_dst})")
    if cam_src == cam_dst:
        return lambda image: np.array(image, copy=True)
    return color_transform(*style_params(cam_src, cam_dst))


def builtin_translator(image: Image, cam_src: int, cam_dst: int) -> Image:
    return builtin_style_fn(cam_src, cam_dst)(image)


def builtin_handle(cam_a: int, cam_b: int) -> TranslatorHandle:
    return TranslatorHandle(builtin_style_fn(cam_a, cam_b), builtin_style_fn(cam_b, cam_a), (cam_a, cam_b))


def assemble_full_training_set(
    source: Iterable[ImageRecord],
    translator: Translator = builtin_translator,
    cameras: Optional[Sequence[int]] = None,
) -> list[ImageRecord]:
    """Merge all real source images into one train split and add styled copies.

    Every real image from camera ``c`` gets one copy per other camera,
    keeping its identity and recording ``c`` as ``style_source_camera``.
    """
    source = list(source)
    if cameras is None:
        cameras = sorted({r.camera_id for r in source})
    cam_set = set(cameras)
    out: list[ImageRecord] = []
    styled: list[ImageRecord] = []
    for rec in source:
        if rec.identity is None:
            raise MissingIdentity(rec.image_id)
        if rec.camera_id not in cam_set:
            raise UnknownCamera(f"{rec.image_id!r} uses camera {rec.camera_id}")
        out.append(rec.replace(split="train"))
        for dst in cameras:
            if dst == rec.camera_id:
                continue
            pixels = None if rec.pixels is None else translator(rec.pixels, rec.camera_id, dst)
            styled.append(
                rec.replace(
                    image_id=f"{rec.image_id}_fake_c{rec.camera_id}toc{dst}",
                    pixels=pixels,
                    camera_id=dst,
                    split="train",
                    style_source_camera=rec.camera_id,
                    path=None,
                )
            )
    return out + styled
