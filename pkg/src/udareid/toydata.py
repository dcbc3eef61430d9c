"""Synthetic two-domain person data.

Each identity is a fixed figure (head, striped shirt, trousers, bag);
each camera applies its own colour response. Source and target cameras
come from different transform families, which is the domain gap.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import ImageRecord, save_dataset


@dataclass(frozen=True)
class Appearance:
    skin: np.ndarray
    shirt: np.ndarray
    shirt_alt: np.ndarray
    stripes: int
    pants: np.ndarray
    bag: np.ndarray
    bag_row: float
    shirt_len: float


def _appearance(rng: np.random.Generator) -> Appearance:
    return Appearance(
        skin=rng.uniform(0.45, 0.85, 3) * np.array([1.0, 0.8, 0.65]),
        shirt=rng.uniform(0.05, 0.95, 3),
        shirt_alt=rng.uniform(0.05, 0.95, 3),
        stripes=int(rng.integers(0, 5)),
        pants=rng.uniform(0.05, 0.9, 3),
        bag=rng.uniform(0.05, 0.95, 3),
        bag_row=float(rng.uniform(0.3, 0.6)),
        shirt_len=float(rng.uniform(0.5, 0.62)),
    )


def render_person(app: Appearance, size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Draw one view of a person with random background, pose shift, bag side and noise."""
    h, w = size
    img = np.empty((h, w, 3))
    img[:] = rng.uniform(0.1, 0.9, 3)
    img += rng.normal(0, 0.04, (h, w, 3))
    dy = int(rng.integers(-h // 32 - 1, h // 32 + 2))
    dx = int(rng.integers(-w // 16 - 1, w // 16 + 2))
    rows = np.arange(h)[:, None] - dy
    cols = np.arange(w)[None, :] - dx
    u = rows / h
    x = (cols - w / 2) / w
    head = (u >= 0.03) & (u < 0.16) & (np.abs(x) < 0.12)
    torso = (u >= 0.16) & (u < app.shirt_len) & (np.abs(x) < 0.25)
    legs = (u >= app.shirt_len) & (u < 0.97) & (np.abs(x) < 0.2) & ~((np.abs(x) < 0.03) & (u > 0.7))
    img[head] = app.skin
    if app.stripes:
        band = (np.floor((u - 0.16) / (app.shirt_len - 0.16) * (2 * app.stripes)) % 2).astype(bool)
        img[torso & band] = app.shirt_alt
        img[torso & ~band] = app.shirt
    else:
        img[torso] = app.shirt
    img[legs] = app.pants
    side = 1 if rng.random() < 0.5 else -1
    bag = (np.abs(u - app.bag_row) < 0.08) & (np.abs(x - side * 0.3) < 0.08)
    img[bag] = app.bag
    img += rng.normal(0, 0.02, (h, w, 3))
    return np.clip(img, 0, 1)


def camera_response(domain: str, cam: int, seed: int):
    """Camera colour transform.

    Every camera has its own gain/offset; target cameras additionally share
    a hue rotation, gamma and contrast change (the domain shift).
    """
    rng = np.random.default_rng([seed, 0 if domain == "source" else 1, cam])
    gain = rng.uniform(0.75, 1.25, 3)
    offset = rng.uniform(-0.08, 0.08, 3)
    if domain == "source":
        return lambda im: np.clip(im * gain + offset, 0, 1)
    shared = np.random.default_rng([seed, 1])
    angle = shared.uniform(0.5, 0.8)
    gamma = shared.uniform(1.3, 1.6)
    contrast = shared.uniform(0.65, 0.8)
    c, s = np.cos(angle), np.sin(angle)
    k = 1 / 3
    # rotation about the grey axis
    axis = np.full((3, 3), k)
    cross = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]]) * np.sqrt(k)
    mix = c * np.eye(3) + (1 - c) * axis + s * cross

    def apply(im):
        out = np.clip(im @ mix.T, 0, 1) ** gamma
        out = 0.5 + contrast * (out - 0.5)
        return np.clip(out * gain + offset, 0, 1)

    return apply


def _quantize(im: np.ndarray) -> np.ndarray:
    return (np.rint(im * 255.0) / 255.0).astype(np.float32)


def generate_domain(domain: str, identities, cams: int, images_per_id_cam: int, size, seed: int,
                    split_test: bool = True) -> list[ImageRecord]:
    """Records for ``identities``.

    With ``split_test`` the first half (rounded up) forms the train split and
    the rest is divided into query / gallery; otherwise everything is train.
    """
    identities = list(identities)
    responses = [camera_response(domain, c, seed) for c in range(cams)]
    n_train = (len(identities) + 1) // 2 if split_test else len(identities)
    records = []
    for rank, pid in enumerate(identities):
        app = _appearance(np.random.default_rng([seed, 7, pid]))
        for cam in range(cams):
            for k in range(images_per_id_cam):
                rng = np.random.default_rng([seed, 11, pid, cam, k])
                pixels = _quantize(responses[cam](render_person(app, size, rng)))
                if rank < n_train:
                    split = "train"
                elif images_per_id_cam > 1:
                    split = "query" if k == 0 else "gallery"
                else:
                    split = "query" if cam == 0 else "gallery"
                records.append(ImageRecord(f"{domain[0]}{pid:04d}_c{cam}_{k}", pixels, pid, cam, split))
    return records


def generate_toy_domains(num_ids_source: int = 40, num_ids_target: int = 30, cams: int = 4,
                         images_per_id_cam: int = 3, size=(64, 32), seed: int = 7):
    """Source and target records with disjoint identity pools.

    The source is fully labelled training data; the target is split into
    train / query / gallery.
    """
    if min(num_ids_source, num_ids_target, cams, images_per_id_cam) < 1:
        raise ValueError("all counts must be >= 1")
    source = generate_domain("source", range(num_ids_source), cams, images_per_id_cam, size, seed,
                             split_test=False)
    target_ids = range(num_ids_source, num_ids_source + num_ids_target)
    target = generate_domain("target", target_ids, cams, images_per_id_cam, size, seed)
    return source, target


def make_toy_data(num_ids_source: int = 40, num_ids_target: int = 30, cams: int = 4, images_per_id_cam: int = 3,
                  size=(64, 32), seed: int = 7, out_dir="toy_data") -> tuple[Path, Path]:
    source, target = generate_toy_domains(num_ids_source, num_ids_target, cams, images_per_id_cam, size, seed)
    out = Path(out_dir)
    return save_dataset(source, out / "source"), save_dataset(target, out / "target")
