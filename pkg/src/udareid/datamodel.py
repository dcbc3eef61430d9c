"""Image records, dataset manifests and split bookkeeping."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

SPLITS = ("train", "gallery", "query")


class DatasetError(ValueError):
    pass


class EmptyDataset(DatasetError):
    pass


class MissingIdentity(DatasetError):
    def __init__(self, image_id: str):
        super().__init__(f"record {image_id!r} has no identity")
        self.image_id = image_id


class SummaryMismatch(DatasetError):
    def __init__(self, field_name: str, got: int, want: int):
        super().__init__(f"{field_name}: got {got}, want {want}")
        self.field = field_name
        self.got = got
        self.want = want


@dataclass
class ImageRecord:
    image_id: str
    pixels: Optional[np.ndarray]
    identity: Optional[int]
    camera_id: int
    split: str = "train"
    style_source_camera: Optional[int] = None
    is_flipped: bool = False
    path: Optional[str] = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")
        if self.camera_id < 0:
            raise DatasetError(f"negative camera id for {self.image_id!r}")
        if self.identity is not None and self.identity < 0:
            raise DatasetError(f"negative identity for {self.image_id!r}")
        if self.pixels is not None:
            px = self.pixels
            if px.ndim != 3:
                raise DatasetError(f"pixels of {self.image_id!r} must be HxWxC")
            if px.size and (px.min() < 0.0 or px.max() > 1.0):
                raise DatasetError(f"pixels of {self.image_id!r} outside [0, 1]")

    def replace(self, **changes) -> "ImageRecord":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class DatasetSummary:
    num_cameras: int
    ids_train: int
    images_train: int
    ids_gallery: int = 0
    images_gallery: int = 0
    ids_query: int = 0
    images_query: int = 0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise DatasetError(f"{f.name} must be >= 0")
        if self.ids_query > self.ids_gallery:
            raise DatasetError("ids_query exceeds ids_gallery")


# Published statistics of the public benchmarks, used to validate manifests.
MARKET1501 = DatasetSummary(6, 751, 12936, 750, 19732, 750, 3368)
CUHK03 = DatasetSummary(2, 767, 7365, 700, 5332, 700, 1400)
MSMT17 = DatasetSummary(15, 1401, 32621, 3060, 82161, 3060, 11659)
BENCHMARKS = {"market1501": MARKET1501, "cuhk03": CUHK03, "msmt17": MSMT17}


def summarize_and_validate(
    records: Iterable[ImageRecord], expected: Optional[DatasetSummary] = None
) -> DatasetSummary:
    """Count cameras, identities and images per split.

    Raises ``SummaryMismatch`` on the first field that differs from
    ``expected``.
    """
    records = list(records)
    if not records:
        raise EmptyDataset("no records")
    cameras = set()
    ids = {s: set() for s in SPLITS}
    images = {s: 0 for s in SPLITS}
    for rec in records:
        if rec.split == "train" and rec.identity is None:
            raise MissingIdentity(rec.image_id)
        cameras.add(rec.camera_id)
        images[rec.split] += 1
        if rec.identity is not None:
            ids[rec.split].add(rec.identity)
    summary = DatasetSummary(
        num_cameras=len(cameras),
        ids_train=len(ids["train"]),
        images_train=images["train"],
        ids_gallery=len(ids["gallery"]),
        images_gallery=images["gallery"],
        ids_query=len(ids["query"]),
        images_query=images["query"],
    )
    if expected is not None:
        for f in dataclasses.fields(DatasetSummary):
            got, want = getattr(summary, f.name), getattr(expected, f.name)
            if got != want:
                raise SummaryMismatch(f.name, got, want)
    return summary


def select(records: Iterable[ImageRecord], split: str) -> list[ImageRecord]:
    return [r for r in records if r.split == split]


def remap_identities(records: Sequence[ImageRecord]) -> tuple[list[ImageRecord], dict[int, int]]:
    """Relabel identities to dense ``0..M-1`` in order of first appearance."""
    mapping: dict[int, int] = {}
    out = []
    for rec in records:
        if rec.identity is None:
            out.append(rec)
            continue
        new = mapping.setdefault(rec.identity, len(mapping))
        out.append(rec.replace(identity=new))
    return out, mapping


# ---------------------------------------------------------------------------
# manifest I/O
#   image_id <TAB> relative_path <TAB> identity|- <TAB> camera_id <TAB> split <TAB> style_source_camera|-


def _opt_int(text: str) -> Optional[int]:
    return None if text == "-" else int(text)


def _fmt_opt(value: Optional[int]) -> str:
    return "-" if value is None else str(value)


def format_manifest_line(rec: ImageRecord) -> str:
    path = rec.path if rec.path is not None else f"{rec.image_id}.png"
    return "\t".join(
        [
            rec.image_id,
            path,
            _fmt_opt(rec.identity),
            str(rec.camera_id),
            rec.split,
            _fmt_opt(rec.style_source_camera),
        ]
    )


def parse_manifest_line(line: str) -> ImageRecord:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 6:
        raise DatasetError(f"manifest line needs 6 tab-separated fields: {line!r}")
    image_id, path, identity, camera, split, style = parts
    return ImageRecord(
        image_id=image_id,
        pixels=None,
        identity=_opt_int(identity),
        camera_id=int(camera),
        split=split,
        style_source_camera=_opt_int(style),
        path=path,
    )


def write_manifest(records: Iterable[ImageRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(format_manifest_line(rec) + "\n")


def read_manifest(path: str | Path, load_pixels: bool = True) -> list[ImageRecord]:
    """Parse a manifest; image paths are resolved relative to its directory."""
    path = Path(path)
    records = []
    with open(path) as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            rec = parse_manifest_line(line)
            if load_pixels:
                rec.pixels = load_image(path.parent / rec.path)
            records.append(rec)
    return records


def load_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def save_dataset(records: Sequence[ImageRecord], root: str | Path, name: str = "manifest.tsv") -> Path:
    """Write every record's pixels under ``root/images`` plus a manifest."""
    root = Path(root)
    out = []
    for rec in records:
        rel = f"images/{rec.image_id}.png"
        save_image(rec.pixels, root / rel)
        out.append(rec.replace(path=rel))
    manifest = root / name
    write_manifest(out, manifest)
    return manifest
