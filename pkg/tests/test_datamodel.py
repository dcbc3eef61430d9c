import random

import numpy as np
import pytest

from udareid.camstyle import assemble_full_training_set
from udareid.datamodel import (
    MARKET1501,
    DatasetSummary,
    EmptyDataset,
    ImageRecord,
    MissingIdentity,
    SummaryMismatch,
    parse_manifest_line,
    read_manifest,
    remap_identities,
    save_dataset,
    summarize_and_validate,
)
from udareid.toydata import generate_toy_domains


def _rec(i, pid, cam, split="train"):
    return ImageRecord(f"im{i}", None, pid, cam, split)


def synthetic_manifest(summary: DatasetSummary):
    """Records whose counts reproduce ``summary`` exactly."""
    recs, i = [], 0
    for split, n_ids, n_img, base in (
        ("train", summary.ids_train, summary.images_train, 0),
        ("gallery", summary.ids_gallery, summary.images_gallery, 10_000),
        ("query", summary.ids_query, summary.images_query, 10_000),
    ):
        for k in range(n_img):
            recs.append(_rec(i, base + k % n_ids, k % summary.num_cameras, split))
            i += 1
    return recs


def test_market1501_manifest_counts():
    recs = synthetic_manifest(MARKET1501)
    s = summarize_and_validate(recs, MARKET1501)
    assert s == DatasetSummary(6, 751, 12936, 750, 19732, 750, 3368)


def test_singleton():
    s = summarize_and_validate([_rec(0, 0, 0)])
    assert s == DatasetSummary(1, 1, 1, 0, 0, 0, 0)


def test_toy_generator_counts():
    source, _ = generate_toy_domains(40, 30, 4, 3, (64, 32), seed=7)
    s = summarize_and_validate(source)
    # enumerate the generator's output independently
    ids = {r.identity for r in source}
    assert (s.ids_train, s.images_train) == (len(ids), len(source)) == (40, 480)


def test_mismatch_names_field():
    recs = synthetic_manifest(MARKET1501)[:-1]
    with pytest.raises(SummaryMismatch) as exc:
        summarize_and_validate(recs, MARKET1501)
    assert exc.value.field == "images_query"
    assert (exc.value.got, exc.value.want) == (3367, 3368)


def test_errors():
    with pytest.raises(EmptyDataset):
        summarize_and_validate([])
    with pytest.raises(MissingIdentity):
        summarize_and_validate([_rec(0, None, 0)])
    with pytest.raises(ValueError):
        ImageRecord("x", np.full((2, 2, 3), 1.5), 0, 0)
    with pytest.raises(ValueError):
        DatasetSummary(1, 1, 1, ids_gallery=1, ids_query=2)


def test_counting_is_permutation_invariant():
    recs = synthetic_manifest(DatasetSummary(3, 7, 40, 5, 30, 5, 9))
    base = summarize_and_validate(recs)
    shuffled = recs[:]
    random.Random(1).shuffle(shuffled)
    assert summarize_and_validate(shuffled) == base


def test_style_augmentation_keeps_identity_counts(small_domains):
    source, _ = small_domains
    merged = [r.replace(split="train") for r in source]
    before = summarize_and_validate(merged)
    after = summarize_and_validate(assemble_full_training_set(source))
    assert after.ids_train == before.ids_train
    assert after.images_train == before.num_cameras * before.images_train


def test_remap_is_dense():
    recs = [_rec(0, 17, 0), _rec(1, 5, 0), _rec(2, 17, 1)]
    out, mapping = remap_identities(recs)
    assert [r.identity for r in out] == [0, 1, 0]
    assert mapping == {17: 0, 5: 1}


def test_manifest_roundtrip(tmp_path, small_domains):
    source, _ = small_domains
    manifest = save_dataset(source, tmp_path / "src")
    back = read_manifest(manifest)
    assert [r.image_id for r in back] == [r.image_id for r in source]
    assert [(r.identity, r.camera_id, r.split) for r in back] == [(r.identity, r.camera_id, r.split) for r in source]
    # toy pixels are pre-quantised to 8 bits, so PNG storage is lossless
    for a, b in zip(back, source):
        np.testing.assert_array_equal(a.pixels, b.pixels)


def test_manifest_line_format():
    rec = parse_manifest_line("a1\timages/a1.png\t-\t3\tquery\t-\n")
    assert rec.identity is None and rec.camera_id == 3 and rec.split == "query"
    rec = parse_manifest_line("b\tb.png\t12\t0\ttrain\t2")
    assert rec.identity == 12 and rec.style_source_camera == 2
    with pytest.raises(ValueError):
        parse_manifest_line("too\tfew\tfields")
