"""Generator determinism, label conventions, dataset layout and I/O errors."""

import json
import os
from collections import deque

import numpy as np
import pytest

from vicl import datagen
from vicl.config import ConfigError
from vicl.datagen import (CLASS_TAGS, DatasetIOError, gen_colorization_set,
                          gen_detection_set, gen_segmentation_set,
                          load_dataset, luminance, save_dataset, to_grayscale)


def _all_samples(ds):
    return ds.train_queries + ds.prompt_db + ds.test_queries


def _datasets_equal(a, b):
    for sa, sb in zip(_all_samples(a), _all_samples(b)):
        if sa.id != sb.id or sa.class_tag != sb.class_tag:
            return False
        if not (np.array_equal(sa.image, sb.image) and np.array_equal(sa.label, sb.label)):
            return False
    return True


def _connected(mask):
    """BFS flood fill from the first FG pixel (4-neighborhood oracle)."""
    coords = np.argwhere(mask)
    if len(coords) == 0:
        return True
    seen = np.zeros_like(mask, dtype=bool)
    q = deque([tuple(coords[0])])
    seen[tuple(coords[0])] = True
    while q:
        r, c = q.popleft()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < mask.shape[0] and 0 <= cc < mask.shape[1]:
                if mask[rr, cc] and not seen[rr, cc]:
                    seen[rr, cc] = True
                    q.append((rr, cc))
    return seen.sum() == mask.sum()


class TestSegmentation:
    def test_regeneration_is_identical(self):
        a = gen_segmentation_set(7, 4, 24, 32)
        b = gen_segmentation_set(7, 4, 24, 32)
        assert _datasets_equal(a, b)

    def test_foreground_fraction_in_bounds(self):
        ds = gen_segmentation_set(3, 16, 24, 32)
        for s in _all_samples(ds):
            frac = s.label[:, :, 0].mean()
            assert 0.04 <= frac <= 0.60, s.id

    def test_labels_two_valued(self):
        ds = gen_segmentation_set(5, 8, 24, 32)
        for s in _all_samples(ds):
            values = np.unique(s.label)
            assert set(values.tolist()) <= {0.0, 1.0}
            # all three channels agree pixelwise
            assert np.array_equal(s.label[:, :, 0], s.label[:, :, 1])
            assert np.array_equal(s.label[:, :, 0], s.label[:, :, 2])

    def test_class_balance_in_prompt_db(self):
        ds = gen_segmentation_set(11, 4, 100, 32)
        counts = np.array([sum(1 for s in ds.prompt_db if s.class_tag == t)
                           for t in CLASS_TAGS])
        assert np.all(np.abs(counts - counts.mean()) < 2)

    def test_seed_splitting_prefix_stable(self):
        small = gen_segmentation_set(9, 4, 24, 32)
        large = gen_segmentation_set(9, 10, 24, 32)
        for sa, sb in zip(small.train_queries, large.train_queries[:4]):
            assert np.array_equal(sa.image, sb.image)
            assert np.array_equal(sa.label, sb.label)

    def test_rect_and_ellipse_masks_connected(self):
        ds = gen_segmentation_set(2, 24, 24, 32)
        for s in _all_samples(ds):
            kind = s.class_tag.split("-")[0]
            if kind in ("rect", "ellipse"):
                assert _connected(s.label[:, :, 0] > 0.5), s.id

    def test_counts_validated(self):
        with pytest.raises(ConfigError):
            gen_segmentation_set(1, 4, 6, 32)   # cannot cover 12 classes
        with pytest.raises(ConfigError):
            gen_segmentation_set(1, 0, 24, 32)
        with pytest.raises(ConfigError):
            gen_segmentation_set(1, 4, 24, 8)   # side too small


class TestDetection:
    def test_box_is_solid_rectangle(self):
        ds = gen_detection_set(7, 8, 24, 32)
        for s in _all_samples(ds):
            mask = s.label[:, :, 0] > 0.5
            rows = np.flatnonzero(mask.any(axis=1))
            cols = np.flatnonzero(mask.any(axis=0))
            # contiguous projections and a filled interior
            assert np.array_equal(rows, np.arange(rows[0], rows[-1] + 1))
            assert np.array_equal(cols, np.arange(cols[0], cols[-1] + 1))
            assert mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1].all()

    def test_box_contains_segmentation_mask(self):
        seg = gen_segmentation_set(7, 8, 24, 32)
        det = gen_detection_set(7, 8, 24, 32)
        for ss, sd in zip(_all_samples(seg), _all_samples(det)):
            assert np.all(sd.label >= ss.label)

    def test_deterministic(self):
        assert _datasets_equal(gen_detection_set(4, 4, 24, 32),
                               gen_detection_set(4, 4, 24, 32))


class TestColorization:
    def test_channels_pairwise_equal(self):
        ds = gen_colorization_set(7, 6, 24, 32)
        for s in _all_samples(ds):
            assert np.array_equal(s.image[:, :, 0], s.image[:, :, 1])
            assert np.array_equal(s.image[:, :, 1], s.image[:, :, 2])

    def test_image_is_label_luminance(self):
        ds = gen_colorization_set(7, 6, 24, 32)
        for s in _all_samples(ds):
            np.testing.assert_allclose(s.image[:, :, 0], to_grayscale(s.label), atol=1e-6)

    def test_deterministic(self):
        assert _datasets_equal(gen_colorization_set(13, 4, 24, 32),
                               gen_colorization_set(13, 4, 24, 32))


class TestDiskLayout:
    def test_round_trip_equal_and_bytewise(self, tmp_path):
        ds = gen_segmentation_set(7, 4, 24, 32)
        d1 = tmp_path / "a"
        d2 = tmp_path / "b"
        save_dataset(ds, str(d1))
        loaded = load_dataset(str(d1))
        assert _datasets_equal(ds, loaded)
        save_dataset(loaded, str(d2))
        for root, _dirs, files in os.walk(d1):
            rel = os.path.relpath(root, d1)
            for name in files:
                b1 = open(os.path.join(root, name), "rb").read()
                b2 = open(os.path.join(d2, rel, name), "rb").read()
                assert b1 == b2, name

    def test_manifest_contents(self, tmp_path):
        ds = gen_colorization_set(1, 3, 24, 32, n_test=2)
        save_dataset(ds, str(tmp_path))
        records = [json.loads(l) for l in open(tmp_path / "manifest.jsonl")]
        assert len(records) == 3 + 24 + 2
        splits = {r["split"] for r in records}
        assert splits == {"query_train", "prompt", "query_test"}
        assert all(r["class"] in CLASS_TAGS for r in records)

    def test_ppm_header_exact(self, tmp_path):
        ds = gen_segmentation_set(1, 1, 24, 32, n_test=1)
        save_dataset(ds, str(tmp_path))
        blob = open(tmp_path / "images" / f"{ds.train_queries[0].id}.ppm", "rb").read()
        assert blob.startswith(b"P6\n32 32\n255\n")
        assert len(blob) == len(b"P6\n32 32\n255\n") + 32 * 32 * 3

    def test_truncated_image_names_file(self, tmp_path):
        ds = gen_segmentation_set(1, 1, 24, 32, n_test=1)
        save_dataset(ds, str(tmp_path))
        victim = tmp_path / "images" / f"{ds.prompt_db[0].id}.ppm"
        blob = victim.read_bytes()
        victim.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(DatasetIOError) as exc:
            load_dataset(str(tmp_path))
        assert str(victim) in str(exc.value)

    def test_missing_file_named_in_error(self, tmp_path):
        ds = gen_segmentation_set(1, 1, 24, 32, n_test=1)
        save_dataset(ds, str(tmp_path))
        victim = tmp_path / "labels" / f"{ds.test_queries[0].id}.ppm"
        os.remove(victim)
        with pytest.raises(DatasetIOError) as exc:
            load_dataset(str(tmp_path))
        assert str(victim) in str(exc.value)

    def test_malformed_manifest(self, tmp_path):
        ds = gen_segmentation_set(1, 1, 24, 32, n_test=1)
        save_dataset(ds, str(tmp_path))
        with open(tmp_path / "manifest.jsonl", "a") as fh:
            fh.write("{not json\n")
        with pytest.raises(DatasetIOError):
            load_dataset(str(tmp_path))


def test_luminance_weights():
    white = np.ones((2, 2, 3))
    np.testing.assert_allclose(luminance(white), 1.0, atol=1e-9)
    red = np.zeros((1, 1, 3))
    red[..., 0] = 1.0
    np.testing.assert_allclose(luminance(red), 0.299)
