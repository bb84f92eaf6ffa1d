"""Phantom generation, on-disk format, preprocessing, augmentation and batching."""
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condenseunet.data import (DatasetError, SegmentationSample, apply_transform, assign_folds, augment,
                               batch_iterator, extract_patch, generate_phantom_dataset, generate_phantoms,
                               load_dataset, lv_center, normalize_slice, read_image, read_labels,
                               split_sizes, tree_digest, write_image, write_labels)
from condenseunet.losses import LV, MYO, RV


@pytest.fixture(scope="module")
def phantoms():
    return generate_phantoms(20, 42, image_size=128, n_slices=3)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom")
    return generate_phantom_dataset(8, 5, out, image_size=64, n_slices=2)


class TestPhantoms:
    def test_needs_five_cases(self):
        with pytest.raises(DatasetError, match="at least 5"):
            generate_phantoms(4, 0)

    def test_all_classes_in_mid_slices(self, phantoms):
        for s in phantoms:
            if s.slice_index == 1:
                assert set(np.unique(s.labels)) == {0, 1, 2, 3}, (s.case_id, s.phase)

    def test_es_cavity_smaller(self, phantoms):
        by_key = {(s.case_id, s.phase, s.slice_index): s for s in phantoms}
        for (case, phase, k), s in by_key.items():
            if phase == "ED":
                es = by_key[(case, "ES", k)]
                assert (es.labels == LV).sum() < (s.labels == LV).sum()
                assert (es.labels == RV).sum() < (s.labels == RV).sum()

    def test_lv_contained_in_patch(self, phantoms):
        for s in phantoms:
            patch = extract_patch(s, lv_center(s.labels), 128)
            assert (patch.labels == LV).sum() == (s.labels == LV).sum()

    def test_structures_fit_small_image_centre_patch(self):
        for s in generate_phantoms(20, 0, image_size=64, n_slices=3):
            patch = extract_patch(s, None, 64)
            for c in (RV, MYO, LV):
                assert (patch.labels == c).sum() == (s.labels == c).sum()

    def test_bit_reproducible(self, tmp_path):
        a = generate_phantom_dataset(6, 42, tmp_path / "a", image_size=32, n_slices=2)
        b = generate_phantom_dataset(6, 42, tmp_path / "b", image_size=32, n_slices=2)
        assert tree_digest(a.parent) == tree_digest(b.parent)
        c = generate_phantom_dataset(6, 43, tmp_path / "c", image_size=32, n_slices=2)
        assert tree_digest(a.parent) != tree_digest(c.parent)


class TestFolds:
    def test_split_arithmetic(self):
        assert split_sizes(20) == (14, 3, 3)
        assert split_sizes(100) == (70, 15, 15)

    def test_disjoint_and_complete(self):
        ids = [f"case{i:03d}" for i in range(20)]
        folds = assign_folds(ids, 0)
        tests = [set(f["test"]) for f in folds]
        for f in folds:
            parts = [set(f[k]) for k in ("train", "val", "test")]
            assert set().union(*parts) == set(ids)
            assert sum(len(p) for p in parts) == 20
        assert all(not (tests[i] & tests[j]) for i in range(5) for j in range(i + 1, 5))

    def test_too_few_cases(self):
        with pytest.raises(DatasetError):
            assign_folds(["a", "b"], 0)


class TestFormat:
    def test_round_trip(self, phantoms, tmp_path):
        s = phantoms[0]
        scale = write_image(tmp_path / "x.img.png", s.image)
        write_labels(tmp_path / "x.lbl.png", s.labels)
        np.testing.assert_array_equal(read_image(tmp_path / "x.img.png", scale), s.image)
        np.testing.assert_array_equal(read_labels(tmp_path / "x.lbl.png"), s.labels)

    def test_loaded_dataset_matches_generator(self, dataset_dir):
        ds = load_dataset(dataset_dir)
        original = generate_phantoms(8, 5, image_size=64, n_slices=2)
        assert len(ds.samples) == len(original) == 32
        for a, b in zip(ds.samples, original):
            assert (a.case_id, a.phase, a.slice_index) == (b.case_id, b.phase, b.slice_index)
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.labels, b.labels)
            assert a.spacing == b.spacing and a.thickness == b.thickness

    def test_split_sizes_from_manifest(self, dataset_dir):
        ds = load_dataset(dataset_dir)
        cases = {s.case_id for s in ds.split("test", 0)}
        assert len(cases) == 1 and len(ds.split("test", 0)) == 4
        with pytest.raises(DatasetError, match="fold 9"):
            ds.split("train", 9)

    def test_corrupted_label_names_file_and_value(self, tmp_path):
        lab = np.zeros((4, 4), dtype=np.uint8)
        lab[1, 2] = 7
        path = tmp_path / "case001_ED_slice00.lbl.png"
        write_labels(path, lab)
        with pytest.raises(DatasetError, match=r"case001_ED_slice00\.lbl\.png.*value 7"):
            read_labels(path)

    def test_missing_file(self, dataset_dir, tmp_path):
        manifest = json.loads(dataset_dir.read_text())
        manifest["cases"][0]["slices"][0]["image"] = "nope.img.png"
        bad = tmp_path / "manifest.json"
        bad.write_text(json.dumps(manifest))
        with pytest.raises(DatasetError, match="missing image file"):
            load_dataset(bad)

    def test_overlapping_folds_rejected(self, dataset_dir, tmp_path):
        manifest = json.loads(dataset_dir.read_text())
        manifest["folds"][0]["val"].append(manifest["folds"][0]["train"][0])
        bad = tmp_path / "manifest.json"
        bad.write_text(json.dumps(manifest))
        with pytest.raises(DatasetError, match="overlap"):
            load_dataset(bad)

    def test_negative_intensity_rejected(self, tmp_path):
        with pytest.raises(DatasetError):
            write_image(tmp_path / "x.png", -np.ones((2, 2)))


class TestPreprocessing:
    def test_constant_slice(self):
        assert np.all(normalize_slice(np.full((5, 5), 3.0)) == 0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_normalize_stats_and_idempotence(self, seed):
        img = np.random.default_rng(seed).gamma(2.0, 3.0, (16, 16))
        out = normalize_slice(img)
        assert abs(out.mean()) < 1e-10 and abs(out.std() - 1) < 1e-10
        np.testing.assert_allclose(normalize_slice(out), out, atol=1e-10)

    def test_central_crop(self):
        img = np.arange(256 * 256, dtype=float).reshape(256, 256)
        s = SegmentationSample(img, np.zeros((256, 256), np.uint8))
        np.testing.assert_array_equal(extract_patch(s, (128, 128), 128).image, img[64:192, 64:192])

    def test_corner_crop_pads(self):
        img = np.ones((256, 256))
        s = SegmentationSample(img, np.full((256, 256), 2, np.uint8))
        p = extract_patch(s, (0, 0), 128)
        assert np.all(p.image[:64, :64] == 0) and np.all(p.labels[:64, :64] == 0)
        assert np.all(p.image[64:, 64:] == 1)


class TestAugment:
    def test_identity(self, phantoms):
        s = phantoms[3]
        out = apply_transform(s, 1.0, (0.0, 0.0), 0.0, 0.0)
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_array_equal(out.labels, s.labels)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_label_set_and_shape(self, seed):
        s = generate_phantoms(5, 1, image_size=64, n_slices=1)[seed % 10]
        out = augment(s, np.random.default_rng(seed))
        assert out.image.shape == s.image.shape
        assert set(np.unique(out.labels)) <= {0, 1, 2, 3}

    @pytest.mark.parametrize("zoom", [0.8, 0.9, 1.1, 1.2])
    def test_area_scaling(self, phantoms, zoom):
        for s in phantoms[:6]:
            out = apply_transform(s, zoom, (0.0, 0.0), 0.0, 0.0)
            for c in (LV, MYO):
                ratio = (out.labels == c).sum() / (s.labels == c).sum()
                assert abs(ratio / zoom ** 2 - 1) < 0.10

    def test_noise_only_on_image(self, phantoms):
        s = phantoms[0]
        out = apply_transform(s, 1.0, (0.0, 0.0), 0.0, 0.05, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(out.labels, s.labels)
        assert abs((out.image - s.image).std() - 0.05) < 0.005


class TestBatching:
    def test_deterministic(self, phantoms):
        def run():
            return [(x.copy(), y.copy()) for x, y, _ in batch_iterator(phantoms[:10], 4, seed=3, epoch=1,
                                                                        patch_size=64)]
        a, b = run(), run()
        assert len(a) == 3
        for (xa, ya), (xb, yb) in zip(a, b):
            np.testing.assert_array_equal(xa, xb)
            np.testing.assert_array_equal(ya, yb)

    def test_shapes(self, phantoms):
        x, y, samples = next(batch_iterator(phantoms, 16, seed=0))
        assert x.shape == (16, 1, 128, 128) and x.dtype == np.float32
        assert y.shape == (16, 128, 128) and y.dtype == np.int64
        assert len(samples) == 16

    def test_epochs_differ(self, phantoms):
        first = lambda e: [s.case_id for s in next(batch_iterator(phantoms, 8, seed=0, epoch=e))[2]]
        assert first(0) != first(1)

    def test_bad_batch_size(self, phantoms):
        with pytest.raises(ValueError):
            next(batch_iterator(phantoms, 0, seed=0))
