import json

import numpy as np
import pytest
import torch

from noise2map.data import (
    SynthSpec,
    center_crop_or_tile,
    denormalize,
    generate_synthetic,
    load_manifest,
    normalize,
    read_mask,
    synth_scene,
    write_image,
    write_mask,
)
from noise2map.exceptions import DataError, EmptyDatasetError, LabelError, ManifestError, ShapeError
from noise2map.validation import check_images, check_masks


class TestNormalize:
    def test_examples(self):
        out = normalize(np.array([0, 255, 127], dtype=np.uint8))
        assert out[0] == -1.0 and out[1] == 1.0
        assert out[2] == pytest.approx(127 / 127.5 - 1)
        assert out.dtype == np.float32

    def test_round_trip_on_grid(self):
        v = np.arange(256, dtype=np.uint8)
        np.testing.assert_array_equal(denormalize(normalize(v)), v)

    def test_out_of_range(self):
        with pytest.raises(DataError):
            normalize(np.array([256]))
        with pytest.raises(DataError):
            normalize(np.array([-1]))


class TestCrop:
    def test_identity(self, rng):
        im = rng.integers(0, 255, (3, 256, 256))
        crops = center_crop_or_tile(im, 256)
        assert len(crops) == 1 and np.array_equal(crops[0], im)

    def test_exact_grid(self, rng):
        im = rng.integers(0, 255, (3, 512, 512))
        crops = center_crop_or_tile(im, 256)
        assert len(crops) == 4
        rebuilt = np.block([[crops[0], crops[1]], [crops[2], crops[3]]])
        np.testing.assert_array_equal(rebuilt, im)

    def test_far_edge_offsets(self):
        im = np.arange(300 * 300).reshape(1, 300, 300)
        crops = center_crop_or_tile(im, 256)
        assert len(crops) == 4
        corners = sorted((int(c[0, 0, 0]) // 300, int(c[0, 0, 0]) % 300) for c in crops)
        assert corners == [(0, 0), (0, 44), (44, 0), (44, 44)]

    def test_too_small(self):
        with pytest.raises(ShapeError):
            center_crop_or_tile(np.zeros((3, 100, 300)), 256)


def _write_ss(root, ids, k=2):
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    for i in ids:
        write_image(root / "images" / f"{i}.png", np.zeros((3, 8, 8), np.uint8))
        write_mask(root / "masks" / f"{i}.png", np.zeros((8, 8), np.uint8))


class TestManifest:
    def test_sorted_ids(self, tmp_path):
        _write_ss(tmp_path, ["c", "a", "b"])
        m = load_manifest(tmp_path, "ss")
        assert m.ids == ["a", "b", "c"] and m.num_classes == 2

    def test_cd_mismatch_names_id(self, tmp_path):
        for d in ("A", "B", "masks"):
            (tmp_path / d).mkdir()
        for d, ids in (("A", ["x", "y"]), ("B", ["x"]), ("masks", ["x", "y"])):
            for i in ids:
                write_mask(tmp_path / d / f"{i}.png", np.zeros((4, 4)))
        with pytest.raises(ManifestError, match="y"):
            load_manifest(tmp_path, "cd")

    def test_missing_mask(self, tmp_path):
        _write_ss(tmp_path, ["a", "b"])
        (tmp_path / "masks" / "b.png").unlink()
        with pytest.raises(ManifestError, match="b"):
            load_manifest(tmp_path, "ss")

    def test_empty_split(self, tmp_path):
        _write_ss(tmp_path, ["a"])
        (tmp_path / "splits").mkdir()
        (tmp_path / "splits" / "val.txt").write_text("")
        with pytest.raises(EmptyDatasetError):
            load_manifest(tmp_path, "ss", "val")

    def test_missing_layout(self, tmp_path):
        with pytest.raises(ManifestError):
            load_manifest(tmp_path, "ss")

    def test_meta_classes_and_mask_check(self, tmp_path):
        _write_ss(tmp_path, ["a"])
        write_mask(tmp_path / "masks" / "a.png", np.full((8, 8), 2, np.uint8))
        with pytest.raises(DataError):
            load_manifest(tmp_path, "ss").load(0)
        (tmp_path / "meta.json").write_text(json.dumps({"num_classes": 3, "class_weights": [1, 2, 3]}))
        m = load_manifest(tmp_path, "ss")
        assert m.num_classes == 3 and m.class_weights.weights == (1.0, 2.0, 3.0)
        assert m.load(0).mask.max() == 2

    def test_idempotent(self, tmp_path):
        _write_ss(tmp_path, ["b", "a"])
        assert load_manifest(tmp_path, "ss").entries == load_manifest(tmp_path, "ss").entries


class TestSynthetic:
    def test_round_trip_count(self, tmp_path):
        spec = SynthSpec(seed=2, size=32, n_samples=6, task="cd", n_val=2)
        train = generate_synthetic(spec, tmp_path)
        assert len(train) == 4
        assert len(load_manifest(tmp_path, "cd", "val")) == 2
        x, y, ids = train.arrays()
        assert x.shape == (4, 6, 32, 32) and y.shape == (4, 32, 32)
        assert x.min() >= -1 and x.max() <= 1

    def test_deterministic_bytes(self, tmp_path):
        for name in ("a", "b"):
            generate_synthetic(SynthSpec(seed=1, size=32, n_samples=4, task="cd"), tmp_path / name)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_no_change(self, tmp_path):
        generate_synthetic(SynthSpec(seed=3, size=32, n_samples=5, change_fraction=0.0), tmp_path)
        for p in (tmp_path / "masks").glob("*.png"):
            assert read_mask(p).max() == 0

    def test_single_building_full_change(self):
        spec = SynthSpec(seed=0, size=32, n_buildings=(1, 1), change_fraction=1.0)
        rng = np.random.default_rng(5)
        for _ in range(10):
            _, _, _, change, pre, post = synth_scene(rng, spec)
            assert len(pre) == 1
            expected = np.zeros((32, 32), np.uint8)
            for y0, y1, x0, x1 in pre + post:
                expected[y0:y1, x0:x1] = 1
            np.testing.assert_array_equal(change, expected)

    def test_change_is_symmetric_difference(self):
        spec = SynthSpec(seed=0, size=64, change_fraction=0.5)
        rng = np.random.default_rng(9)
        for _ in range(20):
            _, _, ss_mask, change, pre, post = synth_scene(rng, spec)
            fp = lambda rects: {(y, x) for y0, y1, x0, x1 in rects for y in range(y0, y1) for x in range(x0, x1)}
            sym = fp(pre) ^ fp(post)
            assert {tuple(p) for p in np.argwhere(change)} == sym
            assert {tuple(p) for p in np.argwhere(ss_mask)} == fp(pre)

    def test_spec_validation(self):
        with pytest.raises(ShapeError):
            SynthSpec(size=30, multiple_of=4)
        with pytest.raises(DataError):
            SynthSpec(change_fraction=1.5)
        with pytest.raises(DataError):
            SynthSpec(n_samples=4, n_val=2, n_test=2)


class TestValidation:
    def test_integer_images_normalized(self):
        x = check_images(np.full((1, 3, 4, 4), 255, np.uint8), 3, 4)
        assert x.dtype == torch.float32 and float(x.max()) == 1.0

    @pytest.mark.parametrize("x,err", [
        (np.zeros((3, 4, 4)), ShapeError),
        (np.zeros((1, 2, 4, 4)), ShapeError),
        (np.zeros((1, 3, 6, 6)), ShapeError),
        (np.full((1, 3, 4, 4), 2.0), DataError),
        (np.full((1, 3, 4, 4), np.nan), DataError),
    ])
    def test_image_errors(self, x, err):
        with pytest.raises(err):
            check_images(x, 3, 4)

    def test_masks(self):
        assert check_masks(np.zeros((2, 4, 4)), 2, (4, 4), 2).dtype == torch.int64
        with pytest.raises(LabelError):
            check_masks(np.full((2, 4, 4), 2), 2, (4, 4), 2)
        with pytest.raises(LabelError):
            check_masks(np.full((2, 4, 4), 0.5), 2, (4, 4), 2)
        with pytest.raises(ShapeError):
            check_masks(np.zeros((2, 4, 5)), 2, (4, 4), 2)
