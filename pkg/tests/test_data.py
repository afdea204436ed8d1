import filecmp
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusenet import data as D
from fusenet.grouping import cross_entropy_matrix, detect_outlier_bands, row_magnitudes
from fusenet.netpbm import NetpbmError, read_pgm, read_ppm, write_pgm, write_ppm


def write_minimal(root, label=None, classes=("a", "b")):
    write_pgm(root / "t0_x.pgm", np.array([[1, 2], [3, 4]], np.uint8))
    write_pgm(root / "t0_y.pgm", np.array([[100, 2000], [30000, 65535]], np.uint16), maxval=65535)
    write_pgm(root / "t0_label.pgm", np.array([[0, 1], [1, 255]] if label is None else label, np.uint8),
              maxval=255)
    manifest = {
        "classes": list(classes), "ignore_index": 255, "bands": ["x", "y"],
        "tiles": [{"id": "t0", "bands": {"x": "t0_x.pgm", "y": "t0_y.pgm"}, "label": "t0_label.pgm"}],
        "split": {"train": ["t0"], "val": []},
    }
    (root / "manifest.json").write_text(json.dumps(manifest))
    return root / "manifest.json"


class TestNetpbm:
    def test_format_definition(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P5\n2 2\n255\n\x01\x02\x03\x04")
        np.testing.assert_array_equal(read_pgm(path), [[1, 2], [3, 4]])

    def test_header_comments(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x07\x08")
        np.testing.assert_array_equal(read_pgm(path), [[7, 8]])

    def test_sixteen_bit_big_endian(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P5\n2 1\n65535\n\x01\x00\xff\xff")
        out = read_pgm(path)
        assert out.dtype == np.uint16
        np.testing.assert_array_equal(out, [[256, 65535]])

    @pytest.mark.parametrize("dtype,maxval", [(np.uint8, 255), (np.uint16, 65535)])
    def test_roundtrip_exact(self, tmp_path, dtype, maxval):
        raster = np.random.default_rng(0).integers(0, maxval + 1, (7, 5)).astype(dtype)
        path = tmp_path / "r.pgm"
        write_pgm(path, raster, maxval=maxval)
        np.testing.assert_array_equal(read_pgm(path), raster)
        first = path.read_bytes()
        write_pgm(path, read_pgm(path), maxval=maxval)
        assert path.read_bytes() == first

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P2\n1 1\n255\n1")
        with pytest.raises(NetpbmError, match="P5"):
            read_pgm(path)

    def test_bad_maxval(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P5\n1 1\n1023\n\x00\x01")
        with pytest.raises(NetpbmError, match="maxval"):
            read_pgm(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P5\n2 2\n255\n\x01\x02\x03")
        with pytest.raises(NetpbmError, match="truncated"):
            read_pgm(path)

    def test_write_out_of_range(self, tmp_path):
        with pytest.raises(ValueError):
            write_pgm(tmp_path / "a.pgm", np.array([[300]]), maxval=255)

    def test_ppm_roundtrip(self, tmp_path):
        rgb = np.random.default_rng(1).integers(0, 256, (3, 4, 3)).astype(np.uint8)
        write_ppm(tmp_path / "a.ppm", rgb)
        np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), rgb)


class TestManifest:
    def test_minimal_loads(self, tmp_path):
        m = D.load_manifest(write_minimal(tmp_path))
        assert m.classes == ["a", "b"] and m.bands == ["x", "y"]
        tile = D.load_tile(m, "t0")
        np.testing.assert_array_equal(tile.bands["x"], [[1, 2], [3, 4]])
        assert tile.bands["y"].max() == 65535

    def test_label_out_of_range_names_tile(self, tmp_path):
        with pytest.raises(D.DatasetError, match="t0"):
            D.load_manifest(write_minimal(tmp_path, label=[[0, 2], [1, 1]]))

    def test_missing_band_file(self, tmp_path):
        path = write_minimal(tmp_path)
        os.remove(tmp_path / "t0_y.pgm")
        with pytest.raises(D.DatasetError, match="does not exist"):
            D.load_manifest(path)

    def test_band_not_listed(self, tmp_path):
        path = write_minimal(tmp_path)
        raw = json.loads(path.read_text())
        del raw["tiles"][0]["bands"]["y"]
        path.write_text(json.dumps(raw))
        with pytest.raises(D.DatasetError, match="not listed"):
            D.load_manifest(path)

    def test_dim_mismatch(self, tmp_path):
        path = write_minimal(tmp_path)
        write_pgm(tmp_path / "t0_x.pgm", np.zeros((3, 2), np.uint8))
        with pytest.raises(D.DatasetError, match="t0"):
            D.load_manifest(path)

    def test_unknown_split_tile(self, tmp_path):
        path = write_minimal(tmp_path)
        raw = json.loads(path.read_text())
        raw["split"]["val"] = ["t9"]
        path.write_text(json.dumps(raw))
        with pytest.raises(D.DatasetError, match="t9"):
            D.load_manifest(path)

    def test_too_many_classes(self, tmp_path):
        with pytest.raises(D.DatasetError, match="class count"):
            D.load_manifest(write_minimal(tmp_path, classes=[str(i) for i in range(255)]))

    def test_malformed(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"classes": ["a"]}))
        with pytest.raises(D.DatasetError, match="malformed"):
            D.load_manifest(tmp_path / "m.json")


class TestNormalization:
    def test_full_byte_range(self):
        stats = D.NormalizationStats({"b": 0.0}, {"b": 255.0})
        np.testing.assert_array_equal(stats.apply("b", np.array([0, 255, 128])), [0, 1, 128 / 255])

    def test_sixteen_bit_band(self):
        stats = D.NormalizationStats({"dsm": 30000.0}, {"dsm": 40000.0})
        out = stats.apply("dsm", np.array([30000, 35000, 40000]))
        np.testing.assert_allclose(out, [0, 0.5, 1])

    def test_clamping(self):
        stats = D.NormalizationStats({"b": 10.0}, {"b": 20.0})
        np.testing.assert_array_equal(stats.apply("b", np.array([5, 25])), [0, 1])

    def test_train_endpoints_attained(self, synth_dir):
        m = D.load_manifest(os.path.join(synth_dir, "manifest.json"))
        stats = D.compute_normalization(m, "train")
        tiles = [D.load_tile(m, t) for t in m.split["train"]]
        for band in m.bands:
            values = np.concatenate([stats.apply(band, t.bands[band]).ravel() for t in tiles])
            assert values.min() == 0.0 and values.max() == 1.0

    def test_constant_band(self, tmp_path):
        path = write_minimal(tmp_path)
        write_pgm(tmp_path / "t0_x.pgm", np.full((2, 2), 9, np.uint8))
        with pytest.raises(D.DatasetError, match="constant"):
            D.compute_normalization(D.load_manifest(path))

    def test_dict_roundtrip(self):
        stats = D.NormalizationStats({"a": 1.0, "b": 2.0}, {"a": 3.0, "b": 4.0})
        assert D.NormalizationStats.from_dict(json.loads(json.dumps(stats.to_dict()))) == stats


class TestPatches:
    def test_exact_partition(self):
        offsets = D.extract_patches((64, 64), 32, 32)
        assert offsets == [(0, 0), (0, 32), (32, 0), (32, 32)]

    def test_edge_aligned(self):
        offsets = D.extract_patches((70, 70), 32, 32)
        assert len(offsets) == 9
        assert {r for r, _ in offsets} == {0, 32, 38} == {c for _, c in offsets}

    def test_single(self):
        assert D.extract_patches((16, 16), 16) == [(0, 0)]

    def test_too_big(self):
        with pytest.raises(ValueError, match="exceeds"):
            D.extract_patches((16, 16), 32)

    def test_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            D.extract_patches((64, 64), 20, multiple_of=8)

    @given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 16), st.integers(1, 16))
    @settings(max_examples=100, deadline=None)
    def test_coverage(self, h, w, size, stride):
        size = min(size, h, w)
        stride = min(stride, size)
        cover = np.zeros((h, w), int)
        for r, c in D.extract_patches((h, w), size, stride):
            cover[r:r + size, c:c + size] += 1
        assert cover.min() >= 1
        if stride == size and h % size == 0 and w % size == 0:
            assert cover.max() == 1


def _sample(size=8, seed=0):
    rng = np.random.default_rng(seed)
    return D.PatchSample([rng.random((2, size, size)), rng.random((1, size, size))],
                         rng.integers(0, 6, (size, size)).astype(np.uint8))


class TestAugmentation:
    def test_clockwise_rotation(self):
        s = D.PatchSample([np.array([[[1, 2], [3, 4]]])], np.array([[1, 2], [3, 4]], np.uint8))
        out = D.augment(s, desc={"rot90": 1, "flip_h": False, "flip_v": False, "scale": 1.0})
        np.testing.assert_array_equal(out.label, [[3, 1], [4, 2]])
        np.testing.assert_array_equal(out.inputs[0][0], [[3, 1], [4, 2]])

    def test_identity(self):
        s = _sample()
        out = D.augment(s, desc={"rot90": 0, "flip_h": False, "flip_v": False, "scale": 1.0})
        np.testing.assert_array_equal(out.label, s.label)
        for a, b in zip(out.inputs, s.inputs):
            np.testing.assert_array_equal(a, b)

    def test_four_rotations(self):
        s = _sample()
        out = s
        for _ in range(4):
            out = D.augment(out, desc={"rot90": 1, "scale": 1.0})
        np.testing.assert_array_equal(out.label, s.label)
        np.testing.assert_array_equal(out.inputs[0], s.inputs[0])

    def test_flips(self):
        s = _sample()
        out = D.augment(s, desc={"flip_h": True, "flip_v": True, "scale": 1.0})
        np.testing.assert_array_equal(out.label, s.label[::-1, ::-1])

    def test_seeded_and_shared_transform(self):
        s = _sample(16, seed=2)
        s.inputs = [np.stack([s.label, s.label]).astype(float), s.label[None].astype(float)]
        a, b = D.augment(s, seed=11), D.augment(s, seed=11)
        assert a.augmentation == b.augmentation
        np.testing.assert_array_equal(a.label, b.label)
        valid = a.label != 255
        for x in a.inputs:
            for band in x:
                np.testing.assert_array_equal(band[valid], a.label[valid])

    @given(st.integers(0, 2**31))
    @settings(max_examples=40, deadline=None)
    def test_shape_and_labels(self, seed):
        s = _sample(16, seed=seed % 1000)
        out = D.augment(s, seed=seed)
        assert out.label.shape == s.label.shape
        assert [x.shape for x in out.inputs] == [x.shape for x in s.inputs]
        assert set(np.unique(out.label)) <= set(np.unique(s.label)) | {255}
        if out.augmentation["scale"] == 1.0:
            assert sorted(out.label.ravel()) == sorted(s.label.ravel())

    def test_rotation_flip_preserve_multiset(self):
        s = _sample(12, seed=5)
        for k in range(4):
            out = D.augment(s, desc={"rot90": k, "flip_h": k % 2 == 0, "scale": 1.0})
            assert sorted(out.label.ravel()) == sorted(s.label.ravel())

    def test_downscale_pads_with_ignore(self):
        s = _sample(16, seed=3)
        out = D.augment(s, desc={"scale": 0.75})
        assert np.all(out.label[:2] == 255) and np.all(out.inputs[0][:, :2] == 0)
        assert np.all(out.label[2:14, 2:14] != 255)

    def test_upscale_crops(self):
        s = _sample(16, seed=4)
        out = D.augment(s, desc={"scale": 1.25})
        assert out.label.shape == (16, 16) and not np.any(out.label == 255)

    def test_non_square(self):
        s = D.PatchSample([np.zeros((1, 4, 8))], np.zeros((4, 8), np.uint8))
        with pytest.raises(ValueError, match="square"):
            D.augment(s, seed=0)

    def test_draw_ranges(self):
        rng = np.random.default_rng(0)
        draws = [D.draw_augmentation(rng) for _ in range(500)]
        assert {d["rot90"] for d in draws} == {0, 1, 2, 3}
        assert all(0.75 <= d["scale"] <= 1.25 for d in draws)


class TestSynth:
    def test_same_seed_identical_trees(self, tmp_path):
        D.synth_generate(tmp_path / "a", n_tiles=3, tile_size=16, seed=5)
        D.synth_generate(tmp_path / "b", n_tiles=3, tile_size=16, seed=5)
        cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
        assert sorted(cmp.left_list) == sorted(cmp.right_list)
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", cmp.common_files, shallow=False)
        assert not mismatch and not errors

    def test_different_seed_differs(self, tmp_path):
        D.synth_generate(tmp_path / "a", n_tiles=1, tile_size=16, seed=1)
        D.synth_generate(tmp_path / "b", n_tiles=1, tile_size=16, seed=2)
        assert (tmp_path / "a" / "tile000_B1.pgm").read_bytes() != (tmp_path / "b" / "tile000_B1.pgm").read_bytes()

    def test_labels_and_ranges(self, synth_dir):
        m = D.load_manifest(os.path.join(synth_dir, "manifest.json"))
        assert m.bands == D.SYNTH_BANDS and len(m.classes) == 6
        for t in m.tiles:
            tile = D.load_tile(m, t.id)
            assert set(np.unique(tile.label)) <= set(range(6)) | {255}
            assert tile.bands["B5"].dtype == np.uint16
            assert tile.bands["B5"].min() >= 30000 and tile.bands["B5"].max() <= 40000

    def test_label_follows_bits(self, synth_dir):
        m = D.load_manifest(os.path.join(synth_dir, "manifest.json"))
        for t in m.tiles:
            tile = D.load_tile(m, t.id)
            b1, b4, b5 = D.synth_bits(tile.bands).astype(int)
            expected = D.SYNTH_CLASS_TABLE[4 * b1 + 2 * b4 + b5]
            valid = tile.label != 255
            np.testing.assert_array_equal(tile.label[valid], expected[valid])

    def test_split(self, tmp_path):
        m = D.synth_generate(tmp_path, n_tiles=8, tile_size=16, seed=0)
        assert len(m.split["train"]) == 6 and m.split["val"] == ["tile006", "tile007"]

    @pytest.mark.parametrize("seed", [0, 7, 8, 9])
    def test_b5_outlier(self, tmp_path, seed):
        m = D.synth_generate(tmp_path, n_tiles=8, tile_size=64, seed=seed)
        matrix = cross_entropy_matrix(D.band_channels(m))
        assert detect_outlier_bands(matrix) == {"B5"}
        rows = row_magnitudes(matrix)
        assert rows[4] / np.median(rows) > 1 / 0.6

    def test_no_group_sees_all_bits(self):
        # the class table is not a function of any two decision bits
        table = D.SYNTH_CLASS_TABLE.reshape(2, 2, 2)
        for axis in range(3):
            assert np.any(table.min(axis=axis) != table.max(axis=axis))
        assert len(set(D.SYNTH_CLASS_TABLE.tolist())) == 6


class TestGroupStacks:
    def test_normalized_groups_and_crop(self, synth_dir):
        m = D.load_manifest(os.path.join(synth_dir, "manifest.json"))
        stats = D.compute_normalization(m)
        tile = D.load_tile(m, m.split["train"][0])
        stacks = D.normalized_groups(tile, [["B5"], ["B1", "B2", "B3"]], stats)
        assert [s.shape for s in stacks] == [(1, 16, 16), (3, 16, 16)]
        sample = D.crop_sample(tile.id, stacks, tile.label, (8, 0), 8)
        assert sample.inputs[1].shape == (3, 8, 8) and sample.offset == (8, 0)
        np.testing.assert_array_equal(sample.label, tile.label[8:, :8])
        inputs, labels = D.batch_samples([sample, sample])
        assert inputs[0].shape == (2, 1, 8, 8) and labels.shape == (2, 8, 8)

    def test_unknown_group_band(self, synth_dir):
        m = D.load_manifest(os.path.join(synth_dir, "manifest.json"))
        with pytest.raises(D.DatasetError, match="B9"):
            D.normalized_groups(D.load_tile(m, "tile000"), [["B9"]], D.compute_normalization(m))
