import json
import os

import numpy as np
import pytest

from neuropoints.errors import DataError
from neuropoints.formats import (
    load_dataset, read_cloud, read_label_volume, read_manifest, write_cloud, write_dataset, write_label_volume,
)
from neuropoints.shapedata import LabelVolume, PointCloud


class TestLabelVolumeFiles:

    def test_write_then_read(self, tmp_path):
        grid = np.arange(24, dtype=np.uint16).reshape(2, 3, 4)
        vol = LabelVolume.from_grid(grid, spacing=(0.5, 1.0, 2.0), origin=(1.0, 2.0, 3.0))
        header = write_label_volume(vol, str(tmp_path / "vol01"))
        assert header.endswith("vol01.json")
        assert os.path.getsize(tmp_path / "vol01.raw") == 24 * 2
        back = read_label_volume(str(tmp_path / "vol01.json"))
        assert back.dims == (4, 3, 2) and back.spacing == (0.5, 1.0, 2.0)
        np.testing.assert_array_equal(back.grid, grid)

    def test_raw_is_little_endian_u16(self, tmp_path):
        vol = LabelVolume((2, 1, 1), (1, 1, 1), (0, 0, 0), [1, 258])
        write_label_volume(vol, str(tmp_path / "v"))
        assert (tmp_path / "v.raw").read_bytes() == b"\x01\x00\x02\x01"

    def test_missing_raw(self, tmp_path):
        (tmp_path / "v.json").write_text(json.dumps({"dims": [1, 1, 1], "spacing": [1, 1, 1], "origin": [0, 0, 0]}))
        with pytest.raises(DataError, match="v.raw"):
            read_label_volume(str(tmp_path / "v.json"))

    def test_missing_header_keys(self, tmp_path):
        (tmp_path / "v.json").write_text(json.dumps({"dims": [1, 1, 1]}))
        (tmp_path / "v.raw").write_bytes(b"\x00\x00")
        with pytest.raises(DataError, match="origin"):
            read_label_volume(str(tmp_path / "v"))


class TestCloudFiles:

    def test_ascii_has_nine_significant_digits(self, tmp_path):
        path = write_cloud(PointCloud([[1.0 / 3.0, 2.0, -0.5]]), str(tmp_path / "c.txt"))
        assert open(path).read().strip() == "0.333333333 2 -0.5"

    def test_ascii_line_per_point(self, tmp_path):
        cloud = PointCloud(np.arange(78.0).reshape(26, 3))
        path = write_cloud(cloud, str(tmp_path / "c.txt"))
        assert len(open(path).read().splitlines()) == 26
        np.testing.assert_array_equal(read_cloud(path).points, cloud.points)

    def test_binary_is_exact(self, tmp_path):
        cloud = PointCloud(np.random.default_rng(0).normal(size=(10, 3)), 4)
        path = write_cloud(cloud, str(tmp_path / "c.bin"))
        assert os.path.getsize(path) == 16 + 10 * 3 * 8
        back = read_cloud(path, 4)
        np.testing.assert_array_equal(back.points, cloud.points)
        assert back.structure_id == 4

    def test_binary_bad_magic(self, tmp_path):
        path = tmp_path / "c.bin"
        path.write_bytes(b"NOTCLOUD" + b"\x00" * 8)
        with pytest.raises(DataError, match="magic"):
            read_cloud(str(path))

    def test_binary_count_mismatch(self, tmp_path):
        path = write_cloud(PointCloud(np.zeros((3, 3))), str(tmp_path / "c.bin"))
        with open(path, "ab") as fh:
            fh.write(b"\x00" * 24)
        with pytest.raises(DataError, match="3 points"):
            read_cloud(path)

    def test_wrong_column_count(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("1 2\n3 4\n")
        with pytest.raises(DataError):
            read_cloud(str(path))


class TestDataset:

    def test_write_and_load(self, tmp_path, small_dataset):
        manifest = write_dataset(small_dataset, str(tmp_path))
        entries = read_manifest(manifest)
        assert len(entries) == 20
        assert entries[0]["clouds"] == [os.path.join("clouds", "subj0000_s0.txt"), os.path.join("clouds", "subj0000_s1.txt")]
        assert len(os.listdir(tmp_path / "clouds")) == 40

        loaded = load_dataset(manifest)
        assert [s.subject_id for s in loaded] == [s.subject_id for s in small_dataset]
        assert [s.target for s in loaded] == [s.target for s in small_dataset]
        assert loaded[3].annotations["class"] == 1
        np.testing.assert_allclose(loaded[5].clouds[1].points, small_dataset[5].clouds[1].points, rtol=1e-8)

    def test_binary_dataset_is_exact(self, tmp_path, small_dataset):
        manifest = write_dataset(small_dataset[:3], str(tmp_path), binary=True)
        loaded = load_dataset(manifest)
        np.testing.assert_array_equal(loaded[2].clouds[0].points, small_dataset[2].clouds[0].points)

    def test_subject_filter(self, tmp_path, small_dataset):
        manifest = write_dataset(small_dataset, str(tmp_path))
        loaded = load_dataset(manifest, ["subj0003", "subj0007"])
        assert [s.subject_id for s in loaded] == ["subj0003", "subj0007"]

    def test_rewrite_is_byte_identical(self, tmp_path, small_dataset):
        a = write_dataset(small_dataset, str(tmp_path / "a"))
        b = write_dataset(small_dataset, str(tmp_path / "b"))
        assert open(a, "rb").read() == open(b, "rb").read()
        cloud = os.path.join("clouds", "subj0004_s1.txt")
        assert (tmp_path / "a" / cloud).read_bytes() == (tmp_path / "b" / cloud).read_bytes()

    def test_manifest_errors(self, tmp_path):
        with pytest.raises(DataError):
            read_manifest(str(tmp_path / "missing.json"))
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps([{"subject_id": "a"}]))
        with pytest.raises(DataError, match="clouds"):
            read_manifest(str(bad))
        bad.write_text("{not json")
        with pytest.raises(DataError):
            read_manifest(str(bad))
