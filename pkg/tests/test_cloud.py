"""PointCloud container, XYZL I/O, voxel downsampling and block partitioning."""

import numpy as np
import pytest

from plantscan.cloud import (PointCloud, downsample_voxel, load_cloud,
                             partition_blocks, save_cloud)
from plantscan.errors import ParseError, ValidationError


def random_cloud(rng, n=50, colors=False, labels=False):
    return PointCloud(
        rng.uniform(-5, 5, (n, 3)),
        rng.integers(0, 256, (n, 3)) if colors else None,
        rng.integers(0, 4, n) if labels else None,
    )


class TestPointCloud:
    def test_basic_construction(self):
        c = PointCloud(np.zeros((4, 3)))
        assert len(c) == 4
        assert c.colors is None and c.labels is None

    def test_points_are_immutable(self):
        c = PointCloud(np.zeros((4, 3)))
        with pytest.raises(ValueError):
            c.points[0, 0] = 1.0

    def test_rejects_non_finite(self):
        pts = np.zeros((3, 3))
        pts[1, 2] = np.nan
        with pytest.raises(ValidationError):
            PointCloud(pts)

    def test_rejects_mismatched_labels(self):
        with pytest.raises(ValidationError):
            PointCloud(np.zeros((3, 3)), labels=np.array([0, 1]))

    def test_rejects_negative_labels(self):
        with pytest.raises(ValidationError):
            PointCloud(np.zeros((2, 3)), labels=np.array([0, -1]))

    def test_rejects_mismatched_colors(self):
        with pytest.raises(ValidationError):
            PointCloud(np.zeros((3, 3)), colors=np.zeros((2, 3)))

    def test_select_by_mask(self):
        rng = np.random.default_rng(0)
        c = random_cloud(rng, 20, colors=True, labels=True)
        mask = c.points[:, 0] > 0
        sub = c.select(mask)
        assert len(sub) == int(mask.sum())
        np.testing.assert_array_equal(sub.labels, c.labels[mask])
        np.testing.assert_array_equal(sub.colors, c.colors[mask])

    def test_with_labels(self):
        c = PointCloud(np.zeros((3, 3)))
        labelled = c.with_labels(np.array([1, 2, 3]))
        assert labelled.labels is not None and c.labels is None


class TestXyzlIO:
    def test_round_trip_all_columns(self, tmp_path):
        rng = np.random.default_rng(1)
        for colors, labels in [(False, False), (False, True),
                               (True, False), (True, True)]:
            c = random_cloud(rng, 30, colors=colors, labels=labels)
            path = tmp_path / "c.xyzl"
            save_cloud(c, path)
            back = load_cloud(path)
            assert np.abs(back.points - c.points).max() <= 1e-6
            if labels:
                np.testing.assert_array_equal(back.labels, c.labels)
            if colors:
                np.testing.assert_array_equal(back.colors, c.colors)

    def test_rejects_bad_header(self, tmp_path):
        path = tmp_path / "bad.xyzl"
        path.write_text("no header\n0 0 0\n")
        with pytest.raises(ParseError, match="line 1"):
            load_cloud(path)

    def test_rejects_wrong_column_count(self, tmp_path):
        path = tmp_path / "bad.xyzl"
        path.write_text("#xyzl v1 cols=3\n0 0\n")
        with pytest.raises(ParseError, match="line 2"):
            load_cloud(path)

    def test_rejects_bad_coordinate(self, tmp_path):
        path = tmp_path / "bad.xyzl"
        path.write_text("#xyzl v1 cols=3\n0 zero 0\n")
        with pytest.raises(ParseError):
            load_cloud(path)

    def test_rejects_color_out_of_range(self, tmp_path):
        path = tmp_path / "bad.xyzl"
        path.write_text("#xyzl v1 cols=6\n0 0 0 0 0 300\n")
        with pytest.raises(ParseError):
            load_cloud(path)

    def test_rejects_unknown_format(self, tmp_path):
        with pytest.raises(ValidationError):
            load_cloud(tmp_path / "x", fmt="ply")

    def test_skips_blank_lines(self, tmp_path):
        path = tmp_path / "c.xyzl"
        path.write_text("#xyzl v1 cols=3\n0 0 0\n\n1 1 1\n")
        assert len(load_cloud(path)) == 2


class TestDownsample:
    def test_single_voxel_gives_centroid(self):
        pts = np.array([[0.1, 0.1, 0.1], [0.3, 0.3, 0.3]])
        down = downsample_voxel(PointCloud(pts), 1.0)
        np.testing.assert_allclose(down.points, [[0.2, 0.2, 0.2]])

    def test_voxel_count_matches_occupied_cells(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(0, 4, (500, 3))
        down = downsample_voxel(PointCloud(pts), 0.5)
        occupied = len(np.unique(np.floor(pts / 0.5).astype(int), axis=0))
        assert len(down) == occupied

    def test_majority_label_wins(self):
        pts = np.full((5, 3), 0.5)
        labels = np.array([2, 2, 2, 1, 1])
        down = downsample_voxel(PointCloud(pts, labels=labels), 1.0)
        assert down.labels.tolist() == [2]

    def test_label_tie_breaks_to_lowest_index(self):
        pts = np.full((4, 3), 0.5)
        labels = np.array([3, 3, 1, 1])
        down = downsample_voxel(PointCloud(pts, labels=labels), 1.0)
        assert down.labels.tolist() == [1]

    def test_rejects_bad_voxel(self):
        with pytest.raises(ValidationError):
            downsample_voxel(PointCloud(np.zeros((1, 3))), 0.0)


class TestPartitionBlocks:
    def test_every_point_falls_in_exactly_one_block(self):
        rng = np.random.default_rng(3)
        cloud = PointCloud(rng.uniform(0, 10, (1000, 3)))
        blocks = partition_blocks(cloud, 2.0, block_size=64, seed=0)
        all_idx = np.concatenate([b.point_indices for b in blocks])
        assert sorted(all_idx.tolist()) == list(range(1000))

    def test_blocks_have_exact_budget(self):
        rng = np.random.default_rng(4)
        cloud = PointCloud(rng.uniform(0, 6, (300, 3)))
        for b in partition_blocks(cloud, 3.0, block_size=128, seed=0):
            assert len(b.resampled_indices) == 128
            assert b.resampled_points.shape == (128, 3)

    def test_oversampled_block_has_no_repeats(self):
        rng = np.random.default_rng(5)
        cloud = PointCloud(rng.uniform(0, 1, (500, 3)))
        (block,) = partition_blocks(cloud, 2.0, block_size=100, seed=0)
        assert len(np.unique(block.resampled_indices)) == 100

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(6)
        cloud = PointCloud(rng.uniform(0, 8, (400, 3)))
        a = partition_blocks(cloud, 2.0, block_size=64, seed=9)
        b = partition_blocks(cloud, 2.0, block_size=64, seed=9)
        for ba, bb in zip(a, b):
            np.testing.assert_array_equal(ba.resampled_indices, bb.resampled_indices)

    def test_points_stay_inside_their_cell(self):
        rng = np.random.default_rng(7)
        cloud = PointCloud(rng.uniform(0, 10, (800, 3)))
        for b in partition_blocks(cloud, 2.5, block_size=32, seed=0):
            xy = cloud.points[b.point_indices, :2]
            assert (xy >= np.array(b.origin) - 1e-9).all()
            assert (xy <= np.array(b.origin) + 2.5 + 1e-9).all()

    def test_empty_cloud_gives_no_blocks(self):
        assert partition_blocks(PointCloud(np.zeros((0, 3))), 1.0) == []
