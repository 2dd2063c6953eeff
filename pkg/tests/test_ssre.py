import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reflnet.pointcloud import PointCloud, parse_regions
from reflnet.ssre import (
    extract_regions,
    format_centers,
    parse_centers,
    region_count_for_group,
    save_partition,
    semantic_grouping,
)
from reflnet.rng import SplitMix64


def cloud(coords):
    coords = np.asarray(coords, dtype=float)
    return PointCloud(coords, np.full(coords.shape, 0.5))


def one_hot_logits(classes, c):
    out = np.zeros((len(classes), c))
    out[np.arange(len(classes)), classes] = 1.0
    return out


class TestGrouping:
    def test_argmax(self):
        assert semantic_grouping(np.array([[0.1, 0.9]])).tolist() == [1]

    def test_tie(self):
        assert semantic_grouping(np.full((1, 4), 0.3)).tolist() == [0]

    def test_matches_row_scan(self):
        logits = np.random.default_rng(0).normal(size=(10, 4))
        expected = [max(range(4), key=lambda c: (row[c], -c)) for row in logits.tolist()]
        assert semantic_grouping(logits).tolist() == expected


class TestRegionCount:
    def test_worked_example(self):
        assert region_count_for_group(450, 200) == 2

    def test_small_group_gets_one_region(self):
        assert region_count_for_group(199, 200) == 1

    def test_exact(self):
        assert region_count_for_group(200, 200) == 1

    @settings(max_examples=200)
    @given(st.integers(1, 10**6), st.integers(1, 5000))
    def test_formula(self, n, s):
        assert region_count_for_group(n, s) == max(1, math.floor(n / s))


class TestExtract:
    def test_single_region(self):
        pts = np.random.default_rng(1).uniform(size=(50, 3))
        part = extract_regions(cloud(pts), one_hot_logits([2] * 50, 3), 200, 0)
        assert part.num_regions == 1 and set(part.region_of.tolist()) == {0}
        assert part.region_class.tolist() == [2]

    def test_two_clusters(self):
        rng = np.random.default_rng(2)
        pts = np.vstack([rng.uniform(0, 1, (30, 3)), rng.uniform(10, 11, (40, 3))])
        cls = [1] * 30 + [0] * 40
        part = extract_regions(cloud(pts), one_hot_logits(cls, 2), 200, 5)
        assert part.num_regions == 2
        # ids ordered by class: class 0 (second cluster) gets region 0
        assert part.region_of.tolist() == [1] * 30 + [0] * 40
        assert part.group_sizes.tolist() == [40, 30]

    def test_line_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(0, 10, 450)
        pts = np.stack([x, np.zeros(450), np.zeros(450)], 1)
        seed = 11
        part = extract_regions(cloud(pts), one_hot_logits([0] * 450, 1), 200, seed)
        assert part.num_regions == 2
        # independent composition: start from the seeded index, farthest point, nearest center
        start = SplitMix64(seed ^ 0).randbelow(450)
        second = max(range(450), key=lambda i: (abs(x[i] - x[start]), -i))
        centers = [start, second]
        expected = [min(range(2), key=lambda j: (abs(x[i] - x[centers[j]]), j)) for i in range(450)]
        assert part.region_of.tolist() == expected
        np.testing.assert_array_equal(part.centers, pts[centers])

    def test_empty(self):
        part = extract_regions(cloud(np.zeros((0, 3))), np.zeros((0, 3)), 10, 0)
        assert part.num_regions == 0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 600), st.integers(1, 6), st.integers(1, 150), st.integers(0, 2**31))
    def test_invariants(self, n, c, s, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(n, 3))
        logits = rng.normal(size=(n, c))
        part = extract_regions(cloud(pts), logits, s, seed)
        pred = logits.argmax(1)
        # purity w.r.t. predictions, cover, count bookkeeping
        assert np.all(part.region_class[part.region_of] == pred)
        assert part.num_regions == part.group_region_counts.sum()
        assert part.num_regions <= math.ceil(n / s) + c
        assert np.all(part.point_counts() > 0)
        # within-group Voronoi property
        for j in range(part.num_regions):
            members = np.flatnonzero(part.region_of == j)
            same = np.flatnonzero(part.region_class == part.region_class[j])
            d = np.linalg.norm(pts[members, None, :] - part.centers[None, same, :], axis=-1)
            own = np.linalg.norm(pts[members] - part.centers[j], axis=-1)
            assert np.all(own <= d.min(axis=1) + 1e-12)
        # centers are group points
        for j in range(part.num_regions):
            assert np.any(np.all(pts == part.centers[j], axis=1))
        again = extract_regions(cloud(pts), logits, s, seed)
        assert np.array_equal(again.region_of, part.region_of)


def test_files_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(300, 3))
    part = extract_regions(cloud(pts), rng.normal(size=(300, 3)), 40, 1)
    save_partition(part, tmp_path / "r.txt", tmp_path / "c.txt")
    ids, m = parse_regions((tmp_path / "r.txt").read_text())
    assert m == part.num_regions and np.array_equal(ids, part.region_of)
    cls, xyz = parse_centers((tmp_path / "c.txt").read_text())
    assert np.array_equal(cls, part.region_class)
    np.testing.assert_allclose(xyz, part.centers, rtol=1e-8)
    assert format_centers(part).startswith(f"centers v1 {part.num_regions}\n")
