import math

import numpy as np
import pytest

from reflnet.datagen import (
    CHAIR,
    CLASS_NAMES,
    DEFAULT_AMBIGUITY,
    FLOOR,
    OTHER,
    SceneSpec,
    generate_dataset,
    generate_scene,
    load_split,
    random_scene_spec,
    read_manifest,
)
from reflnet.errors import FileFormatError
from reflnet.rng import SplitMix64


class TestSplitMix:
    def test_reference_sequence(self):
        # published outputs of the reference generator for seed 1234567
        rng = SplitMix64(1234567)
        assert rng.next_u64(5).tolist() == [
            6457827717110365317,
            3203168211198807973,
            9817491932198370423,
            4593380528125082431,
            16408922859458223821,
        ]

    def test_seed_zero(self):
        assert int(SplitMix64(0).next_u64(1)[0]) == 0xE220A8397B1DCDAF

    def test_vectorised_equals_scalar(self):
        a, b = SplitMix64(9), SplitMix64(9)
        block = a.next_u64(10).tolist()
        assert block == [int(b.next_u64(1)[0]) for _ in range(10)]

    def test_uniform_range(self):
        u = SplitMix64(3).uniform(10_000)
        assert u.min() >= 0.0 and u.max() < 1.0
        assert abs(u.mean() - 0.5) < 0.02

    def test_randbelow(self):
        r = SplitMix64(4)
        vals = [r.randbelow(7) for _ in range(500)]
        assert set(vals) == set(range(7))


class TestScene:
    def test_no_objects(self):
        pc, meta = generate_scene(SceneSpec(object_counts={}, seed=1))
        assert set(pc.labels.tolist()) == {0, 1} and meta["boxes"] == []

    def test_deterministic(self):
        a, _ = generate_scene(SceneSpec(seed=5))
        b, _ = generate_scene(SceneSpec(seed=5))
        assert a.coords.tobytes() == b.coords.tobytes()
        assert a.colors.tobytes() == b.colors.tobytes()
        assert np.array_equal(a.labels, b.labels)

    @pytest.mark.parametrize("seed", range(5))
    def test_floor_count_binomial(self, seed):
        pc, _ = generate_scene(SceneSpec(room_x=4, room_y=4, density=100, object_counts={}, seed=seed))
        n = int((pc.labels == FLOOR).sum())
        cand = 3200
        sigma = math.sqrt(cand * 0.5 * 0.5)
        assert abs(n - 1600) <= 3 * sigma

    def test_labels_and_colors_valid(self):
        pc, _ = generate_scene(random_scene_spec(11))
        assert pc.labels.min() >= 0 and pc.labels.max() < 6
        assert pc.colors.min() >= 0 and pc.colors.max() <= 1

    @pytest.mark.parametrize("seed", range(10))
    def test_boxes_do_not_overlap(self, seed):
        _, meta = generate_scene(random_scene_spec(seed))
        boxes = meta["boxes"]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert not boxes[i].overlaps(boxes[j])

    def test_ambiguity_pairs_share_color_mean(self):
        spec = SceneSpec(density=200, object_counts={2: 2, 3: 4, 4: 2, 5: 3}, seed=3)
        pc, _ = generate_scene(spec)
        for a, b in DEFAULT_AMBIGUITY:
            ca, cb = pc.colors[pc.labels == a], pc.colors[pc.labels == b]
            tol = 3 * spec.color_sigma * math.sqrt(1 / len(ca) + 1 / len(cb))
            assert np.all(np.abs(ca.mean(0) - cb.mean(0)) < tol)

    def test_unplaceable_objects_skipped(self):
        spec = SceneSpec(room_x=1.0, room_y=1.0, object_counts={CHAIR: 0, OTHER: 40}, seed=0)
        _, meta = generate_scene(spec)
        assert meta["skipped"] > 0

    def test_all_classes_over_twenty_scenes(self):
        hist = np.zeros(6, dtype=int)
        for s in range(20):
            pc, _ = generate_scene(random_scene_spec(500 + s, density=10))
            hist += np.bincount(pc.labels, minlength=6)
        assert np.all(hist > 0) and len(CLASS_NAMES) == 6


class TestDataset:
    def test_files_and_manifest(self, tmp_path):
        manifest = generate_dataset(tmp_path, 1, 1, 40, density=5)
        entries = read_manifest(manifest)
        assert [(p.name, s, sp) for p, s, sp in entries] == [("train_40.pcd", 40, "train"), ("val_41.pcd", 41, "val")]
        assert manifest.read_text().splitlines()[0] == "manifest v1 2"
        assert len(load_split(manifest, "val")) == 1

    def test_regenerate_identical(self, tmp_path):
        generate_dataset(tmp_path / "a", 2, 1, 7, density=5)
        generate_dataset(tmp_path / "b", 2, 1, 7, density=5)
        for name in ("train_7.pcd", "train_8.pcd", "val_9.pcd", "manifest.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_bad_counts(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(tmp_path, 0, 1, 0)

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "m.txt").write_text("manifest v1 3\na 1 train\n")
        with pytest.raises(FileFormatError):
            read_manifest(tmp_path / "m.txt")
