"""Synthetic bag generation: determinism, manifests and dataset layout."""

import json

import numpy as np
import pytest

from atrkit.errors import ConfigError, PlacementError
from atrkit.phantom import (
    ClusterSpec,
    MaterialSpec,
    PhantomSpec,
    _Placer,
    generate_bag,
    generate_dataset,
    load_dataset,
)
from atrkit.volume import object_stats

SMALL = PhantomSpec(dims=(48, 48, 40), n_objects=(2, 4), seed=0)


class TestSpecs:
    def test_known_materials_must_separate(self):
        with pytest.raises(ConfigError):
            PhantomSpec(
                materials=(
                    MaterialSpec("a", 1000.0, 60.0),
                    MaterialSpec("b", 1100.0, 60.0),
                )
            )

    def test_validation(self):
        with pytest.raises(ConfigError):
            PhantomSpec(touch_probability=1.5)
        with pytest.raises(ConfigError):
            PhantomSpec(cluster_shape="torus")
        with pytest.raises(ConfigError):
            ClusterSpec(size=1)
        with pytest.raises(ConfigError):
            MaterialSpec("x", -5.0, 10.0)

    def test_json_roundtrip_with_clusters(self, tmp_path):
        spec = PhantomSpec(
            dims=(40, 40, 32),
            clusters=(
                ClusterSpec(size=3, radius_range=(10, 12), neck_range=(6.0, 7.0)),
                ClusterSpec(
                    size=2,
                    radius_range=(10, 12),
                    small_radius_range=(6, 7),
                    neck_range=(1.5, 2.0),
                ),
            ),
            noise_std=5.0,
            seed=11,
        )
        path = tmp_path / "spec.json"
        spec.save(path)
        assert PhantomSpec.load(path) == spec


class TestGenerateBag:
    def test_same_seed_same_bag(self):
        r1, g1, m1 = generate_bag(SMALL, seed=42)
        r2, g2, m2 = generate_bag(SMALL, seed=42)
        assert np.array_equal(r1.voxels, r2.voxels)
        assert np.array_equal(g1.voxels, g2.voxels)
        assert m1 == m2

    def test_different_seed_differs(self):
        r1, _, _ = generate_bag(SMALL, seed=1)
        r2, _, _ = generate_bag(SMALL, seed=2)
        assert not np.array_equal(r1.voxels, r2.voxels)

    def test_manifest_matches_ground_truth(self):
        raw, gt, manifest = generate_bag(SMALL, seed=7)
        labels = gt.label_values()
        assert [o["label"] for o in manifest["objects"]] == labels
        for o in manifest["objects"]:
            stats = object_stats(raw, gt, o["label"])
            assert o["voxel_count"] == stats.voxel_count
            assert o["density_mhu"] == pytest.approx(stats.density_mhu)
            assert o["mass_g"] == pytest.approx(stats.mass_g)
            assert o["form"] in ("bulk", "sheet")

    def test_object_count_in_requested_range(self):
        for seed in range(5):
            _, gt, manifest = generate_bag(SMALL, seed=seed)
            n = len(manifest["objects"])
            assert SMALL.n_objects[0] <= n
            assert gt.max_label == n

    def test_cluster_members_touch_and_differ_in_material(self):
        spec = PhantomSpec(
            dims=(64, 64, 48),
            n_objects=(2, 2),
            clusters=(ClusterSpec(size=2, radius_range=(8, 10), neck_range=(3.0, 4.0)),),
            seed=3,
        )
        _, gt, manifest = generate_bag(spec, seed=3)
        objs = manifest["objects"]
        pair = [o for o in objs if o["contacts"]]
        assert len(pair) == 2
        a, b = pair
        assert a["material"] != b["material"]
        assert b["label"] in a["contacts"]

    def test_densities_near_material_band(self):
        _, _, manifest = generate_bag(SMALL, seed=9)
        bands = {m.name: m for m in SMALL.materials}
        for o in manifest["objects"]:
            m = bands[o["material"]]
            slack = 4 * m.std_mhu + 3 * m.mean_jitter_mhu
            assert abs(o["density_mhu"] - m.mean_mhu) < slack

    def test_placement_error_when_nothing_fits(self):
        spec = PhantomSpec(dims=(16, 16, 16), n_objects=(1, 1), shapes=("sphere",),
                           sphere_radius=(10, 12), seed=0)
        with pytest.raises(PlacementError):
            rng = np.random.default_rng(0)
            _Placer(spec, rng).place_single("sphere")


class TestDataset:
    def test_layout_and_split(self, tmp_path):
        out = tmp_path / "data"
        index = generate_dataset(SMALL, 6, seed=5, out_dir=out)
        assert len(index["bags"]) == 6
        assert (out / "index.json").exists()
        odd = load_dataset(out, split="odd")
        even = load_dataset(out, split="even")
        assert [b.bag_id for b in odd] == [1, 3, 5]
        assert [b.bag_id for b in even] == [2, 4, 6]
        rec = odd[0]
        raw, gt = rec.load_raw(), rec.load_gt()
        assert raw.voxels.shape == tuple(SMALL.dims)
        gts = rec.gt_objects()
        assert len(gts) == len(rec.manifest["objects"])
        assert gts[0].bag_id == 1

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate_dataset(SMALL, 3, seed=8, out_dir=a)
        generate_dataset(SMALL, 3, seed=8, out_dir=b)
        for name in ("bag_0001_raw.bvox", "bag_0002_gt.bvox", "index.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_distinct_seeds_per_bag(self, tmp_path):
        index = generate_dataset(SMALL, 4, seed=2, out_dir=tmp_path / "d")
        seeds = [b["seed"] for b in index["bags"]]
        assert len(set(seeds)) == 4
