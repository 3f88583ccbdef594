"""Containers, label algebra, object stats and the BVOX container."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atrkit.errors import ConfigError, LabelNotFoundError, VolumeFormatError, VolumeShapeError
from atrkit.volume import (
    IntensityWindow,
    LabelVolume,
    RawVolume,
    canonicalize,
    label_add,
    label_subtract,
    object_stats,
    read_volume,
    threshold_to_binary,
    write_volume,
)
from reference import ref_canonicalize

SP = (1.0, 1.0, 1.0)


def raw(arr):
    return RawVolume(SP, np.asarray(arr, dtype=np.uint16))


def labels(arr):
    return LabelVolume(SP, np.asarray(arr, dtype=np.uint32))


class TestContainers:
    def test_raw_is_immutable(self):
        v = raw(np.zeros((3, 3, 3)))
        with pytest.raises(ValueError):
            v.voxels[0, 0, 0] = 1

    def test_raw_rejects_out_of_range(self):
        with pytest.raises(ConfigError):
            RawVolume(SP, np.full((2, 2, 2), 40000, dtype=np.int64))
        with pytest.raises(ConfigError):
            RawVolume(SP, np.full((2, 2, 2), -1, dtype=np.int64))

    def test_rejects_bad_spacing_and_shape(self):
        with pytest.raises(ConfigError):
            RawVolume((1.0, 0.0, 1.0), np.zeros((2, 2, 2), dtype=np.uint16))
        with pytest.raises(ConfigError):
            LabelVolume(SP, np.zeros((2, 2), dtype=np.uint32))

    def test_label_values_sorted(self):
        v = labels([[[0, 3], [1, 3]], [[0, 0], [2, 1]]])
        assert v.label_values() == [1, 2, 3]
        assert v.max_label == 3
        assert not v.is_binary()

    def test_window_validation(self):
        with pytest.raises(ConfigError):
            IntensityWindow(2200, 800)
        with pytest.raises(ConfigError):
            IntensityWindow(-1, 100)


class TestCanonicalize:
    def test_renumbers_by_x_fastest_raster(self):
        arr = np.zeros((3, 3, 1), dtype=np.uint32)
        arr[2, 0, 0] = 7  # flat F index 2
        arr[0, 1, 0] = 9  # flat F index 3
        out = canonicalize(labels(arr))
        assert out.voxels[2, 0, 0] == 1
        assert out.voxels[0, 1, 0] == 2

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_matches_reference(self, seed):
        rng = np.random.default_rng(seed)
        arr = rng.integers(0, 5, size=(4, 5, 3)).astype(np.uint32)
        assert np.array_equal(canonicalize(labels(arr)).voxels, ref_canonicalize(arr))

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        arr = rng.integers(0, 6, size=(6, 6, 6)).astype(np.uint32)
        once = canonicalize(labels(arr))
        assert np.array_equal(once.voxels, canonicalize(once).voxels)


class TestLabelAlgebra:
    def test_threshold_inclusive_bounds(self):
        v = raw([[[799, 800], [2200, 2201]]])
        fg = threshold_to_binary(v, IntensityWindow(800, 2200))
        assert fg.voxels.tolist() == [[[0, 1], [1, 0]]]

    def test_subtract_residual(self):
        a = labels([[[1, 1, 2, 0]]])
        b = labels([[[1, 0, 2, 0]]])
        res = label_subtract(a, b)
        assert res.voxels.tolist() == [[[0, 1, 0, 0]]]

    def test_add_offsets_residual_labels(self):
        base = labels([[[1, 0, 2, 0]]])
        residual = labels([[[0, 1, 0, 2]]])
        out = label_add(base, residual)
        assert out.voxels.tolist() == [[[1, 3, 2, 4]]]

    def test_frame_mismatch_raises(self):
        with pytest.raises(VolumeShapeError):
            label_subtract(labels(np.zeros((2, 2, 2))), labels(np.zeros((3, 2, 2))))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_subtract_then_add_restores_foreground(self, seed):
        rng = np.random.default_rng(seed)
        a_arr = (rng.random((5, 5, 5)) < 0.4).astype(np.uint32)
        keep = rng.random((5, 5, 5)) < 0.6
        b_arr = np.where(keep, a_arr, 0).astype(np.uint32)
        a, b = labels(a_arr), labels(b_arr)
        merged = label_add(b, label_subtract(a, b))
        assert np.array_equal(merged.voxels > 0, a.voxels > 0)


class TestObjectStats:
    def test_mass_at_water_density(self):
        # 1000 voxels of the scanner-typical 1.291 mm^3 voxel, uniform water
        sp = (475.0 / 512.0, 475.0 / 512.0, 1.5)
        arr = np.zeros((10, 10, 10), dtype=np.uint16)
        arr.flat[:1000] = 1024
        stats = object_stats(
            RawVolume(sp, arr), LabelVolume(sp, (arr > 0).astype(np.uint32)), 1
        )
        assert stats.voxel_count == 1000
        assert stats.mass_g == pytest.approx(1.291, abs=0.005)

    def test_density_is_mean_mhu(self):
        arr = np.zeros((2, 2, 2), dtype=np.uint16)
        arr[0, 0, 0] = 1000
        arr[1, 0, 0] = 1200
        lab = np.zeros((2, 2, 2), dtype=np.uint32)
        lab[0, 0, 0] = lab[1, 0, 0] = 1
        assert object_stats(raw(arr), labels(lab), 1).density_mhu == 1100.0

    def test_slab_thickness(self):
        arr = np.zeros((9, 9, 9), dtype=np.uint32)
        arr[1:8, 1:8, 3:6] = 1  # 3 voxels thick at 1 mm spacing
        t = object_stats(raw(np.where(arr, 1024, 0)), labels(arr), 1).thickness_mm
        assert 3.0 <= t <= 4.0

    def test_single_voxel_thickness_is_min_spacing(self):
        sp = (0.9, 1.0, 1.5)
        arr = np.zeros((3, 3, 3), dtype=np.uint32)
        arr[1, 1, 1] = 1
        stats = object_stats(
            RawVolume(sp, np.where(arr, 1024, 0).astype(np.uint16)),
            LabelVolume(sp, arr),
            1,
        )
        assert stats.thickness_mm == pytest.approx(0.9)

    def test_missing_label(self):
        with pytest.raises(LabelNotFoundError):
            object_stats(raw(np.zeros((2, 2, 2))), labels(np.zeros((2, 2, 2))), 1)


class TestBvox:
    def test_example_file_size(self, tmp_path):
        path = tmp_path / "zeros.bvox"
        write_volume(raw(np.zeros((4, 4, 4))), path)
        assert path.stat().st_size == 30 + 4 * 4 * 4 * 2

    def test_raw_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        arr = rng.integers(0, 32768, size=(5, 4, 3)).astype(np.uint16)
        vol = RawVolume((0.9, 0.9, 1.5), arr)
        path = tmp_path / "raw.bvox"
        write_volume(vol, path)
        back = read_volume(path)
        assert isinstance(back, RawVolume)
        assert np.array_equal(back.voxels, arr)
        assert back.spacing == pytest.approx(vol.spacing)

    def test_labels_roundtrip(self, tmp_path):
        arr = np.arange(24, dtype=np.uint32).reshape((2, 3, 4))
        path = tmp_path / "lab.bvox"
        write_volume(LabelVolume(SP, arr), path)
        back = read_volume(path)
        assert isinstance(back, LabelVolume)
        assert np.array_equal(back.voxels, arr)

    def test_write_is_deterministic(self, tmp_path):
        vol = raw(np.arange(8).reshape((2, 2, 2)))
        p1, p2 = tmp_path / "a.bvox", tmp_path / "b.bvox"
        write_volume(vol, p1)
        write_volume(vol, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bvox"
        write_volume(raw(np.zeros((2, 2, 2))), path)
        blob = bytearray(path.read_bytes())
        blob[0:5] = b"NOPE!"
        path.write_bytes(bytes(blob))
        with pytest.raises(VolumeFormatError):
            read_volume(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.bvox"
        write_volume(raw(np.zeros((3, 3, 3))), path)
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(VolumeFormatError):
            read_volume(path)

    def test_unknown_dtype_code(self, tmp_path):
        path = tmp_path / "dtype.bvox"
        write_volume(raw(np.zeros((2, 2, 2))), path)
        blob = bytearray(path.read_bytes())
        blob[5] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(VolumeFormatError):
            read_volume(path)

    def test_absurd_dims_rejected(self, tmp_path):
        import struct

        path = tmp_path / "dims.bvox"
        header = struct.pack("<5sB3I3f", b"BVOX1", 0, 2**30, 2**30, 2**30, 1, 1, 1)
        path.write_bytes(header)
        with pytest.raises(VolumeFormatError):
            read_volume(path)
