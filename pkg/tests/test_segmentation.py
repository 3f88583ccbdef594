"""Config handling, histogram peaks, valley splitting and the full splitter."""

import numpy as np
import pytest

from atrkit.errors import ConfigError
from atrkit.morphology import OpeningParams
from atrkit.segmentation import (
    Histogram,
    PeakParams,
    SegmentationConfig,
    detect_peaks,
    object_histogram,
    segment,
    shape_split,
    split_by_valleys,
)
from atrkit.volume import IntensityWindow, LabelVolume, RawVolume, threshold_to_binary
from reference import ref_detect_peaks

SP = (1.0, 1.0, 1.0)


class TestConfig:
    def test_scales_must_increase(self):
        with pytest.raises(ConfigError):
            SegmentationConfig(
                scales=(OpeningParams(3, 10), OpeningParams(2, 10))
            )
        with pytest.raises(ConfigError):
            SegmentationConfig(scales=())

    def test_json_roundtrip(self, tmp_path):
        cfg = SegmentationConfig(
            window=IntensityWindow(700, 2500),
            scales=(OpeningParams(1, 50), OpeningParams(4, 80)),
            peak=PeakParams(bin_width_mhu=20, window_halfwidth_bins=2),
        )
        path = tmp_path / "seg.json"
        cfg.save(path)
        back = SegmentationConfig.load(path)
        assert back == cfg

    def test_peak_param_validation(self):
        with pytest.raises(ConfigError):
            PeakParams(bin_width_mhu=0)
        with pytest.raises(ConfigError):
            PeakParams(min_peak_mass_fraction=1.0)


class TestHistogram:
    def _volume(self, values):
        arr = np.asarray(values, dtype=np.uint16).reshape((-1, 1, 1))
        lab = np.ones_like(arr, dtype=np.uint32)
        return RawVolume(SP, arr), LabelVolume(SP, lab)

    def test_counts_sum_to_voxel_count(self):
        raw, lab = self._volume([1000, 1005, 1013, 1200, 1201])
        h = object_histogram(raw, lab, 1, PeakParams())
        assert h.counts.sum() == pytest.approx(5.0)

    def test_smoothing_off_gives_integer_bins(self):
        raw, lab = self._volume([1000, 1000, 1019])
        h = object_histogram(raw, lab, 1, PeakParams(smoothing_radius_bins=0))
        assert h.lo_mhu == 1000
        assert h.counts.tolist() == [2.0, 1.0]

    def test_smoothing_preserves_total(self):
        rng = np.random.default_rng(3)
        raw, lab = self._volume(rng.integers(900, 1600, size=500))
        for r in (1, 2, 4):
            h = object_histogram(raw, lab, 1, PeakParams(smoothing_radius_bins=r))
            assert h.counts.sum() == pytest.approx(500.0)


class TestDetectPeaks:
    def _h(self, counts):
        return Histogram(0, 10, np.asarray(counts, dtype=np.float64))

    def test_spec_example(self):
        counts = [1, 2, 5, 2, 1, 1, 4, 1]
        p = PeakParams(window_halfwidth_bins=1, min_peak_mass_fraction=0.0)
        assert detect_peaks(self._h(counts), p) == [2, 6]
        assert ref_detect_peaks(counts, 1, 0.0) == [2, 6]

    def test_plateau_takes_leftmost(self):
        counts = [1, 5, 5, 5, 1]
        p = PeakParams(window_halfwidth_bins=1, min_peak_mass_fraction=0.0)
        assert detect_peaks(self._h(counts), p) == [1]

    def test_bimodal_sixty_bins_apart(self):
        centers = np.arange(100)
        counts = np.exp(-((centers - 20.0) ** 2) / 18.0) + np.exp(
            -((centers - 80.0) ** 2) / 18.0
        )
        p = PeakParams(window_halfwidth_bins=3, min_peak_mass_fraction=0.0)
        assert detect_peaks(self._h(counts), p) == [20, 80]

    def test_mass_fraction_filters_minor_peak(self):
        counts = [0.0] * 40
        counts[5] = 100.0
        counts[30] = 1.0
        strict = PeakParams(window_halfwidth_bins=2, min_peak_mass_fraction=0.05)
        assert detect_peaks(self._h(counts), strict) == [5]
        loose = PeakParams(window_halfwidth_bins=2, min_peak_mass_fraction=0.0)
        assert detect_peaks(self._h(counts), loose) == [5, 30]

    def test_matches_reference_on_random_histograms(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            counts = rng.integers(0, 20, size=int(rng.integers(3, 40)))
            w = int(rng.integers(1, 4))
            frac = float(rng.choice([0.0, 0.05, 0.2]))
            got = detect_peaks(self._h(counts), PeakParams(
                window_halfwidth_bins=w, min_peak_mass_fraction=frac))
            assert got == ref_detect_peaks(counts, w, frac)


class TestValleySplit:
    def _merged_object(self):
        arr = np.zeros((12, 6, 6), dtype=np.float64)
        arr[1:6, 1:5, 1:5] = 1000.0
        arr[6:11, 1:5, 1:5] = 1400.0
        raw = RawVolume(SP, arr.astype(np.uint16))
        lab = LabelVolume(SP, (arr > 0).astype(np.uint32))
        return raw, lab

    def test_two_mode_object_splits_in_two(self):
        raw, lab = self._merged_object()
        p = PeakParams()
        h = object_histogram(raw, lab, 1, p)
        peaks = detect_peaks(h, p)
        assert len(peaks) == 2
        out, box = split_by_valleys(raw, lab, 1, peaks, h)
        assert int(out.max()) == 2
        left = raw.voxels[box][out == 1]
        right = raw.voxels[box][out == 2]
        assert left.max() < right.min()

    def test_single_peak_returns_none(self):
        arr = np.full((5, 5, 5), 1000, dtype=np.uint16)
        raw = RawVolume(SP, arr)
        lab = LabelVolume(SP, np.ones_like(arr, dtype=np.uint32))
        p = PeakParams()
        h = object_histogram(raw, lab, 1, p)
        peaks = detect_peaks(h, p)
        assert split_by_valleys(raw, lab, 1, peaks, h) is None

    def test_small_fragments_fold_into_neighbor(self):
        raw, lab = self._merged_object()
        # a few stray bright voxels inside the dark half
        arr = np.array(raw.voxels)
        arr[2, 2, 2] = 1400
        raw2 = RawVolume(SP, arr)
        p = PeakParams()
        h = object_histogram(raw2, lab, 1, p)
        peaks = detect_peaks(h, p)
        out, box = split_by_valleys(raw2, lab, 1, peaks, h, min_voxels=10)
        # the stray voxel is spatially disconnected from the bright half
        assert int(out.max()) == 2
        assert out[2 - box[0].start, 2 - box[1].start, 2 - box[2].start] == 1


class TestSplitter:
    def test_foreground_preserved_and_box_pair_split(self):
        arr = np.zeros((12, 6, 6), dtype=np.uint16)
        arr[1:6, 1:5, 1:5] = 1000
        arr[6:11, 1:5, 1:5] = 1400
        raw = RawVolume(SP, arr)
        cfg = SegmentationConfig(
            scales=(OpeningParams(2, 10),),
        )
        out = segment(raw, cfg)
        fg = threshold_to_binary(raw, cfg.window)
        assert np.array_equal(out.voxels > 0, fg.voxels > 0)
        assert out.max_label == 2

    def test_shape_split_keeps_small_object(self):
        arr = np.zeros((24, 12, 12), dtype=np.uint16)
        arr[1:10, 1:10, 1:10] = 1200
        arr[12:15, 2:5, 2:5] = 1200  # small 3^3 object
        raw = RawVolume(SP, arr)
        cfg = SegmentationConfig(
            scales=(OpeningParams(2, 10), OpeningParams(3, 10), OpeningParams(8, 10))
        )
        out = shape_split(raw, cfg)
        assert out.max_label == 2
        fg = threshold_to_binary(raw, cfg.window)
        assert np.array_equal(out.voxels > 0, fg.voxels > 0)
