"""Unsupervised splitter: multi-scale shape-based split with residual
recovery, then histogram-peak driven intensity-based split.

The shape split runs the opening block at each configured radius in turn.
Between consecutive scales the voxels lost by the larger opening are
collected into a residual image, re-inspected at the smallest radius and
merged back, so no foreground voxel is ever dropped. The intensity split
then looks for multiple modes in each object's intensity histogram and
carves the object along the valleys between modes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LabelNotFoundError
from .morphology import OpeningParams, _bbox, _label_arr, ccl, opening_block
from .volume import (
    IntensityWindow,
    LabelVolume,
    RawVolume,
    canonicalize,
    label_add,
    label_subtract,
    threshold_to_binary,
)


@dataclass(frozen=True)
class PeakParams:
    """Histogram binning, smoothing and sliding-window peak detection knobs."""

    bin_width_mhu: int = 10
    window_halfwidth_bins: int = 3
    smoothing_radius_bins: int = 2
    min_peak_mass_fraction: float = 0.05

    def __post_init__(self):
        if self.bin_width_mhu <= 0:
            raise ConfigError("bin_width_mhu must be positive")
        if self.window_halfwidth_bins <= 0:
            raise ConfigError("window_halfwidth_bins must be positive")
        if self.smoothing_radius_bins < 0:
            raise ConfigError("smoothing_radius_bins must be >= 0")
        if not (0.0 <= self.min_peak_mass_fraction < 1.0):
            raise ConfigError("min_peak_mass_fraction must be in [0, 1)")


@dataclass(frozen=True)
class SegmentationConfig:
    """Threshold window, opening scales (strictly increasing k) and peaks."""

    window: IntensityWindow = IntensityWindow(800, 2200)
    scales: tuple = (
        OpeningParams(k=2, min_voxels=100),
        OpeningParams(k=3, min_voxels=100),
        OpeningParams(k=8, min_voxels=100),
    )
    peak: PeakParams = PeakParams()

    def __post_init__(self):
        scales = tuple(self.scales)
        if not scales:
            raise ConfigError("at least one opening scale is required")
        ks = [s.k for s in scales]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ConfigError(f"scale radii must strictly increase, got {ks}")
        object.__setattr__(self, "scales", scales)

    def to_dict(self):
        return {
            "window": {"lower": self.window.t_lower, "upper": self.window.t_upper},
            "scales": [{"k": s.k, "min_voxels": s.min_voxels} for s in self.scales],
            "peak": {
                "bin_width_mhu": self.peak.bin_width_mhu,
                "window_halfwidth_bins": self.peak.window_halfwidth_bins,
                "smoothing_radius_bins": self.peak.smoothing_radius_bins,
                "min_peak_mass_fraction": self.peak.min_peak_mass_fraction,
            },
        }

    @classmethod
    def from_dict(cls, d):
        try:
            window = IntensityWindow(d["window"]["lower"], d["window"]["upper"])
            scales = tuple(
                OpeningParams(k=s["k"], min_voxels=s["min_voxels"])
                for s in d["scales"]
            )
            peak = PeakParams(**d["peak"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad segmentation config: {exc}") from exc
        return cls(window=window, scales=scales, peak=peak)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class Histogram:
    """Per-object intensity histogram (counts may be smoothed floats)."""

    lo_mhu: int
    bin_width_mhu: int
    counts: np.ndarray


def shape_split(raw: RawVolume, cfg: SegmentationConfig) -> LabelVolume:
    """Multi-scale morphological opening with residual recovery."""
    # Disconnected parts get distinct labels up front so an object too small
    # to survive the smallest opening still comes out on its own.
    current = opening_block(ccl(threshold_to_binary(raw, cfg.window)), cfg.scales[0])
    for params in cfg.scales[1:]:
        opened = opening_block(current, params)
        residual = label_subtract(current, opened)
        recovered = opening_block(residual, cfg.scales[0])
        current = canonicalize(label_add(opened, recovered))
    return current


def object_histogram(
    raw: RawVolume, labels: LabelVolume, label: int, p: PeakParams
) -> Histogram:
    """Histogram of one object's intensities, box-filter smoothed.

    The bin range is extended by the smoothing radius on both sides before
    filtering so the total count stays equal to the object's voxel count.
    """
    vals = raw.voxels[labels.voxels == label]
    if label <= 0 or vals.size == 0:
        raise LabelNotFoundError(f"label {label} not present")
    bw = p.bin_width_mhu
    vmin, vmax = int(vals.min()), int(vals.max())
    lo0 = (vmin // bw) * bw
    nbins = (vmax - lo0) // bw + 1
    counts = np.bincount((vals.astype(np.int64) - lo0) // bw, minlength=nbins)
    r = p.smoothing_radius_bins
    if r == 0:
        return Histogram(lo0, bw, counts.astype(np.float64))
    ext = np.zeros(nbins + 2 * r, dtype=np.float64)
    ext[r : r + nbins] = counts
    kernel = np.full(2 * r + 1, 1.0 / (2 * r + 1))
    smoothed = np.convolve(ext, kernel, mode="same")
    return Histogram(lo0 - r * bw, bw, smoothed)


def detect_peaks(h: Histogram, p: PeakParams):
    """Sliding-window peaks: bin i is a peak when it is the maximum of the
    window [i-w, i+w], taking the leftmost bin on plateau ties, and the mass
    inside the window is at least min_peak_mass_fraction of the total."""
    counts = np.asarray(h.counts, dtype=np.float64)
    if counts.size == 0:
        return []
    w = p.window_halfwidth_bins
    total = counts.sum()
    peaks = []
    for i in range(len(counts)):
        lo, hi = max(0, i - w), min(len(counts), i + w + 1)
        window = counts[lo:hi]
        c = counts[i]
        if c <= 0:
            continue
        if np.any(window > c):
            continue
        if np.any(counts[lo:i] == c):
            continue  # not the leftmost bin of a plateau
        if total > 0 and p.min_peak_mass_fraction > 0:
            if window.sum() / total < p.min_peak_mass_fraction:
                continue
        peaks.append(i)
    return peaks


def _valleys(counts: np.ndarray, peaks):
    """Lowest bin strictly between consecutive peaks; ties take the lowest index."""
    vals = []
    for a, b in zip(peaks, peaks[1:]):
        seg = counts[a + 1 : b]
        vals.append(a + 1 + int(np.argmin(seg)))
    return vals


def split_by_valleys(
    raw: RawVolume,
    labels: LabelVolume,
    label: int,
    peaks,
    h: Histogram,
    min_voxels: int = 0,
):
    """Partition one object by intensity interval between histogram valleys.

    Returns a component-label array over the object's bounding box plus the
    box slices, or None when there is at most one peak (single material).
    Each intensity interval is re-checked for 26-connectivity; spatial
    fragments below min_voxels are folded into the adjacent interval before
    the final component labelling.
    """
    if len(peaks) <= 1:
        return None
    counts = np.asarray(h.counts, dtype=np.float64)
    thresholds = [
        h.lo_mhu + (v + 1) * h.bin_width_mhu for v in _valleys(counts, peaks)
    ]
    mask = labels.voxels == label
    box = _bbox(mask)
    obj = mask[box]
    vals = raw.voxels[box]
    interval = np.searchsorted(np.asarray(thresholds), vals, side="left")
    interval = np.where(obj, interval + 1, 0)  # 1-based inside the object
    n_intervals = len(thresholds) + 1

    if min_voxels > 0:
        for i in range(1, n_intervals + 1):
            part = interval == i
            if not part.any():
                continue
            comps = _label_arr(part)
            sizes = np.bincount(comps.ravel())
            small = np.flatnonzero(sizes[1:] < min_voxels) + 1
            if len(small) == 0:
                continue
            target = i - 1 if i > 1 else i + 1
            if target < 1 or target > n_intervals:
                continue
            interval[np.isin(comps, small)] = target

    out = np.zeros(obj.shape, dtype=np.uint32)
    next_label = 0
    for i in range(1, n_intervals + 1):
        part = interval == i
        if not part.any():
            continue
        comps = _label_arr(part)
        out[part] = comps[part] + next_label
        next_label += int(comps.max())
    return out, box


def segment(raw: RawVolume, cfg: SegmentationConfig) -> LabelVolume:
    """Shape-based split followed by per-object intensity-based split."""
    shaped = shape_split(raw, cfg)
    out = np.array(shaped.voxels)
    next_label = shaped.max_label
    for lab in range(1, shaped.max_label + 1):
        h = object_histogram(raw, shaped, lab, cfg.peak)
        peaks = detect_peaks(h, cfg.peak)
        result = split_by_valleys(
            raw, shaped, lab, peaks, h, min_voxels=cfg.scales[0].min_voxels
        )
        if result is None:
            continue
        split, box = result
        region = out[box]
        region[split > 0] = split[split > 0] + next_label
        next_label += int(split.max())
    return canonicalize(LabelVolume(raw.spacing, out))
