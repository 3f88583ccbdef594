"""Spherical-kernel binary morphology, 26-connected labelling and pruning.

Erosion is computed through the exact Euclidean distance transform: a voxel
survives erosion by a radius-k ball exactly when no background voxel (out of
bounds counts as background) lies within Euclidean distance k. Constrained
dilation assigns every mask voxel to the label with the nearest seed voxel,
so an opening never changes the union of foreground voxels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError
from .volume import LabelVolume, canonicalize, _edt_sq

#: 26-connectivity structure for connected-component labelling.
_CONN26 = np.ones((3, 3, 3), dtype=bool)


def _ball_offsets(k: int) -> np.ndarray:
    r = np.arange(-k, k + 1)
    dx, dy, dz = np.meshgrid(r, r, r, indexing="ij")
    keep = dx * dx + dy * dy + dz * dz <= k * k
    return np.stack([dx[keep], dy[keep], dz[keep]], axis=1)


@dataclass(frozen=True)
class StructuringElement:
    """Spherical kernel: all integer offsets with Euclidean norm <= k."""

    k: int
    offsets: np.ndarray

    @classmethod
    def ball(cls, k: int) -> "StructuringElement":
        if k < 0:
            raise ConfigError(f"structuring element radius must be >= 0, got {k}")
        return cls(k=int(k), offsets=_ball_offsets(int(k)))


@dataclass(frozen=True)
class OpeningParams:
    """Radius and voxel-count pruning threshold for one opening scale."""

    k: int
    min_voxels: int

    def __post_init__(self):
        if self.k < 0:
            raise ConfigError(f"opening radius must be >= 0, got {self.k}")
        if self.min_voxels < 0:
            raise ConfigError(f"min_voxels must be >= 0, got {self.min_voxels}")


def _require_binary(vol: LabelVolume, what: str) -> None:
    if not vol.is_binary():
        raise ContractError(f"{what} must be binary (labels in {{0,1}})")


def _erode_arr(binary: np.ndarray, k: int) -> np.ndarray:
    if k == 0:
        return binary.copy()
    return _edt_sq(binary) > k * k


def erode(binary: LabelVolume, se: StructuringElement) -> LabelVolume:
    """Keep a voxel iff every ball offset lands on foreground (OOB = 0)."""
    _require_binary(binary, "erosion input")
    out = _erode_arr(binary.voxels > 0, se.k)
    return LabelVolume(binary.spacing, out.astype(np.uint32))


def _label_arr(binary: np.ndarray) -> np.ndarray:
    labelled, _ = ndimage.label(binary, structure=_CONN26)
    return labelled.astype(np.uint32)


def ccl(binary: LabelVolume) -> LabelVolume:
    """26-connected components, labelled 1..n in canonical raster order."""
    _require_binary(binary, "CCL input")
    labelled = _label_arr(binary.voxels > 0)
    return canonicalize(LabelVolume(binary.spacing, labelled))


def _prune_arr(labels: np.ndarray, min_voxels: int) -> np.ndarray:
    if min_voxels <= 0:
        return labels
    counts = np.bincount(labels.ravel())
    small = np.flatnonzero(counts < min_voxels)
    if len(small) == 0:
        return labels
    lut = np.arange(len(counts), dtype=labels.dtype)
    lut[small] = 0
    return lut[labels]


def prune_small(labels: LabelVolume, min_voxels: int) -> LabelVolume:
    """Drop components below the voxel-count threshold, then relabel."""
    pruned = _prune_arr(labels.voxels, min_voxels)
    return canonicalize(LabelVolume(labels.spacing, pruned))


def _assign_nearest(seeds: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Give every mask voxel the label of its Euclidean-nearest seed voxel.

    Ties go to the smaller label id; existing seed voxels keep their label
    (their own distance is zero). Distances are compared as exact squared
    integers so the result matches a brute-force scan bit for bit.
    """
    out = np.zeros_like(seeds)
    present = [int(v) for v in np.unique(seeds) if v != 0]
    if not present:
        return out
    best = np.full(seeds.shape, np.inf)
    for lab in present:
        d = ndimage.distance_transform_edt(seeds != lab)
        d2 = np.round(d * d)
        closer = mask & (d2 < best)
        out[closer] = lab
        best[closer] = d2[closer]
    return out


def dilate_constrained(
    labels: LabelVolume, se: StructuringElement, mask: LabelVolume
) -> LabelVolume:
    """Grow labels back into the mask until every mask voxel is claimed.

    The mask is the pre-erosion voxel set, so growth can never re-merge
    objects that live in different masks. The fixed point of repeated
    dilation by `se` inside the mask is nearest-seed assignment, which is
    what gets computed; `se` is the element the erosion used.
    """
    _require_binary(mask, "dilation mask")
    if se.k < 0:  # pragma: no cover - ball() already rejects this
        raise ConfigError("structuring element radius must be >= 0")
    if np.any((labels.voxels > 0) & (mask.voxels == 0)):
        raise ContractError("labelled voxels must lie inside the mask")
    out = _assign_nearest(labels.voxels, mask.voxels > 0)
    return LabelVolume(labels.spacing, out)


def _bbox(mask: np.ndarray):
    idx = np.nonzero(mask)
    return tuple(slice(int(i.min()), int(i.max()) + 1) for i in idx)


def _open_object(obj: np.ndarray, params: OpeningParams) -> np.ndarray | None:
    """Opening for a single object mask; None means 'keep unchanged'.

    Returns a component-label array over the object's voxels when the
    opening splits it into two or more pieces.
    """
    eroded = _erode_arr(obj, params.k)
    comps = _prune_arr(_label_arr(eroded), params.min_voxels)
    n = len([v for v in np.unique(comps) if v != 0])
    if n < 2:
        return None
    comps = canonicalize(LabelVolume((1.0, 1.0, 1.0), comps)).voxels
    return _assign_nearest(comps, obj)


def opening_block(labels: LabelVolume, params: OpeningParams) -> LabelVolume:
    """Per-object opening: erode, prune, CCL, constrained dilation.

    Objects that split gain new labels; objects the erosion leaves in one
    piece (or wipes out entirely) are kept unchanged. The output foreground
    is always identical to the input foreground.
    """
    n = labels.max_label
    out = np.zeros_like(labels.voxels)
    next_label = n
    for lab in range(1, n + 1):
        full_mask = labels.voxels == lab
        if not full_mask.any():
            continue
        box = _bbox(full_mask)
        obj = full_mask[box]
        split = _open_object(obj, params)
        if split is None:
            out[full_mask] = lab
        else:
            region = out[box]
            region[split > 0] = split[split > 0] + next_label
            out[box] = region
            next_label += int(split.max())
    return canonicalize(LabelVolume(labels.spacing, out))
