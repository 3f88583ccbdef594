"""Voxel-grid containers, label-image algebra and per-object physical stats.

Volumes are stored as numpy arrays of shape (nx, ny, nz); the flat raster
order used for canonical labelling and file I/O is x-fastest (Fortran order).
Intensities are Modified Hounsfield Units (MHU): air = 0, water = 1024,
maximum 32767.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import (
    ConfigError,
    LabelNotFoundError,
    VolumeFormatError,
    VolumeShapeError,
)

MHU_MIN = 0
MHU_MAX = 32767
MHU_AIR = 0
MHU_WATER = 1024

#: grams per cm^3 at the water anchor (1024 MHU == 1.0 g/cm^3, 0 MHU == 0).
_WATER_DENSITY_MHU = float(MHU_WATER)

_MAGIC = b"BVOX1"
_DTYPE_RAW = 0
_DTYPE_LABELS = 1
_HEADER = struct.Struct("<5sB3I3f")
_MAX_VOXELS = 1 << 28


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ConfigError(f"spacing must be three positive floats, got {spacing!r}")
    return spacing


@dataclass(frozen=True)
class RawVolume:
    """3D grid of 16-bit MHU intensities with physical voxel spacing (mm)."""

    spacing: tuple
    voxels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        vox = np.asarray(self.voxels)
        if vox.ndim != 3 or vox.size == 0:
            raise ConfigError("raw volume needs a non-empty 3D voxel grid")
        if vox.dtype != np.uint16:
            if vox.size and (vox.min() < MHU_MIN or vox.max() > MHU_MAX):
                raise ConfigError("intensities outside [0, 32767]")
            vox = vox.astype(np.uint16)
        elif vox.size and vox.max() > MHU_MAX:
            raise ConfigError("intensities outside [0, 32767]")
        vox = np.ascontiguousarray(vox)
        vox.flags.writeable = False
        object.__setattr__(self, "voxels", vox)

    @property
    def dims(self):
        return self.voxels.shape

    @property
    def voxel_volume_mm3(self):
        sx, sy, sz = self.spacing
        return sx * sy * sz


@dataclass(frozen=True)
class LabelVolume:
    """3D grid of non-negative integer object labels; 0 is background."""

    spacing: tuple
    voxels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        vox = np.asarray(self.voxels)
        if vox.ndim != 3 or vox.size == 0:
            raise ConfigError("label volume needs a non-empty 3D voxel grid")
        if vox.dtype != np.uint32:
            if vox.size and vox.min() < 0:
                raise ConfigError("labels must be non-negative")
            vox = vox.astype(np.uint32)
        vox = np.ascontiguousarray(vox)
        vox.flags.writeable = False
        object.__setattr__(self, "voxels", vox)

    @property
    def dims(self):
        return self.voxels.shape

    @property
    def max_label(self):
        return int(self.voxels.max(initial=0))

    @property
    def voxel_volume_mm3(self):
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def is_binary(self):
        return self.max_label <= 1

    def label_values(self):
        """Sorted nonzero labels present in the volume."""
        vals = np.unique(self.voxels)
        return [int(v) for v in vals if v != 0]


@dataclass(frozen=True)
class IntensityWindow:
    """Inclusive MHU band [t_lower, t_upper] selecting materials of interest."""

    t_lower: int
    t_upper: int

    def __post_init__(self):
        if not (MHU_MIN <= self.t_lower < self.t_upper <= MHU_MAX):
            raise ConfigError(
                f"window [{self.t_lower}, {self.t_upper}] invalid; need "
                f"{MHU_MIN} <= lower < upper <= {MHU_MAX}"
            )


@dataclass(frozen=True)
class ObjectStats:
    """Physical summary of one labelled object."""

    label: int
    voxel_count: int
    volume_mm3: float
    density_mhu: float
    mass_g: float
    thickness_mm: float


def _require_same_frame(a, b):
    if a.dims != b.dims or a.spacing != b.spacing:
        raise VolumeShapeError(
            f"volume frames differ: {a.dims}/{a.spacing} vs {b.dims}/{b.spacing}"
        )


def canonicalize(labels: LabelVolume) -> LabelVolume:
    """Renumber objects 1..n by ascending raster index of their first voxel.

    Raster order is x-fastest, then y, then z (the BVOX payload order), which
    makes relabelling deterministic regardless of how labels were produced.
    """
    flat = labels.voxels.ravel(order="F")
    values, first = np.unique(flat, return_index=True)
    nonzero = values != 0
    values, first = values[nonzero], first[nonzero]
    order = np.argsort(first, kind="stable")
    lut = np.zeros(int(values.max(initial=0)) + 1, dtype=np.uint32)
    lut[values[order]] = np.arange(1, len(values) + 1, dtype=np.uint32)
    return LabelVolume(labels.spacing, lut[labels.voxels])


def threshold_to_binary(raw: RawVolume, window: IntensityWindow) -> LabelVolume:
    """Binarize: label 1 exactly where t_lower <= intensity <= t_upper."""
    v = raw.voxels
    fg = (v >= window.t_lower) & (v <= window.t_upper)
    return LabelVolume(raw.spacing, fg.astype(np.uint32))


def label_subtract(a: LabelVolume, b: LabelVolume) -> LabelVolume:
    """Residual image: 1 where `a` is foreground and `b` is background."""
    _require_same_frame(a, b)
    res = (a.voxels > 0) & (b.voxels == 0)
    return LabelVolume(a.spacing, res.astype(np.uint32))


def label_add(base: LabelVolume, residual: LabelVolume) -> LabelVolume:
    """Merge residual objects back: residual label v becomes max_label + v."""
    _require_same_frame(base, residual)
    n2 = np.uint32(base.max_label)
    out = np.where(residual.voxels > 0, residual.voxels + n2, base.voxels)
    return LabelVolume(base.spacing, out)


def _edt_sq(binary: np.ndarray, sampling=None) -> np.ndarray:
    """Exact squared Euclidean distance to the nearest background voxel.

    The volume is treated as embedded in an infinite background, so a one
    voxel zero border is enough to make out-of-bounds count as background.
    """
    padded = np.pad(binary, 1)
    d = ndimage.distance_transform_edt(padded, sampling=sampling)
    d2 = d * d
    if sampling is None:
        d2 = np.round(d2)
    return d2[1:-1, 1:-1, 1:-1]


def object_stats(raw: RawVolume, labels: LabelVolume, label: int) -> ObjectStats:
    """Density, mass and thickness of one object.

    Mass uses the linear MHU->density map anchored at water (1024 MHU ==
    1.0 g/cm^3, air == 0). Thickness is derived from the interior Euclidean
    distance transform in physical units: 2 * max(EDT) - min(spacing), which
    yields min(spacing) for a single voxel and ~3 mm for a 3-voxel slab at
    1 mm spacing.
    """
    _require_same_frame(raw, labels)
    mask = labels.voxels == label
    count = int(mask.sum())
    if label <= 0 or count == 0:
        raise LabelNotFoundError(f"label {label} not present")
    vals = raw.voxels[mask]
    density = float(vals.mean(dtype=np.float64))
    volume_mm3 = count * raw.voxel_volume_mm3
    mass_g = count * (raw.voxel_volume_mm3 / 1000.0) * (density / _WATER_DENSITY_MHU)

    lo = [int(i.min()) for i in np.nonzero(mask)]
    hi = [int(i.max()) + 1 for i in np.nonzero(mask)]
    crop = mask[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    padded = np.pad(crop, 1)
    edt = ndimage.distance_transform_edt(padded, sampling=labels.spacing)
    min_s = min(labels.spacing)
    thickness = max(2.0 * float(edt.max()) - min_s, min_s)
    return ObjectStats(
        label=label,
        voxel_count=count,
        volume_mm3=volume_mm3,
        density_mhu=density,
        mass_g=mass_g,
        thickness_mm=thickness,
    )


def all_object_stats(raw: RawVolume, labels: LabelVolume):
    """ObjectStats for every nonzero label, ascending."""
    return [object_stats(raw, labels, lab) for lab in labels.label_values()]


def write_volume(volume, path) -> None:
    """Write a RawVolume or LabelVolume to the BVOX container."""
    if isinstance(volume, RawVolume):
        dtype_code, payload_dtype = _DTYPE_RAW, "<u2"
    elif isinstance(volume, LabelVolume):
        dtype_code, payload_dtype = _DTYPE_LABELS, "<u4"
    else:
        raise TypeError(f"cannot serialize {type(volume).__name__}")
    nx, ny, nz = volume.dims
    header = _HEADER.pack(_MAGIC, dtype_code, nx, ny, nz, *volume.spacing)
    payload = volume.voxels.astype(payload_dtype).tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_volume(path):
    """Read a BVOX file; returns RawVolume or LabelVolume per the dtype byte."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise VolumeFormatError(f"{path}: file shorter than BVOX header")
    magic, dtype_code, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if dtype_code not in (_DTYPE_RAW, _DTYPE_LABELS):
        raise VolumeFormatError(f"{path}: unknown dtype code {dtype_code}")
    n_voxels = nx * ny * nz
    if n_voxels == 0 or n_voxels > _MAX_VOXELS:
        raise VolumeFormatError(f"{path}: dims {nx}x{ny}x{nz} out of range")
    item = 2 if dtype_code == _DTYPE_RAW else 4
    expected = _HEADER.size + n_voxels * item
    if len(blob) != expected:
        raise VolumeFormatError(
            f"{path}: payload size {len(blob) - _HEADER.size} != {n_voxels * item}"
        )
    flat = np.frombuffer(blob, dtype="<u2" if item == 2 else "<u4", offset=_HEADER.size)
    vox = flat.reshape((nx, ny, nz), order="F")
    if dtype_code == _DTYPE_RAW:
        return RawVolume((sx, sy, sz), vox.astype(np.uint16))
    return LabelVolume((sx, sy, sz), vox.astype(np.uint32))
