"""Seedable synthetic bag generator: raw volume + exact ground-truth labels
+ manifest, standing in for restricted scanner data.

Objects are rasterized as boxes, spheres, cylinders and thin sheets with
per-voxel intensities drawn from each material's Gaussian band. Touching
clusters are either sphere chains joined by a neck of controllable radius
(breakable by a large enough opening radius) or face-adjacent box stacks
(only separable by intensity).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, PlacementError
from .evaluation import GroundTruthObject
from .volume import LabelVolume, RawVolume, object_stats, read_volume, write_volume

MHU_CAP = 32767


@dataclass(frozen=True)
class MaterialSpec:
    """Intensity band of one phantom material."""

    name: str
    mean_mhu: float
    std_mhu: float
    is_known: bool = True
    mean_jitter_mhu: float = 0.0  # per-object shift of the band center
    weight: float = 1.0

    def __post_init__(self):
        if not (0 <= self.mean_mhu <= MHU_CAP):
            raise ConfigError(f"material mean {self.mean_mhu} outside MHU range")
        if self.std_mhu < 0 or self.mean_jitter_mhu < 0 or self.weight <= 0:
            raise ConfigError(f"bad material spec for {self.name!r}")


@dataclass(frozen=True)
class ClusterSpec:
    """Recipe for a touching sphere chain with controlled neck radii.

    Every bag gets ``count`` such chains. Radii come from ``radius_range``;
    with ``small_radius_range`` set, the last chain member is drawn from it
    instead (a big/small contact pair). Neck radii come from ``neck_range``
    in voxels, clamped below the smaller sphere radius.
    """

    size: int = 2
    radius_range: tuple = (9, 11)
    small_radius_range: tuple = None
    neck_range: tuple = (2.0, 3.0)
    count: int = 1

    def __post_init__(self):
        if self.size < 2 or self.count < 1:
            raise ConfigError("cluster spec needs size >= 2 and count >= 1")
        if self.neck_range[0] <= 0 or self.neck_range[1] < self.neck_range[0]:
            raise ConfigError(f"bad neck range {self.neck_range}")


DEFAULT_MATERIALS = (
    MaterialSpec("saline", 1130.0, 30.0, True, mean_jitter_mhu=25.0),
    MaterialSpec("rubber", 1230.0, 30.0, True, mean_jitter_mhu=25.0),
    MaterialSpec("clay", 1620.0, 40.0, True, mean_jitter_mhu=25.0),
    MaterialSpec("foam", 950.0, 30.0, False, mean_jitter_mhu=20.0),
    MaterialSpec("glass", 1900.0, 50.0, False, mean_jitter_mhu=30.0),
)


@dataclass(frozen=True)
class PhantomSpec:
    """Bag composition recipe; every random draw is governed by the seed."""

    dims: tuple = (64, 64, 48)
    spacing: tuple = (1.0, 1.0, 1.0)
    n_objects: tuple = (3, 6)
    shapes: tuple = ("box", "sphere", "cylinder", "sheet")
    box_half: tuple = (4, 9)
    sphere_radius: tuple = (5, 10)
    cylinder_radius: tuple = (3, 6)
    cylinder_half_len: tuple = (6, 14)
    sheet_half: tuple = (8, 14)
    sheet_half_thickness: tuple = (1, 2)
    touch_probability: float = 0.2
    cluster_size: tuple = (2, 2)
    cluster_shape: str = "sphere"  # "sphere" (neck) or "box" (face contact)
    neck_frac: float = 0.5  # neck radius as a fraction of the smaller sphere
    clusters: tuple = ()  # explicit ClusterSpec recipes, placed first
    materials: tuple = DEFAULT_MATERIALS
    noise_std: float = 0.0
    sheet_threshold_mm: float = 6.5
    include_small_object: bool = False
    small_box_half: tuple = (4, 5)
    seed: int = 0

    def __post_init__(self):
        if not self.materials:
            raise ConfigError("material mix must not be empty")
        if not (0.0 <= self.touch_probability <= 1.0):
            raise ConfigError("touch_probability must be in [0, 1]")
        if self.cluster_shape not in ("sphere", "box"):
            raise ConfigError(f"unknown cluster shape {self.cluster_shape!r}")
        for lo, hi in (self.n_objects, self.cluster_size):
            if lo < 1 or hi < lo:
                raise ConfigError("count ranges must satisfy 1 <= lo <= hi")
        known = [m for m in self.materials if m.is_known]
        for i, a in enumerate(known):
            for b in known[i + 1 :]:
                gap = abs(a.mean_mhu - b.mean_mhu)
                if gap < 2.0 * max(a.std_mhu, b.std_mhu):
                    raise ConfigError(
                        f"known materials {a.name}/{b.name} separated by {gap} MHU, "
                        f"need >= 2x the larger band std"
                    )

    def to_dict(self):
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "n_objects": list(self.n_objects),
            "shapes": list(self.shapes),
            "box_half": list(self.box_half),
            "sphere_radius": list(self.sphere_radius),
            "cylinder_radius": list(self.cylinder_radius),
            "cylinder_half_len": list(self.cylinder_half_len),
            "sheet_half": list(self.sheet_half),
            "sheet_half_thickness": list(self.sheet_half_thickness),
            "touch_probability": self.touch_probability,
            "cluster_size": list(self.cluster_size),
            "cluster_shape": self.cluster_shape,
            "neck_frac": self.neck_frac,
            "clusters": [
                {
                    "size": c.size,
                    "radius_range": list(c.radius_range),
                    "small_radius_range": (
                        list(c.small_radius_range) if c.small_radius_range else None
                    ),
                    "neck_range": list(c.neck_range),
                    "count": c.count,
                }
                for c in self.clusters
            ],
            "materials": [
                {
                    "name": m.name,
                    "mean_mhu": m.mean_mhu,
                    "std_mhu": m.std_mhu,
                    "is_known": m.is_known,
                    "mean_jitter_mhu": m.mean_jitter_mhu,
                    "weight": m.weight,
                }
                for m in self.materials
            ],
            "noise_std": self.noise_std,
            "sheet_threshold_mm": self.sheet_threshold_mm,
            "include_small_object": self.include_small_object,
            "small_box_half": list(self.small_box_half),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            materials = tuple(MaterialSpec(**m) for m in d.get("materials", []))
            clusters = tuple(
                ClusterSpec(
                    size=c["size"],
                    radius_range=tuple(c["radius_range"]),
                    small_radius_range=(
                        tuple(c["small_radius_range"])
                        if c.get("small_radius_range")
                        else None
                    ),
                    neck_range=tuple(c["neck_range"]),
                    count=c["count"],
                )
                for c in d.get("clusters", [])
            )
            kwargs = {
                k: tuple(v) if isinstance(v, list) else v
                for k, v in d.items()
                if k not in ("materials", "clusters")
            }
            return cls(materials=materials or DEFAULT_MATERIALS, clusters=clusters, **kwargs)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad phantom spec: {exc}") from exc

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _sphere_mask(dims, center, r):
    x, y, z = np.ogrid[: dims[0], : dims[1], : dims[2]]
    return (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2 <= r * r


def _box_mask(dims, center, half):
    x, y, z = np.ogrid[: dims[0], : dims[1], : dims[2]]
    return (
        (np.abs(x - center[0]) <= half[0])
        & (np.abs(y - center[1]) <= half[1])
        & (np.abs(z - center[2]) <= half[2])
    )


def _cylinder_mask(dims, center, r, half_len, axis):
    x, y, z = np.ogrid[: dims[0], : dims[1], : dims[2]]
    coords = [x - center[0], y - center[1], z - center[2]]
    along = coords.pop(axis)
    a, b = coords
    return (a * a + b * b <= r * r) & (np.abs(along) <= half_len)


def _random_unit(rng):
    while True:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n > 1e-6:
            return v / n


class _Placer:
    """Rejection-sampling placement with a one-voxel contact margin."""

    def __init__(self, spec, rng, max_tries=200):
        self.spec = spec
        self.rng = rng
        self.max_tries = max_tries
        self.blocked = np.zeros(spec.dims, dtype=bool)

    def _fits(self, masks):
        union = np.zeros(self.spec.dims, dtype=bool)
        for m in masks:
            union |= m
        if not union.any():
            return False
        return not (union & self.blocked).any()

    def commit(self, masks):
        union = np.zeros(self.spec.dims, dtype=bool)
        for m in masks:
            union |= m
        self.blocked |= ndimage.binary_dilation(union, np.ones((3, 3, 3), bool))

    def _center(self, margin):
        if any(margin[i] >= self.spec.dims[i] - margin[i] for i in range(3)):
            raise PlacementError(
                f"object with margin {list(margin)} cannot fit in dims "
                f"{self.spec.dims}"
            )
        return [
            int(self.rng.integers(margin[i], self.spec.dims[i] - margin[i]))
            for i in range(3)
        ]

    def place_single(self, shape):
        spec, rng = self.spec, self.rng
        for _ in range(self.max_tries):
            if shape == "sphere":
                r = int(rng.integers(spec.sphere_radius[0], spec.sphere_radius[1] + 1))
                c = self._center([r + 2] * 3)
                mask = _sphere_mask(spec.dims, c, r)
            elif shape == "box":
                half = [
                    int(rng.integers(spec.box_half[0], spec.box_half[1] + 1))
                    for _ in range(3)
                ]
                c = self._center([h + 2 for h in half])
                mask = _box_mask(spec.dims, c, half)
            elif shape == "cylinder":
                r = int(
                    rng.integers(spec.cylinder_radius[0], spec.cylinder_radius[1] + 1)
                )
                hl = int(
                    rng.integers(
                        spec.cylinder_half_len[0], spec.cylinder_half_len[1] + 1
                    )
                )
                axis = int(rng.integers(0, 3))
                margin = [r + 2] * 3
                margin[axis] = hl + 2
                c = self._center(margin)
                mask = _cylinder_mask(spec.dims, c, r, hl, axis)
            elif shape == "sheet":
                half = [
                    int(rng.integers(spec.sheet_half[0], spec.sheet_half[1] + 1))
                    for _ in range(3)
                ]
                thin_axis = int(rng.integers(0, 3))
                half[thin_axis] = int(
                    rng.integers(
                        spec.sheet_half_thickness[0], spec.sheet_half_thickness[1] + 1
                    )
                )
                c = self._center([h + 2 for h in half])
                mask = _box_mask(spec.dims, c, half)
            elif shape == "small_box":
                half = [
                    int(rng.integers(spec.small_box_half[0], spec.small_box_half[1] + 1))
                    for _ in range(3)
                ]
                c = self._center([h + 2 for h in half])
                mask = _box_mask(spec.dims, c, half)
            else:
                raise ConfigError(f"unknown shape {shape!r}")
            if self._fits([mask]):
                self.commit([mask])
                return [mask]
        raise PlacementError(
            f"could not place a {shape} in dims {self.spec.dims} "
            f"after {self.max_tries} tries"
        )

    def place_chain(self, radii, necks):
        """Sphere chain along a random direction; neck i joins spheres i, i+1."""
        spec, rng = self.spec, self.rng
        for _ in range(self.max_tries):
            direction = _random_unit(rng)
            margin = max(radii) + 2
            start = np.array(self._center([margin] * 3), dtype=float)
            centers = [start]
            for a, b, neck in zip(radii, radii[1:], necks):
                neck = min(neck, min(a, b) - 1.0)
                d = np.sqrt(a * a - neck * neck) + np.sqrt(b * b - neck * neck)
                centers.append(centers[-1] + direction * d)
            masks = []
            ok = True
            for c, r in zip(centers, radii):
                lo = c - r
                hi = c + r
                if (lo < 1).any() or (hi > np.array(spec.dims) - 2).any():
                    ok = False
                    break
                masks.append(_sphere_mask(spec.dims, c, r))
            if ok and self._fits(masks):
                self.commit(masks)
                return masks
        raise PlacementError(
            f"could not place a {len(radii)}-sphere chain in dims "
            f"{self.spec.dims} after {self.max_tries} tries"
        )

    def place_recipe(self, recipe: ClusterSpec):
        rng = self.rng
        radii = [
            int(rng.integers(recipe.radius_range[0], recipe.radius_range[1] + 1))
            for _ in range(recipe.size)
        ]
        if recipe.small_radius_range is not None:
            radii[-1] = int(
                rng.integers(
                    recipe.small_radius_range[0], recipe.small_radius_range[1] + 1
                )
            )
        necks = [
            float(rng.uniform(recipe.neck_range[0], recipe.neck_range[1]))
            for _ in range(recipe.size - 1)
        ]
        return self.place_chain(radii, necks)

    def place_cluster(self, size):
        spec, rng = self.spec, self.rng
        if spec.cluster_shape == "sphere":
            radii = [
                int(rng.integers(spec.sphere_radius[0], spec.sphere_radius[1] + 1))
                for _ in range(size)
            ]
            necks = [
                max(2.0, spec.neck_frac * min(a, b))
                for a, b in zip(radii, radii[1:])
            ]
            return self.place_chain(radii, necks)
        # face-adjacent box stack with an identical cross-section
        for _ in range(self.max_tries):
            half = [
                int(rng.integers(spec.box_half[0], spec.box_half[1] + 1))
                for _ in range(3)
            ]
            axis = int(rng.integers(0, 3))
            depth = 2 * half[axis] + 1
            lo = [h + 2 for h in half]
            hi = [spec.dims[i] - half[i] - 2 for i in range(3)]
            hi[axis] -= depth * (size - 1)  # room for the rest of the stack
            if any(lo[i] >= hi[i] for i in range(3)):
                raise PlacementError(
                    f"a {size}-box stack cannot fit in dims {spec.dims}"
                )
            c0 = [int(rng.integers(lo[i], hi[i])) for i in range(3)]
            masks = []
            ok = True
            for j in range(size):
                c = list(c0)
                c[axis] += j * depth
                if c[axis] + half[axis] >= spec.dims[axis] - 1:
                    ok = False
                    break
                masks.append(_box_mask(spec.dims, c, half))
            if ok and self._fits(masks):
                self.commit(masks)
                return masks
        raise PlacementError(
            f"could not place a {size}-cluster in dims {self.spec.dims} "
            f"after {self.max_tries} tries"
        )


def _pick_material(spec, rng, exclude=None):
    mats = [m for m in spec.materials if m.name != exclude]
    if not mats:
        mats = list(spec.materials)
    w = np.array([m.weight for m in mats])
    return mats[int(rng.choice(len(mats), p=w / w.sum()))]


def generate_bag(spec: PhantomSpec, seed=None, bag_id: int = 0):
    """One deterministic bag: (RawVolume, gt LabelVolume, manifest dict)."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    placer = _Placer(spec, rng)
    n_target = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))

    placed = []  # (mask, material, cluster_id)
    cluster_id = 0
    if spec.include_small_object:
        for mask in placer.place_single("small_box"):
            cluster_id += 1
            placed.append((mask, _pick_material(spec, rng), cluster_id))
    for recipe in spec.clusters:
        for _ in range(recipe.count):
            cluster_id += 1
            prev = None
            for mask in placer.place_recipe(recipe):
                mat = _pick_material(spec, rng, exclude=prev)
                prev = mat.name  # adjacent chain members differ in material
                placed.append((mask, mat, cluster_id))
    n_target = max(n_target, len(placed))
    while len(placed) < n_target:
        remaining = n_target - len(placed)
        cluster_id += 1
        if remaining >= spec.cluster_size[0] and rng.random() < spec.touch_probability:
            size = int(
                rng.integers(
                    spec.cluster_size[0], min(spec.cluster_size[1], remaining) + 1
                )
            )
            masks = placer.place_cluster(size)
            prev = None
            for mask in masks:
                mat = _pick_material(spec, rng, exclude=prev)
                prev = mat.name  # adjacent cluster members differ in material
                placed.append((mask, mat, cluster_id))
        else:
            shape = spec.shapes[int(rng.integers(0, len(spec.shapes)))]
            for mask in placer.place_single(shape):
                placed.append((mask, _pick_material(spec, rng), cluster_id))

    gt = np.zeros(spec.dims, dtype=np.uint32)
    raw = np.zeros(spec.dims, dtype=np.float64)
    entries = []
    for idx, (mask, mat, cid) in enumerate(placed, start=1):
        own = mask & (gt == 0)  # overlaps belong to the earlier object
        gt[own] = idx
        mean = mat.mean_mhu
        if mat.mean_jitter_mhu > 0:
            mean = mean + rng.normal() * mat.mean_jitter_mhu
        std = float(np.hypot(mat.std_mhu, spec.noise_std))
        n = int(own.sum())
        values = np.full(n, mean) if std == 0 else rng.normal(mean, std, size=n)
        raw[own] = np.clip(np.round(values), 0, MHU_CAP)
        entries.append({"material": mat.name, "cluster": cid, "mean_mhu": float(mean)})

    raw_vol = RawVolume(spec.spacing, raw.astype(np.uint16))
    gt_vol = LabelVolume(spec.spacing, gt)

    objects = []
    for idx, entry in enumerate(entries, start=1):
        mask = gt == idx
        stats = object_stats(raw_vol, gt_vol, idx)
        extents = [
            (int(i.max()) - int(i.min()) + 1) * spec.spacing[d]
            for d, i in enumerate(np.nonzero(mask))
        ]
        form = "sheet" if min(extents) <= spec.sheet_threshold_mm else "bulk"
        contacts = [
            j
            for j, other in enumerate(entries, start=1)
            if j != idx and other["cluster"] == entry["cluster"]
        ]
        objects.append(
            {
                "label": idx,
                "material": entry["material"],
                "form": form,
                "voxel_count": stats.voxel_count,
                "volume_mm3": stats.volume_mm3,
                "density_mhu": stats.density_mhu,
                "mass_g": stats.mass_g,
                "thickness_mm": stats.thickness_mm,
                "mean_mhu": entry["mean_mhu"],
                "min_extent_mm": min(extents),
                "contacts": contacts,
            }
        )

    manifest = {
        "bag_id": bag_id,
        "seed": int(spec.seed if seed is None else seed),
        "dims": list(spec.dims),
        "spacing": list(spec.spacing),
        "objects": objects,
    }
    return raw_vol, gt_vol, manifest


def generate_dataset(spec: PhantomSpec, n_bags: int, seed: int, out_dir):
    """Write n_bags deterministic bags plus an index with an odd/even split
    by bag serial number."""
    os.makedirs(out_dir, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_bags)
    index = {"seed": int(seed), "n_bags": int(n_bags), "bags": []}
    for i in range(n_bags):
        bag_id = i + 1
        bag_seed = int(children[i].generate_state(1)[0])
        raw_vol, gt_vol, manifest = generate_bag(spec, seed=bag_seed, bag_id=bag_id)
        names = {
            "raw": f"bag_{bag_id:04d}_raw.bvox",
            "gt": f"bag_{bag_id:04d}_gt.bvox",
            "manifest": f"bag_{bag_id:04d}_manifest.json",
        }
        write_volume(raw_vol, os.path.join(out_dir, names["raw"]))
        write_volume(gt_vol, os.path.join(out_dir, names["gt"]))
        with open(os.path.join(out_dir, names["manifest"]), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        index["bags"].append(
            {
                "bag_id": bag_id,
                "seed": bag_seed,
                "split": "odd" if bag_id % 2 else "even",
                **names,
            }
        )
    with open(os.path.join(out_dir, "index.json"), "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return index


@dataclass(frozen=True)
class BagRecord:
    bag_id: int
    split: str
    raw_path: str
    gt_path: str
    manifest: dict

    def load_raw(self):
        return read_volume(self.raw_path)

    def load_gt(self):
        return read_volume(self.gt_path)

    def gt_objects(self):
        return [
            GroundTruthObject(
                bag_id=self.bag_id,
                label=o["label"],
                material=o["material"],
                form=o["form"],
                mass_g=o["mass_g"],
                density_mhu=o["density_mhu"],
                thickness_mm=o.get("thickness_mm"),
            )
            for o in self.manifest["objects"]
        ]


def load_dataset(data_dir, split=None):
    """BagRecords from an index directory, optionally filtered by split."""
    with open(os.path.join(data_dir, "index.json")) as fh:
        index = json.load(fh)
    records = []
    for bag in index["bags"]:
        if split is not None and bag["split"] != split:
            continue
        with open(os.path.join(data_dir, bag["manifest"])) as fh:
            manifest = json.load(fh)
        records.append(
            BagRecord(
                bag_id=bag["bag_id"],
                split=bag["split"],
                raw_path=os.path.join(data_dir, bag["raw"]),
                gt_path=os.path.join(data_dir, bag["gt"]),
                manifest=manifest,
            )
        )
    return records
