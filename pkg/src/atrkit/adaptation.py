"""Adaptation layer: threat definitions, probability offsets, density-range
scaling, and the calibration sweeps that learn offset-vs-PD curves.

Offsets bias the classifier's argmax without renormalization; the adjusted
values are scores, not probabilities. Offset curves are monotone
shape-preserving piecewise cubics so requested-PD queries clamp safely.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from .classify import OTHERS_CLASS, ClassifiedObject
from .errors import ConfigError, ContractError, DomainError

OFFSET_MIN = -0.5
OFFSET_MAX = 0.5
DEFAULT_OFFSET_GRID = tuple(round(x, 1) for x in np.arange(-0.5, 0.51, 0.1))
#: finer grid used when fitting offset curves, for a tighter inversion
CALIBRATION_OFFSET_GRID = tuple(round(x, 2) for x in np.arange(-0.5, 0.51, 0.05))
DEFAULT_ALPHA_GRID = (1.0, 0.9, 0.8, 0.7)


@dataclass(frozen=True)
class ThreatEntry:
    """One material requirement: density range plus optional mass/thickness.

    ``gt_materials`` names the ground-truth material labels this entry
    covers; it defaults to the entry material itself and exists so unknown
    materials (detected through the 'others' class) can still be scored
    against their true ground-truth labels.
    """

    material: str
    rho_range_mhu: tuple
    min_mass_g: float = None
    mass_range_g: tuple = None
    thickness_range_mm: tuple = None
    gt_materials: tuple = None

    def __post_init__(self):
        lo, hi = self.rho_range_mhu
        if not (lo < hi):
            raise ConfigError(f"rho range {self.rho_range_mhu} invalid")
        object.__setattr__(self, "rho_range_mhu", (float(lo), float(hi)))
        if self.mass_range_g is not None:
            a, b = self.mass_range_g
            if not (a < b):
                raise ConfigError(f"mass range {self.mass_range_g} invalid")
        if self.gt_materials is None:
            object.__setattr__(self, "gt_materials", (self.material,))
        else:
            object.__setattr__(self, "gt_materials", tuple(self.gt_materials))

    def passes_physical(self, stats) -> bool:
        if self.min_mass_g is not None and stats.mass_g < self.min_mass_g:
            return False
        if self.mass_range_g is not None:
            a, b = self.mass_range_g
            if not (a <= stats.mass_g <= b):
                return False
        if self.thickness_range_mm is not None:
            a, b = self.thickness_range_mm
            if not (a <= stats.thickness_mm <= b):
                return False
        return True


@dataclass(frozen=True)
class ThreatDefinition:
    """Object requirement specification: materials plus required PD."""

    entries: tuple
    required_pd: float = 0.9

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise ConfigError("threat definition needs at least one material")
        if not (0.0 < self.required_pd <= 1.0):
            raise ConfigError("required_pd must be in (0, 1]")
        object.__setattr__(self, "entries", entries)

    def materials(self):
        return [e.material for e in self.entries]

    def single(self, material) -> "ThreatDefinition":
        """Copy restricted to one material (used by calibration sweeps)."""
        for e in self.entries:
            if e.material == material:
                return ThreatDefinition(entries=(e,), required_pd=self.required_pd)
        raise ConfigError(f"material {material!r} not in threat definition")

    def to_dict(self):
        return {
            "required_pd": self.required_pd,
            "entries": [
                {
                    "material": e.material,
                    "rho_range_mhu": list(e.rho_range_mhu),
                    "min_mass_g": e.min_mass_g,
                    "mass_range_g": list(e.mass_range_g) if e.mass_range_g else None,
                    "thickness_range_mm": (
                        list(e.thickness_range_mm) if e.thickness_range_mm else None
                    ),
                    "gt_materials": list(e.gt_materials),
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            entries = tuple(
                ThreatEntry(
                    material=e["material"],
                    rho_range_mhu=tuple(e["rho_range_mhu"]),
                    min_mass_g=e.get("min_mass_g"),
                    mass_range_g=(
                        tuple(e["mass_range_g"]) if e.get("mass_range_g") else None
                    ),
                    thickness_range_mm=(
                        tuple(e["thickness_range_mm"])
                        if e.get("thickness_range_mm")
                        else None
                    ),
                    gt_materials=(
                        tuple(e["gt_materials"]) if e.get("gt_materials") else None
                    ),
                )
                for e in d["entries"]
            )
            return cls(entries=entries, required_pd=d.get("required_pd", 0.9))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad threat definition: {exc}") from exc

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class Detection:
    """One object that passed every filter of a threat definition."""

    bag_id: int
    label: int
    material: str
    score: float
    stats: object


def adjust_probs(probs: dict, offsets: dict) -> dict:
    """Additive bias per class; deliberately NOT renormalized."""
    for c, f in offsets.items():
        if not (OFFSET_MIN <= f <= OFFSET_MAX):
            raise ContractError(f"offset {f} for {c!r} outside [-0.5, 0.5]")
    return {c: p + offsets.get(c, 0.0) for c, p in probs.items()}


def scale_rho_range(rho_range, alpha: float):
    """Widen [lo, hi] to [lo*alpha, hi/alpha]; alpha in (0, 1]."""
    if not (0.0 < alpha <= 1.0):
        raise DomainError(f"alpha must be in (0, 1], got {alpha}")
    lo, hi = rho_range
    return (lo * alpha, hi / alpha)


def _argmax_class(adjusted: dict, class_order):
    best, best_v = None, -np.inf
    for c in class_order:
        v = adjusted[c]
        if v > best_v:
            best, best_v = c, v
    return best


def resolve_target_class(entry: ThreatEntry, class_order) -> str:
    """Known materials map to their own class; unknown ones route through
    'others'."""
    if entry.material in class_order:
        return entry.material
    if OTHERS_CLASS not in class_order:
        raise ConfigError(
            f"material {entry.material!r} unknown to the model and no "
            f"'{OTHERS_CLASS}' class is available"
        )
    return OTHERS_CLASS


def class_offsets_for(tdef: ThreatDefinition, offsets: dict, class_order) -> dict:
    """Translate per-material offsets into per-class offsets."""
    out = {}
    for entry in tdef.entries:
        off = offsets.get(entry.material, 0.0)
        cls = resolve_target_class(entry, class_order)
        if cls in out and out[cls] != off:
            raise ConfigError(f"conflicting offsets for class {cls!r}")
        out[cls] = off
    return out


def apply_ors(objects, tdef: ThreatDefinition, offsets=None, alphas=None):
    """Turn classified objects into detections under a threat definition.

    An object is a detection for the first entry whose target class wins the
    offset-adjusted argmax, whose alpha-scaled density range contains the
    object's density, and whose mass/thickness constraints hold.
    """
    offsets = offsets or {}
    alphas = alphas or {}
    detections = []
    for obj in objects:
        class_order = sorted(obj.probs)
        adj = adjust_probs(obj.probs, class_offsets_for(tdef, offsets, class_order))
        winner = _argmax_class(adj, class_order)
        for entry in tdef.entries:
            if resolve_target_class(entry, class_order) != winner:
                continue
            alpha = alphas.get(entry.material, 1.0)
            lo, hi = scale_rho_range(entry.rho_range_mhu, alpha)
            if not (lo <= obj.stats.density_mhu <= hi):
                continue
            if not entry.passes_physical(obj.stats):
                continue
            detections.append(
                Detection(
                    bag_id=obj.bag_id,
                    label=obj.label,
                    material=entry.material,
                    score=float(adj[winner]),
                    stats=obj.stats,
                )
            )
            break
    return detections


@dataclass
class OffsetFunction:
    """Per-material monotone offset = f(target_pd) curve with clamping."""

    material: str
    knots: list  # [(target_pd, offset), ...] sorted by target_pd
    flat: bool = False

    def __post_init__(self):
        self.knots = sorted((float(a), float(b)) for a, b in self.knots)
        if not self.knots:
            raise ConfigError("offset function needs at least one knot")
        offs = [o for _, o in self.knots]
        if any(b < a for a, b in zip(offs, offs[1:])):
            raise ConfigError("offset knots must be non-decreasing in target_pd")

    def pd_range(self):
        return (self.knots[0][0], self.knots[-1][0])

    def query(self, target_pd: float):
        """Offset for a requested PD. Returns (offset, clamped)."""
        lo, hi = self.pd_range()
        clamped = target_pd < lo or target_pd > hi
        t = min(max(target_pd, lo), hi)
        if self.flat or len(self.knots) == 1:
            off = self.knots[0][1]
        else:
            xs = np.array([a for a, _ in self.knots])
            ys = np.array([b for _, b in self.knots])
            off = float(PchipInterpolator(xs, ys)(t))
        off = min(max(off, OFFSET_MIN), OFFSET_MAX)
        return off, clamped


def offset_functions_to_dict(functions: dict) -> dict:
    return {
        m: {"knots": [[a, b] for a, b in f.knots], "flat": f.flat}
        for m, f in sorted(functions.items())
    }


def offset_functions_from_dict(d: dict) -> dict:
    return {
        m: OffsetFunction(material=m, knots=v["knots"], flat=v.get("flat", False))
        for m, v in d.items()
    }


def save_offset_functions(functions: dict, path):
    with open(path, "w") as fh:
        json.dump(offset_functions_to_dict(functions), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_offset_functions(path) -> dict:
    with open(path) as fh:
        return offset_functions_from_dict(json.load(fh))


def save_alpha_table(alphas: dict, path):
    with open(path, "w") as fh:
        json.dump(dict(sorted(alphas.items())), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_alpha_table(path) -> dict:
    with open(path) as fh:
        d = json.load(fh)
    for m, a in d.items():
        if not (0.0 < a <= 1.0):
            raise ConfigError(f"alpha {a} for {m!r} outside (0, 1]")
    return d


def calibrate_offsets(
    objects,
    segments,
    gt_bags,
    tdef: ThreatDefinition,
    evaluator,
    offset_grid=CALIBRATION_OFFSET_GRID,
    alphas=None,
):
    """Sweep the offset grid per material (treated as the sole threat),
    record achieved PD at each offset, and fit offset = f(target_pd).

    ``evaluator`` is the evaluation entry point (detections, segments,
    gt_bags, tdef) -> MatchReport; injecting it keeps this module free of a
    circular import and lets tests substitute a brute-force scorer.
    """
    functions = {}
    for material in tdef.materials():
        sub = tdef.single(material)
        pairs = []
        for off in offset_grid:
            detections = apply_ors(objects, sub, offsets={material: off}, alphas=alphas)
            report = evaluator(detections, segments, gt_bags, sub)
            pairs.append((float(off), report.pd))
        by_pd = {}
        for off, pd in pairs:  # smallest offset wins per achieved PD
            if pd not in by_pd or off < by_pd[pd]:
                by_pd[pd] = off
        knots = sorted((pd, off) for pd, off in by_pd.items())
        flat = len(knots) == 1
        if flat:
            knots = [(knots[0][0], 0.0)]  # degenerate: any offset works
        functions[material] = OffsetFunction(material=material, knots=knots, flat=flat)
    return functions


def select_alpha(
    objects,
    segments,
    gt_bags,
    tdef: ThreatDefinition,
    evaluator,
    grid=DEFAULT_ALPHA_GRID,
):
    """Descend the alpha grid from 1.0; stop once PD stops improving."""
    grid = sorted(set(grid), reverse=True)
    if any(not (0.0 < a <= 1.0) for a in grid):
        raise DomainError(f"alpha grid must lie in (0, 1], got {grid}")
    alphas = {}
    for material in tdef.materials():
        sub = tdef.single(material)
        best_alpha, best_pd = None, -1.0
        for alpha in grid:
            detections = apply_ors(objects, sub, alphas={material: alpha})
            report = evaluator(detections, segments, gt_bags, sub)
            if report.pd > best_pd:
                best_alpha, best_pd = alpha, report.pd
            else:
                break
        alphas[material] = best_alpha
    return alphas
