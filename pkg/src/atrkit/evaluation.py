"""Ground-truth matching, PD/PFA computation and sweep curves.

A ground-truth threat counts as detected when any detection's segment
matches it by the precision/recall rule (0.5/0.5 for bulks, 0.2/0.2 for
sheets) and the detection's material covers the ground-truth material.
A detection matching no ground-truth threat is a false alarm; the PFA
denominator is the number of annotated non-threat objects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .adaptation import ThreatDefinition
from .errors import EvaluationError, VolumeShapeError
from .volume import LabelVolume

BULK_THRESHOLD = 0.5
SHEET_THRESHOLD = 0.2


@dataclass(frozen=True)
class GroundTruthObject:
    """One annotated object: its label in the GT label volume plus truth."""

    bag_id: int
    label: int
    material: str
    form: str  # "bulk" or "sheet"
    mass_g: float
    density_mhu: float
    thickness_mm: float = None


@dataclass(frozen=True)
class MatchRow:
    """Matching outcome for one ground-truth threat."""

    bag_id: int
    label: int
    material: str
    form: str
    matched: bool
    best_p: float
    best_r: float
    matched_segment: int  # 0 when unmatched


@dataclass
class MatchReport:
    rows: list
    n_threats: int
    n_detected: int
    n_nonthreats: int
    n_false_alarms: int
    n_detections: int
    pd: float
    pfa: float
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "pd": self.pd,
            "pfa": self.pfa,
            "n_threats": self.n_threats,
            "n_detected": self.n_detected,
            "n_nonthreats": self.n_nonthreats,
            "n_false_alarms": self.n_false_alarms,
            "n_detections": self.n_detections,
            "metadata": self.metadata,
            "rows": [
                {
                    "bag_id": r.bag_id,
                    "label": r.label,
                    "material": r.material,
                    "form": r.form,
                    "matched": r.matched,
                    "best_p": r.best_p,
                    "best_r": r.best_r,
                    "matched_segment": r.matched_segment,
                }
                for r in self.rows
            ],
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def rows_tsv(self) -> str:
        lines = ["bag_id\tlabel\tmaterial\tform\tmatched\tbest_p\tbest_r\tsegment"]
        for r in self.rows:
            lines.append(
                f"{r.bag_id}\t{r.label}\t{r.material}\t{r.form}\t"
                f"{int(r.matched)}\t{r.best_p:.6f}\t{r.best_r:.6f}\t{r.matched_segment}"
            )
        lines.append(
            f"#summary\tPD={self.pd:.6f}\tPFA={self.pfa:.6f}\t"
            f"threats={self.n_threats}\tnonthreats={self.n_nonthreats}"
        )
        return "\n".join(lines) + "\n"


def match_one(gt_mask: np.ndarray, seg_mask: np.ndarray, form: str):
    """Precision/recall of one (ground truth, segment) pair plus the
    form-dependent match verdict."""
    if gt_mask.shape != seg_mask.shape:
        raise VolumeShapeError("ground truth and segment grids differ in shape")
    inter = int(np.count_nonzero(gt_mask & seg_mask))
    n_s = int(np.count_nonzero(seg_mask))
    n_g = int(np.count_nonzero(gt_mask))
    p = inter / n_s if n_s else 0.0
    r = inter / n_g if n_g else 0.0
    thr = SHEET_THRESHOLD if form == "sheet" else BULK_THRESHOLD
    return p, r, (p >= thr and r >= thr and n_s > 0)


def split_threats(gt_objects, tdef: ThreatDefinition, physical_to_gt: bool = True):
    """Partition ground-truth objects into threats and non-threats.

    A GT object is a threat when some entry covers its material and, with
    ``physical_to_gt`` (the default), its mass/thickness constraints hold.
    The entry's density range is deliberately NOT applied here: it is the
    detector's recipe, and threats whose measured density drifted outside it
    are exactly what density-range scaling exists to recover.
    Returns (threats, covering entry per threat, non_threats).
    """
    threats, entries, non_threats = [], [], []
    for gt in gt_objects:
        covering = None
        for entry in tdef.entries:
            if gt.material not in entry.gt_materials:
                continue
            if physical_to_gt:
                if entry.min_mass_g is not None and gt.mass_g < entry.min_mass_g:
                    continue
                if entry.mass_range_g is not None:
                    a, b = entry.mass_range_g
                    if not (a <= gt.mass_g <= b):
                        continue
                if entry.thickness_range_mm is not None and gt.thickness_mm is not None:
                    a, b = entry.thickness_range_mm
                    if not (a <= gt.thickness_mm <= b):
                        continue
            covering = entry
            break
        if covering is None:
            non_threats.append(gt)
        else:
            threats.append(gt)
            entries.append(covering)
    return threats, entries, non_threats


def evaluate(
    detections,
    segments: dict,
    gt_bags: dict,
    tdef: ThreatDefinition,
    strict_material: bool = True,
    physical_to_gt: bool = True,
) -> MatchReport:
    """PD/PFA over a set of bags.

    ``segments`` maps bag id -> segmented LabelVolume; ``gt_bags`` maps bag
    id -> (gt LabelVolume, [GroundTruthObject, ...]).
    """
    threats_by_bag = {}
    n_nonthreats = 0
    all_threats = []
    for bag_id, (gt_vol, gt_objects) in gt_bags.items():
        threats, entries, non_threats = split_threats(gt_objects, tdef, physical_to_gt)
        threats_by_bag[bag_id] = (gt_vol, threats, entries)
        n_nonthreats += len(non_threats)
        all_threats.extend(threats)
    if not all_threats:
        raise EvaluationError("no ground-truth threats under this definition")

    det_by_bag = {}
    for det in detections:
        det_by_bag.setdefault(det.bag_id, []).append(det)

    rows = []
    matched_detections = set()
    n_detected = 0
    for bag_id, (gt_vol, threats, entries) in threats_by_bag.items():
        seg = segments.get(bag_id)
        bag_dets = det_by_bag.get(bag_id, [])
        for gt, entry in zip(threats, entries):
            gt_mask = gt_vol.voxels == gt.label
            best_p, best_r, matched_segment = 0.0, 0.0, 0
            matched = False
            for det in bag_dets:
                if strict_material and det.material != entry.material:
                    continue
                seg_mask = seg.voxels == det.label
                p, r, ok = match_one(gt_mask, seg_mask, gt.form)
                if (p, r) > (best_p, best_r):
                    best_p, best_r = p, r
                if ok:
                    matched = True
                    if not matched_segment:
                        matched_segment = det.label
                    matched_detections.add((bag_id, det.label))
            if matched:
                n_detected += 1
            rows.append(
                MatchRow(
                    bag_id=bag_id,
                    label=gt.label,
                    material=gt.material,
                    form=gt.form,
                    matched=matched,
                    best_p=best_p,
                    best_r=best_r,
                    matched_segment=matched_segment,
                )
            )

    n_detections = len(detections)
    n_false = sum(
        1
        for det in detections
        if (det.bag_id, det.label) not in matched_detections
    )
    pd = n_detected / len(all_threats)
    pfa = n_false / n_nonthreats if n_nonthreats else 0.0
    return MatchReport(
        rows=rows,
        n_threats=len(all_threats),
        n_detected=n_detected,
        n_nonthreats=n_nonthreats,
        n_false_alarms=n_false,
        n_detections=n_detections,
        pd=pd,
        pfa=pfa,
        metadata={
            "strict_material": strict_material,
            "pfa_denominator": "gt_nonthreat_objects",
            "pfa_per_detection": n_false / n_detections if n_detections else 0.0,
        },
    )


def pd_pfa_sweep(
    objects,
    segments,
    gt_bags,
    tdef: ThreatDefinition,
    offset_grid,
    alphas=None,
):
    """Evaluate at each offset (applied to every threat material); rows
    sorted ascending by offset."""
    from .adaptation import apply_ors

    rows = []
    for off in sorted(offset_grid):
        offsets = {m: float(off) for m in tdef.materials()}
        detections = apply_ors(objects, tdef, offsets=offsets, alphas=alphas)
        report = evaluate(detections, segments, gt_bags, tdef)
        rows.append((float(off), report.pd, report.pfa))
    return rows


def sweep_tsv(rows) -> str:
    lines = ["offset\tpd\tpfa"]
    for off, pd, pfa in rows:
        lines.append(f"{off:.3f}\t{pd:.6f}\t{pfa:.6f}")
    return "\n".join(lines) + "\n"
