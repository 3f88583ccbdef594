"""Material classification: normalized histogram features, one-vs-rest
linear max-margin classifier with per-class sigmoid calibration, and
Gaussian synthesis of training features for the "others" class.

Training is deterministic: full-batch subgradient descent on the
regularized hinge loss with a fixed step schedule and iterate averaging,
seeded only for the calibration fold split and feature synthesis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ContractError, LabelNotFoundError, TrainingError
from .volume import LabelVolume, RawVolume, ObjectStats, object_stats

OTHERS_CLASS = "others"


@dataclass(frozen=True)
class FeatureConfig:
    """MHU range and bin count for the normalized histogram feature."""

    lo_mhu: int = 800
    hi_mhu: int = 2200
    bins: int = 128

    def __post_init__(self):
        if self.lo_mhu >= self.hi_mhu or self.bins <= 0:
            raise ConfigError("feature config needs lo < hi and bins > 0")

    @property
    def bin_centers(self) -> np.ndarray:
        edges = np.linspace(self.lo_mhu, self.hi_mhu, self.bins + 1)
        return 0.5 * (edges[:-1] + edges[1:])


@dataclass(frozen=True)
class SynthSpec:
    """Sampling recipe for synthetic 'others' features (Gaussian bumps)."""

    known_ranges: tuple  # ((lo, hi), ...) MHU bands of the known materials
    feature: FeatureConfig = FeatureConfig()
    amplitude: float = 1.0  # irrelevant after L1 normalization
    sigma_range: tuple = (15.0, 60.0)
    count: int = 200
    seed: int = 0

    def admissible_mu_intervals(self):
        """Sub-intervals of the feature window outside every known range."""
        lo, hi = float(self.feature.lo_mhu), float(self.feature.hi_mhu)
        cuts = sorted((max(lo, a), min(hi, b)) for a, b in self.known_ranges)
        intervals = []
        cursor = lo
        for a, b in cuts:
            if a > cursor:
                intervals.append((cursor, a))
            cursor = max(cursor, b)
        if cursor < hi:
            intervals.append((cursor, hi))
        intervals = [(a, b) for a, b in intervals if b > a]
        if not intervals:
            raise ConfigError("known ranges cover the whole feature window")
        return intervals


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and calibration settings for the linear classifier."""

    l2: float = 1e-3
    iterations: int = 1500
    calibration_fraction: float = 0.25
    max_calibration_slope: float = 1.5

    def __post_init__(self):
        if self.l2 <= 0 or self.iterations <= 0:
            raise ConfigError("l2 and iterations must be positive")
        if not (0.0 < self.calibration_fraction < 1.0):
            raise ConfigError("calibration_fraction must be in (0, 1)")
        if self.max_calibration_slope <= 0:
            raise ConfigError("max_calibration_slope must be positive")


@dataclass
class MaterialModel:
    """Per-class weights, biases and sigmoid calibration constants."""

    feature: FeatureConfig
    classes: list
    weights: np.ndarray  # (n_classes, bins)
    biases: np.ndarray  # (n_classes,)
    calibration: np.ndarray  # (n_classes, 2) sigmoid (A, B) per class
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "version": 1,
            "feature": {
                "lo_mhu": self.feature.lo_mhu,
                "hi_mhu": self.feature.hi_mhu,
                "bins": self.feature.bins,
            },
            "classes": list(self.classes),
            "weights": [[float(x) for x in row] for row in self.weights],
            "biases": [float(x) for x in self.biases],
            "calibration": [[float(a), float(b)] for a, b in self.calibration],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            feature = FeatureConfig(**d["feature"])
            return cls(
                feature=feature,
                classes=list(d["classes"]),
                weights=np.asarray(d["weights"], dtype=np.float64),
                biases=np.asarray(d["biases"], dtype=np.float64),
                calibration=np.asarray(d["calibration"], dtype=np.float64),
                meta=dict(d.get("meta", {})),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad model file: {exc}") from exc

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def extract_feature(
    raw: RawVolume, labels: LabelVolume, label: int, cfg: FeatureConfig
) -> np.ndarray:
    """L1-normalized intensity histogram of one object; out-of-range
    intensities clamp to the edge bins."""
    vals = raw.voxels[labels.voxels == label]
    if label <= 0 or vals.size == 0:
        raise LabelNotFoundError(f"label {label} not present")
    return feature_from_values(vals, cfg)


def feature_from_values(vals: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    clipped = np.clip(vals.astype(np.float64), cfg.lo_mhu, cfg.hi_mhu)
    counts, _ = np.histogram(clipped, bins=cfg.bins, range=(cfg.lo_mhu, cfg.hi_mhu))
    total = counts.sum()
    if total == 0:
        raise ContractError("empty feature histogram")
    return counts.astype(np.float64) / total


def synth_others(spec: SynthSpec):
    """Synthesize L1-normalized Gaussian-bump features with mean outside the
    known material density ranges."""
    rng = np.random.default_rng(spec.seed)
    intervals = spec.admissible_mu_intervals()
    lengths = np.array([b - a for a, b in intervals])
    weights = lengths / lengths.sum()
    centers = spec.feature.bin_centers
    lo_s, hi_s = spec.sigma_range
    feats = []
    for _ in range(spec.count):
        idx = rng.choice(len(intervals), p=weights)
        a, b = intervals[idx]
        mu = rng.uniform(a, b)
        sigma = rng.uniform(lo_s, hi_s)
        g = spec.amplitude * np.exp(-((centers - mu) ** 2) / sigma**2)
        total = g.sum()
        if total <= 0:  # pragma: no cover - sigma range keeps mass in window
            continue
        feats.append(g / total)
    return feats


def _fit_hinge_ovr(X, targets, sample_weights, cfg: TrainConfig):
    """Deterministic averaged subgradient descent on L2-regularized hinge.

    Bias handled via an augmented constant feature. Returns (w, b).
    """
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    w = np.zeros(d + 1)
    w_sum = np.zeros(d + 1)
    lam = cfg.l2
    half = cfg.iterations // 2
    for t in range(1, cfg.iterations + 1):
        margins = targets * (Xa @ w)
        viol = margins < 1.0
        grad = lam * w
        if viol.any():
            coef = (sample_weights * targets)[viol]
            grad = grad - (coef[:, None] * Xa[viol]).sum(axis=0) / n
        eta = 1.0 / (lam * (t + 10.0))
        w = w - eta * grad
        norm = np.linalg.norm(w)
        cap = 2.0 / np.sqrt(lam)
        if norm > cap:
            w = w * (cap / norm)
        if t > half:
            w_sum += w
    w_avg = w_sum / (cfg.iterations - half)
    return w_avg[:-1], float(w_avg[-1])


def _refit_intercept(scores, t, A, max_iter=100):
    """1-D Newton refit of B with the slope A held fixed."""
    B = 0.0
    for _ in range(max_iter):
        p = expit(-(A * scores + B))
        g = float((t - p).sum())
        h = float(np.maximum(p * (1 - p), 1e-12).sum()) + 1e-9
        dB = g / h
        B = B - dB
        if abs(dB) < 1e-10:
            break
    return B


def _fit_platt(scores, is_positive, max_iter=100, max_slope=None):
    """Platt sigmoid fit: P(y=1|s) = 1 / (1 + exp(A*s + B)), via Newton
    iterations with the usual smoothed targets.

    On separable folds the unconstrained slope diverges and the calibrated
    probabilities saturate at 0/1; ``max_slope`` bounds |A| (refitting B)
    so probabilities stay graded near the class boundary."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(is_positive, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    hi = (n_pos + 1.0) / (n_pos + 2.0)
    lo = 1.0 / (n_neg + 2.0)
    t = np.where(y, hi, lo)
    A, B = 0.0, np.log((n_neg + 1.0) / (n_pos + 1.0))
    for _ in range(max_iter):
        z = A * scores + B
        p = expit(-z)
        g = t - p  # d(nll)/dz for p = sigmoid(-z)
        gA, gB = float((g * scores).sum()), float(g.sum())
        h = np.maximum(p * (1 - p), 1e-12)
        hAA = float((h * scores * scores).sum()) + 1e-9
        hAB = float((h * scores).sum())
        hBB = float(h.sum()) + 1e-9
        det = hAA * hBB - hAB * hAB
        dA = (hBB * gA - hAB * gB) / det
        dB = (hAA * gB - hAB * gA) / det
        A, B = A - dA, B - dB
        if abs(dA) < 1e-10 and abs(dB) < 1e-10:
            break
    if max_slope is not None and abs(A) > max_slope:
        A = max_slope if A > 0 else -max_slope
        B = _refit_intercept(scores, t, A)
    return A, B


def _sigmoid_cal(score, ab):
    return expit(-(ab[0] * score + ab[1]))


def train(features, class_labels, cfg: TrainConfig, seed: int, feature_cfg=None):
    """Fit the one-vs-rest classifier plus calibration on a held-out fold.

    Class imbalance is handled with per-sample weights inversely
    proportional to class counts. The final weight vectors are refit on all
    data; calibration constants come from the held-out fold.
    """
    feature_cfg = feature_cfg or FeatureConfig()
    X = np.asarray(features, dtype=np.float64)
    y = list(class_labels)
    if X.ndim != 2 or len(y) != X.shape[0]:
        raise ContractError("features and labels disagree in length")
    classes = sorted(set(y))
    if len(classes) < 2:
        raise TrainingError("need at least two classes to train")
    y_idx = np.array([classes.index(c) for c in y])
    counts = np.bincount(y_idx, minlength=len(classes))
    sample_weights = (len(y) / (len(classes) * counts))[y_idx]

    rng = np.random.default_rng(seed)
    holdout = np.zeros(len(y), dtype=bool)
    for c in range(len(classes)):
        idx = np.flatnonzero(y_idx == c)
        idx = idx[rng.permutation(len(idx))]
        n_hold = max(1, int(round(cfg.calibration_fraction * len(idx))))
        if n_hold >= len(idx):
            raise TrainingError(f"class {classes[c]} too small for a held-out fold")
        holdout[idx[:n_hold]] = True

    fit_idx = ~holdout
    weights = np.zeros((len(classes), X.shape[1]))
    biases = np.zeros(len(classes))
    calibration = np.zeros((len(classes), 2))
    for c in range(len(classes)):
        t_fit = np.where(y_idx[fit_idx] == c, 1.0, -1.0)
        w, b = _fit_hinge_ovr(X[fit_idx], t_fit, sample_weights[fit_idx], cfg)
        hold_scores = X[holdout] @ w + b
        calibration[c] = _fit_platt(
            hold_scores, y_idx[holdout] == c, max_slope=cfg.max_calibration_slope
        )
        t_all = np.where(y_idx == c, 1.0, -1.0)
        weights[c], biases[c] = _fit_hinge_ovr(X, t_all, sample_weights, cfg)

    return MaterialModel(
        feature=feature_cfg,
        classes=classes,
        weights=weights,
        biases=biases,
        calibration=calibration,
        meta={
            "seed": int(seed),
            "class_counts": {classes[c]: int(counts[c]) for c in range(len(classes))},
            "l2": cfg.l2,
            "iterations": cfg.iterations,
            "calibration_fraction": cfg.calibration_fraction,
            "calibration_scheme": "one-vs-rest sigmoid, normalized",
        },
    )


def predict_proba(model: MaterialModel, feature) -> dict:
    """Calibrated class probabilities; always a simplex over model.classes."""
    x = np.asarray(feature, dtype=np.float64)
    if x.shape != (model.weights.shape[1],):
        raise ContractError(
            f"feature length {x.shape} does not match model ({model.weights.shape[1]},)"
        )
    scores = model.weights @ x + model.biases
    q = np.array(
        [float(_sigmoid_cal(s, ab)) for s, ab in zip(scores, model.calibration)]
    )
    total = q.sum()
    if total <= 0:  # pragma: no cover - sigmoid outputs are positive
        q = np.full_like(q, 1.0 / len(q))
        total = 1.0
    p = q / total
    return {c: float(v) for c, v in zip(model.classes, p)}


@dataclass(frozen=True)
class ClassifiedObject:
    """One segmented object with class probabilities and physical stats."""

    bag_id: int
    label: int
    probs: dict
    stats: ObjectStats


def classify_objects(
    raw: RawVolume, labels: LabelVolume, model: MaterialModel, bag_id: int = 0
):
    """Feature extraction + calibrated prediction + stats for every label."""
    out = []
    for lab in labels.label_values():
        feat = extract_feature(raw, labels, lab, model.feature)
        out.append(
            ClassifiedObject(
                bag_id=bag_id,
                label=lab,
                probs=predict_proba(model, feat),
                stats=object_stats(raw, labels, lab),
            )
        )
    return out


def binary_threat_decision(probs: dict, threat_classes) -> bool:
    """Binary-mode reduction: threat iff the summed threat-class probability
    exceeds the 'others' probability."""
    threat = sum(probs[c] for c in threat_classes)
    return threat > probs.get(OTHERS_CLASS, 1.0 - threat)
