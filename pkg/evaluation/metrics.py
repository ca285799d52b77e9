"""
Point metrics, ROC / AUC, TPR at fixed FPR levels, and per-class plus
macro-averaged multi-class evaluation. Reports serialise to JSON with fixed
keys and ROC points to CSV for external plotting.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import auc as trapezoid_area
from sklearn.metrics import confusion_matrix
from sklearn.metrics import roc_curve as sk_roc_curve

from config.errors import DegenerateLabels, LengthMismatch, ShapeMismatch

logger = logging.getLogger(__name__)

DEFAULT_FPR_LEVELS = (1e-4, 1e-3, 1e-2, 1e-1)
GRID_POINTS = 1001
_FPR_TOL = 1e-12


def _arrays(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(scores) != len(labels):
        raise LengthMismatch(f"{len(scores)} scores but {len(labels)} labels")
    return scores, labels


def confusion(scores, labels, threshold: float = 0.5) -> Tuple[int, int, int, int]:
    """(tp, fp, tn, fn); a score equal to the threshold counts as positive."""
    scores, labels = _arrays(scores, labels)
    if len(scores) == 0:
        return 0, 0, 0, 0
    predicted = (scores >= threshold).astype(np.int64)
    tn, fp, fn, tp = confusion_matrix(labels, predicted, labels=[0, 1]).ravel()
    return int(tp), int(fp), int(tn), int(fn)


@dataclass
class PointMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    undefined: Tuple[str, ...] = ()

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return self.accuracy, self.precision, self.recall, self.f1


def _ratio(num: float, den: float, name: str, undefined: List[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def prf1(tp: int, fp: int, tn: int, fn: int) -> PointMetrics:
    """Zero denominators yield 0 and the metric's name in `undefined`."""
    undefined: List[str] = []
    accuracy = _ratio(tp + tn, tp + fp + tn + fn, "accuracy", undefined)
    precision = _ratio(tp, tp + fp, "precision", undefined)
    recall = _ratio(tp, tp + fn, "recall", undefined)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", undefined)
    return PointMetrics(accuracy, precision, recall, f1, tuple(undefined))


def _check_both_classes(labels: np.ndarray) -> None:
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == len(labels):
        raise DegenerateLabels(f"ROC needs positives and negatives; got {n_pos} of {len(labels)} positive")


def roc_points(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    """FPR and TPR arrays over every distinct score (ties form one step), from (0,0) to (1,1)."""
    scores, labels = _arrays(scores, labels)
    _check_both_classes(labels)
    fpr, tpr, _ = sk_roc_curve(labels, scores, drop_intermediate=False)
    return fpr, tpr


def roc_curve(scores, labels) -> List[Tuple[float, float]]:
    fpr, tpr = roc_points(scores, labels)
    return [(float(f), float(t)) for f, t in zip(fpr, tpr)]


def auc(scores, labels) -> float:
    fpr, tpr = roc_points(scores, labels)
    return float(trapezoid_area(fpr, tpr))


def tpr_at_fpr(scores, labels, levels: Sequence[float] = DEFAULT_FPR_LEVELS) -> Dict[float, float]:
    """Highest TPR among ROC operating points with FPR <= level; no interpolation."""
    fpr, tpr = roc_points(scores, labels)
    return {float(level): float(tpr[fpr <= level + _FPR_TOL].max()) for level in levels}


def interpolated_tpr(fpr: np.ndarray, tpr: np.ndarray, grid: np.ndarray) -> np.ndarray:
    # at an FPR shared by several points np.interp returns the last, i.e. highest, TPR
    return np.interp(grid, fpr, tpr)


def level_key(level: float) -> str:
    return f"{level:g}"


@dataclass
class EvalReport:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    accuracy: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    undefined: List[str] = field(default_factory=list)
    roc: List[Tuple[float, float]] = field(default_factory=list)
    auc: Optional[float] = None
    tpr_at_fpr: Dict[str, float] = field(default_factory=dict)
    per_class: Dict[str, Dict] = field(default_factory=dict)
    macro: Dict = field(default_factory=dict)
    threshold: float = 0.5
    n: int = 0

    def to_dict(self, include_roc: bool = True) -> Dict:
        data = {
            "n": self.n,
            "threshold": self.threshold,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "undefined": list(self.undefined),
            "auc": self.auc,
            "tpr_at_fpr": dict(self.tpr_at_fpr),
            "per_class": self.per_class,
            "macro": self.macro,
        }
        if include_roc:
            data["roc"] = [list(point) for point in self.roc]
        return data

    def write_json(self, path: str, extra: Optional[Dict] = None) -> None:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        out.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")

    def write_roc_csv(self, path: str) -> None:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(self.roc, columns=["fpr", "tpr"]).to_csv(out, index=False)


def binary_report(scores, labels, threshold: float = 0.5, levels: Sequence[float] = DEFAULT_FPR_LEVELS,
                  allow_degenerate: bool = False) -> EvalReport:
    """
    Point metrics at `threshold` plus ROC, AUC and TPR@FPR. With
    `allow_degenerate`, a single-class set still gets point metrics and the
    ROC parts are reported as undefined.
    """
    scores, labels = _arrays(scores, labels)
    tp, fp, tn, fn = confusion(scores, labels, threshold)
    point = prf1(tp, fp, tn, fn)
    report = EvalReport(tp, fp, tn, fn, *point.as_tuple(), undefined=list(point.undefined),
                        threshold=threshold, n=len(scores))
    try:
        fpr, tpr = roc_points(scores, labels)
    except DegenerateLabels:
        if not allow_degenerate:
            raise
        report.undefined.append("roc")
        return report
    report.roc = [(float(f), float(t)) for f, t in zip(fpr, tpr)]
    report.auc = float(trapezoid_area(fpr, tpr))
    report.tpr_at_fpr = {level_key(level): float(tpr[fpr <= level + _FPR_TOL].max()) for level in levels}
    return report


def multiclass_report(probs, labels, class_names: Optional[Sequence[str]] = None,
                      grid_points: int = GRID_POINTS) -> Tuple[Dict[str, Dict], Dict]:
    """
    One-vs-rest accuracy/precision/recall/F1 (prediction = argmax) and AUC per
    class, plus the macro ROC: per-class TPR interpolated onto a shared FPR
    grid, averaged, and integrated by trapezoid.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ShapeMismatch(f"probs must be (B, K) with K >= 2, got {probs.shape}")
    if len(probs) != len(labels):
        raise LengthMismatch(f"{len(probs)} score rows but {len(labels)} labels")
    k = probs.shape[1]
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    predicted = probs.argmax(axis=1)

    grid = np.linspace(0.0, 1.0, grid_points)
    per_class, curves = {}, []
    for c in range(k):
        is_c = (labels == c).astype(np.int64)
        if is_c.sum() == 0 or is_c.sum() == len(is_c):
            raise DegenerateLabels(f"class {names[c]!r} needs both members and non-members for ROC")
        tp, fp, tn, fn = confusion((predicted == c).astype(np.float64), is_c, threshold=0.5)
        point = prf1(tp, fp, tn, fn)
        fpr, tpr = roc_points(probs[:, c], is_c)
        curves.append(interpolated_tpr(fpr, tpr, grid))
        per_class[names[c]] = {
            "accuracy": point.accuracy, "precision": point.precision, "recall": point.recall, "f1": point.f1,
            "auc": float(trapezoid_area(fpr, tpr)), "support": int(is_c.sum()),
        }

    mean_tpr = np.mean(curves, axis=0)
    macro = {
        "auc": float(trapezoid_area(grid, mean_tpr)),
        "accuracy": float(np.mean([m["accuracy"] for m in per_class.values()])),
        "f1": float(np.mean([m["f1"] for m in per_class.values()])),
        "roc": [[float(f), float(t)] for f, t in zip(grid, mean_tpr)],
    }
    return per_class, macro


def evaluate_probs(probs, class_ids, class_names: Sequence[str], threshold: float = 0.5,
                   levels: Sequence[float] = DEFAULT_FPR_LEVELS, grid_points: int = GRID_POINTS,
                   allow_degenerate: bool = False) -> EvalReport:
    """
    Binary detection metrics on p(not benign) = 1 - p(benign), plus per-class
    and macro metrics when every class is present.
    """
    probs = np.asarray(probs, dtype=np.float64)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    report = binary_report(1.0 - probs[:, 0], (class_ids != 0).astype(np.int64), threshold, levels,
                           allow_degenerate=allow_degenerate)
    try:
        report.per_class, report.macro = multiclass_report(probs, class_ids, class_names, grid_points)
    except DegenerateLabels as e:
        if not allow_degenerate:
            raise
        logger.debug("per-class metrics skipped: %s", e)
    return report
