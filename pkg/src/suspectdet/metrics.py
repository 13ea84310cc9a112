"""Detection AP at a fixed IoU and patient-level screening metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import as_boxes, iou_matrix


@dataclass
class ScoredBox:
    image_id: str
    box: Sequence[float]
    score: float


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fn: int
    tn: int
    fp: int

    def __post_init__(self):
        if min(self.tp, self.fn, self.tn, self.fp) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp


@dataclass
class EvalReport:
    map: float
    map_undefined: bool
    confusion: ConfusionCounts
    sensitivity: float
    specificity: float
    accuracy: float
    auc: float
    roc: list[tuple[float, float, float]]  # (fpr, tpr, threshold)
    n_images: int = 0
    n_patients: int = 0
    iou_threshold: float = 0.5
    patient_threshold: float = 0.5
    undefined: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        def num(x):
            return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x

        return {
            "map": self.map,
            "map_undefined": self.map_undefined,
            "confusion": {"tp": self.confusion.tp, "fn": self.confusion.fn,
                          "tn": self.confusion.tn, "fp": self.confusion.fp},
            "sensitivity": num(self.sensitivity),
            "specificity": num(self.specificity),
            "accuracy": num(self.accuracy),
            "auc": num(self.auc),
            "roc": [{"fpr": f, "tpr": t, "threshold": _thr_json(h)} for f, t, h in self.roc],
            "n_images": self.n_images,
            "n_patients": self.n_patients,
            "iou_threshold": self.iou_threshold,
            "patient_threshold": self.patient_threshold,
            "undefined": list(self.undefined),
        }


def _thr_json(t: float):
    if math.isinf(t):
        return "inf" if t > 0 else "-inf"
    return t


def match_detections(detections: Sequence[ScoredBox], ground_truths: Mapping[str, np.ndarray],
                     iou_threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Greedy VOC matching in descending score order.

    Each detection is compared to the highest-IoU ground truth in its image; it
    is a true positive if that IoU is >= ``iou_threshold`` and the box is still
    unmatched. Returns ``(scores, is_tp)`` in processing order.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    gts = {k: as_boxes(v) for k, v in ground_truths.items()}
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    scores = np.empty(len(order))
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        det = detections[i]
        scores[rank] = det.score
        gt = gts.get(det.image_id)
        if gt is None or len(gt) == 0:
            continue
        ious = iou_matrix(np.asarray(det.box, dtype=np.float64)[None], gt)[0]
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold and not used[det.image_id][j]:
            used[det.image_id][j] = True
            tp[rank] = True
    return scores, tp


def precision_recall(is_tp: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / n_gt if n_gt else np.zeros_like(precision, dtype=float)
    return precision, recall


def ap_from_pr(precision: np.ndarray, recall: np.ndarray, mode: str = "all_point") -> float:
    if mode == "11_point":
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            p = precision[recall >= t]
            ap += (p.max() if p.size else 0.0) / 11.0
        return float(ap)
    if mode != "all_point":
        raise ValueError(f"unknown AP mode {mode!r}")
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    # precision envelope, right to left
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision_flagged(detections, ground_truths, iou_threshold: float = 0.5,
                              mode: str = "all_point") -> tuple[float, bool]:
    """``(ap, undefined)``; AP is undefined without ground truth (1.0 if also
    no detections, else 0.0)."""
    n_gt = sum(len(as_boxes(v)) for v in ground_truths.values())
    if n_gt == 0:
        return (1.0 if len(detections) == 0 else 0.0), True
    _, tp = match_detections(detections, ground_truths, iou_threshold)
    precision, recall = precision_recall(tp, n_gt)
    return ap_from_pr(precision, recall, mode), False


def average_precision(detections, ground_truths, iou_threshold: float = 0.5, mode: str = "all_point") -> float:
    return average_precision_flagged(detections, ground_truths, iou_threshold, mode)[0]


def patient_scores(image_scores: Mapping[str, Sequence[float]], image_patient: Mapping[str, str]) -> dict[str, float]:
    """Max detection confidence over each patient's images (0 without detections)."""
    unknown = sorted(set(image_scores) - set(image_patient))
    if unknown:
        raise KeyError(f"detections for unknown image {unknown[0]!r}")
    out = {p: 0.0 for p in image_patient.values()}
    for image_id, scores in image_scores.items():
        if len(scores):
            p = image_patient[image_id]
            out[p] = max(out[p], float(max(scores)))
    return out


def classify_patients(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> ConfusionCounts:
    """A patient is predicted positive iff its score is strictly above ``threshold``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"{len(scores)} scores vs {len(labels)} labels")
    pred = scores > threshold
    return ConfusionCounts(
        tp=int(np.sum(pred & labels)),
        fn=int(np.sum(~pred & labels)),
        tn=int(np.sum(~pred & ~labels)),
        fp=int(np.sum(pred & ~labels)),
    )


def sens_spec_acc(c: ConfusionCounts) -> tuple[float, float, float]:
    """Sensitivity, specificity, accuracy; NaN where a denominator is zero."""

    def ratio(num, den):
        return num / den if den else math.nan

    return (
        ratio(c.tp, c.tp + c.fn),
        ratio(c.tn, c.tn + c.fp),
        ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn),
    )


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> list[tuple[float, float, float]]:
    """``(fpr, tpr, threshold)`` for +inf, each distinct score (descending), -inf.

    At threshold ``t`` a case is called positive when its score is >= ``t``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"{len(scores)} scores vs {len(labels)} labels")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative case")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tps = np.cumsum(y)
    fps = np.cumsum(~y)
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])  # last index of each distinct score
    points = [(0.0, 0.0, math.inf)]
    points += [(fps[i] / n_neg, tps[i] / n_pos, float(s[i])) for i in last]
    points.append((1.0, 1.0, -math.inf))
    return points


def trapezoid_auc(points) -> float:
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_auc(scores, labels) -> tuple[list[tuple[float, float, float]], float]:
    points = roc_curve(scores, labels)
    return points, trapezoid_auc(points)


def evaluate_detections(
    detections: Sequence[ScoredBox],
    ground_truths: Mapping[str, np.ndarray],
    image_patient: Mapping[str, str],
    patient_label: Mapping[str, int],
    iou_threshold: float = 0.5,
    patient_threshold: float = 0.5,
    ap_mode: str = "all_point",
) -> EvalReport:
    """Full report from scored boxes. ``patient_label`` is 1 for sick patients."""
    if not image_patient:
        raise ValueError("empty evaluation set")
    ap, ap_undefined = average_precision_flagged(detections, ground_truths, iou_threshold, ap_mode)
    by_image: dict[str, list[float]] = {}
    for d in detections:
        by_image.setdefault(d.image_id, []).append(d.score)
    pscores = patient_scores(by_image, image_patient)
    patients = sorted(pscores)
    s = [pscores[p] for p in patients]
    y = [int(patient_label[p]) for p in patients]
    counts = classify_patients(s, y, patient_threshold)
    sens, spec, acc = sens_spec_acc(counts)
    undefined = [name for name, v in (("sensitivity", sens), ("specificity", spec), ("accuracy", acc))
                 if math.isnan(v)]
    if ap_undefined:
        undefined.append("map")
    if 0 < sum(y) < len(y):
        roc, auc = roc_auc(s, y)
    else:
        roc, auc = [], math.nan
        undefined.append("auc")
    return EvalReport(
        map=ap, map_undefined=ap_undefined, confusion=counts,
        sensitivity=sens, specificity=spec, accuracy=acc, auc=auc, roc=roc,
        n_images=len(image_patient), n_patients=len(patients),
        iou_threshold=iou_threshold, patient_threshold=patient_threshold, undefined=undefined,
    )
