"""Inference over a test manifest and the report files written from it."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import ImageRecord, image_size, load_image
from .geometry import BBox
from .metrics import EvalReport, ScoredBox, evaluate_detections
from .model import Detection, Detector

REPORT_JSON = "report.json"
ROC_CSV = "roc.csv"
ROC_HEADER = ["fpr", "tpr", "threshold"]
OVERLAY_HEADER = ["run", "fpr", "tpr", "threshold"]

DetectFn = Callable[[ImageRecord], Sequence[Detection]]


def image_key(record: ImageRecord) -> str:
    return record.image


def model_detector(model: Detector, score_floor: float) -> DetectFn:
    """Wrap a model as record -> detections in the record's own pixel frame."""
    side = model.image_side

    def detect(record: ImageRecord) -> list[Detection]:
        img = torch.from_numpy(load_image(record, side))
        dets = model.predict(img, score_floor=score_floor)
        w, h = image_size(record)
        if (w, h) == (side, side):
            return dets
        for d in dets:
            d.box = BBox(d.box.x_min * w / side, d.box.y_min * h / side,
                         d.box.x_max * w / side, d.box.y_max * h / side)
        return dets

    return detect


def evaluate_records(records: Sequence[ImageRecord], detect: DetectFn, iou_threshold: float = 0.5,
                     patient_threshold: float = 0.5, ap_mode: str = "all_point") -> EvalReport:
    """Run ``detect`` on every record and score the result.

    ``detect`` is any callable (a trained model via :func:`model_detector`, or a
    fixed oracle in tests).
    """
    if not records:
        raise ValueError("empty test set")
    detections: list[ScoredBox] = []
    gts: dict[str, np.ndarray] = {}
    image_patient: dict[str, str] = {}
    patient_label: dict[str, int] = {}
    for rec in records:
        key = image_key(rec)
        gts[key] = rec.box_array()
        image_patient[key] = rec.patient_id
        patient_label[rec.patient_id] = max(patient_label.get(rec.patient_id, 0), int(rec.is_positive))
        detections += [ScoredBox(key, d.box.as_tuple(), d.score) for d in detect(rec)]
    return evaluate_detections(detections, gts, image_patient, patient_label,
                               iou_threshold, patient_threshold, ap_mode)


def write_report(report: EvalReport, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / REPORT_JSON
    json_path.write_text(json.dumps(report.to_json(), indent=2) + "\n")
    roc_path = out / ROC_CSV
    write_roc_csv(report.roc, roc_path)
    return json_path, roc_path


def write_roc_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROC_HEADER)
        w.writerows([f, t, _fmt_thr(h)] for f, t, h in points)


def _fmt_thr(h):
    return ("inf" if h > 0 else "-inf") if math.isinf(h) else h


def read_report_roc(path) -> list[tuple[float, float, float]]:
    """ROC points from a ``report.json`` written by :func:`write_report`."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read report {path}: {exc}") from exc
    if "roc" not in doc:
        raise ValueError(f"{path}: not an evaluation report (no 'roc')")
    return [(float(p["fpr"]), float(p["tpr"]), float(p["threshold"])) for p in doc["roc"]]


def write_roc_overlay(curves: dict[str, list], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OVERLAY_HEADER)
        for name, points in curves.items():
            w.writerows([name, f, t, _fmt_thr(h)] for f, t, h in points)
