"""Image records and the JSON manifest shared by the generator and the trainer.

Manifest layout::

    {"records": [{"image": "img_0000.png", "patient_id": "p0000",
                  "polarity": "positive",
                  "boxes": [{"x_min": 3.0, "y_min": 4.0, "x_max": 15.0, "y_max": 12.5}]}]}

``image`` paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import BBox

POLARITIES = ("positive", "negative")
BOX_KEYS = ("x_min", "y_min", "x_max", "y_max")


class ManifestError(ValueError):
    pass


@dataclass
class ImageRecord:
    image: str
    patient_id: str
    polarity: str
    boxes: list[BBox] = field(default_factory=list)
    root: Path | None = None

    @property
    def is_positive(self) -> bool:
        return self.polarity == "positive"

    @property
    def path(self) -> Path:
        return (self.root / self.image) if self.root is not None else Path(self.image)

    def box_array(self) -> np.ndarray:
        return np.asarray([b.as_tuple() for b in self.boxes], dtype=np.float64).reshape(-1, 4)

    def to_json(self) -> dict:
        return {
            "image": self.image,
            "patient_id": self.patient_id,
            "polarity": self.polarity,
            "boxes": [dict(zip(BOX_KEYS, b.as_tuple())) for b in self.boxes],
        }


def _parse_record(raw, i: int, root: Path | None) -> ImageRecord:
    if not isinstance(raw, dict):
        raise ManifestError(f"record {i}: expected an object")
    for key in ("image", "patient_id", "polarity", "boxes"):
        if key not in raw:
            raise ManifestError(f"record {i}: missing key {key!r}")
    if raw["polarity"] not in POLARITIES:
        raise ManifestError(f"record {i}: polarity must be one of {POLARITIES}, got {raw['polarity']!r}")
    try:
        boxes = [BBox(*(float(b[k]) for k in BOX_KEYS)) for b in raw["boxes"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"record {i}: bad box ({exc})") from exc
    rec = ImageRecord(str(raw["image"]), str(raw["patient_id"]), raw["polarity"], boxes, root)
    if rec.is_positive and not boxes:
        raise ManifestError(f"record {i}: positive image without boxes")
    if not rec.is_positive and boxes:
        raise ManifestError(f"record {i}: negative image carries boxes")
    return rec


def parse_manifest(doc, root: Path | None = None) -> list[ImageRecord]:
    if not isinstance(doc, dict) or not isinstance(doc.get("records"), list):
        raise ManifestError("manifest must be an object with a 'records' list")
    return [_parse_record(r, i, root) for i, r in enumerate(doc["records"])]


def load_manifest(path) -> list[ImageRecord]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    return parse_manifest(doc, path.parent)


def save_manifest(records: list[ImageRecord], path) -> None:
    path = Path(path)
    doc = {"records": [r.to_json() for r in records]}
    path.write_text(json.dumps(doc, indent=1) + "\n")


def load_image(record: ImageRecord, side: int | None = None) -> np.ndarray:
    """Grayscale float32 image in [0, 1]; square-resized to ``side`` if given.

    Boxes are not rescaled here; use :func:`scale_boxes`.
    """
    try:
        with Image.open(record.path) as im:
            im = im.convert("L")
            if side is not None and im.size != (side, side):
                im = im.resize((side, side), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read image {record.path}: {exc}") from exc


def image_size(record: ImageRecord) -> tuple[int, int]:
    with Image.open(record.path) as im:
        return im.size


def scale_boxes(boxes: np.ndarray, from_size: tuple[int, int], side: int) -> np.ndarray:
    w, h = from_size
    out = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    out[:, [0, 2]] *= side / w
    out[:, [1, 3]] *= side / h
    return out
