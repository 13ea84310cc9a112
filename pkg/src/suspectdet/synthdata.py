"""Synthetic positive/negative images with planted targets and unannotated decoys.

Targets and decoys are bright ellipses drawn from the same size and position
distributions. Targets additionally carry a dark rim ``rim_gap`` below the
background level; that rim is the only cue separating the two.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import ImageRecord, save_manifest
from .geometry import BBox

SPLITS = {"train": 0, "test": 1}


@dataclass
class SynthConfig:
    image_side: int = 64
    n_train_positive: int = 100
    n_train_negative: int = 100
    n_test_positive: int = 25
    n_test_negative: int = 25
    size_min: float = 8.0  # ellipse bounding-box side, pixels
    size_max: float = 20.0
    rim_gap: float = 0.3  # target rim sits this far below background
    rim_width: float = 2.0
    background: float = 0.35
    blob_contrast: float = 0.35
    noise: float = 0.05
    targets_per_positive: tuple[int, int] = (1, 3)
    decoys_per_negative: tuple[int, int] = (0, 2)
    images_per_patient: int = 1
    max_anchor_side: float = 64.0
    seed: int = 0

    def validate(self) -> None:
        if self.rim_gap <= 0:
            raise ValueError("rim_gap must be > 0 for targets to be separable")
        if not 0 < self.size_min <= self.size_max:
            raise ValueError("need 0 < size_min <= size_max")
        if self.size_max > self.max_anchor_side:
            raise ValueError(f"size_max {self.size_max} exceeds anchor coverage {self.max_anchor_side}")
        if self.size_max + 2 > self.image_side:
            raise ValueError("targets do not fit in the image")
        if self.targets_per_positive[0] < 1:
            raise ValueError("positive images need at least one target")
        for lo, hi in (self.targets_per_positive, self.decoys_per_negative):
            if not 0 <= lo <= hi:
                raise ValueError("count ranges must satisfy 0 <= lo <= hi")
        if self.images_per_patient < 1:
            raise ValueError("images_per_patient must be >= 1")


def _place(rng: np.random.Generator, cfg: SynthConfig, taken: list[np.ndarray], tries: int = 200):
    side = cfg.image_side
    for _ in range(tries):
        w, h = rng.uniform(cfg.size_min, cfg.size_max, size=2)
        x0 = rng.uniform(1.0, side - 1.0 - w)
        y0 = rng.uniform(1.0, side - 1.0 - h)
        box = np.array([x0, y0, x0 + w, y0 + h])
        # keep a 2 px gap so blobs never touch
        if all(
            box[0] > t[2] + 2 or t[0] > box[2] + 2 or box[1] > t[3] + 2 or t[1] > box[3] + 2
            for t in taken
        ):
            return box
    raise RuntimeError("could not place a blob without overlap; lower the counts or sizes")


def _draw(img: np.ndarray, box: np.ndarray, cfg: SynthConfig, rim: bool) -> None:
    ys, xs = np.mgrid[0 : img.shape[0], 0 : img.shape[1]] + 0.5
    cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
    a, b = (box[2] - box[0]) / 2, (box[3] - box[1]) / 2
    r = ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2
    inside = r <= 1.0
    img[inside] = cfg.background + cfg.blob_contrast
    if rim:
        ai, bi = max(a - cfg.rim_width, 0.5), max(b - cfg.rim_width, 0.5)
        core = ((xs - cx) / ai) ** 2 + ((ys - cy) / bi) ** 2 <= 1.0
        img[inside & ~core] = cfg.background - cfg.rim_gap


def render_image(rng: np.random.Generator, cfg: SynthConfig, n_targets: int, n_decoys: int):
    """Returns ``(image in [0,1], target boxes (T,4), decoy boxes (D,4))``."""
    side = cfg.image_side
    img = np.full((side, side), cfg.background, dtype=np.float64)
    taken: list[np.ndarray] = []
    targets, decoys = [], []
    for kind, n in (("t", n_targets), ("d", n_decoys)):
        for _ in range(n):
            box = _place(rng, cfg, taken)
            taken.append(box)
            (targets if kind == "t" else decoys).append(box)
            _draw(img, box, cfg, rim=kind == "t")
    img += rng.normal(0.0, cfg.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return img, np.asarray(targets).reshape(-1, 4), np.asarray(decoys).reshape(-1, 4)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255.0).astype(np.uint8)


def image_rng(cfg: SynthConfig, split: str, polarity: str, index: int) -> np.random.Generator:
    """Per-image generator so output does not depend on generation order."""
    return np.random.default_rng([cfg.seed, SPLITS[split], int(polarity == "positive"), index])


def generate_split(cfg: SynthConfig, split: str, out_dir: Path) -> list[ImageRecord]:
    n_pos = getattr(cfg, f"n_{split}_positive")
    n_neg = getattr(cfg, f"n_{split}_negative")
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for polarity, count, (lo, hi) in (
        ("positive", n_pos, cfg.targets_per_positive),
        ("negative", n_neg, cfg.decoys_per_negative),
    ):
        for i in range(count):
            rng = image_rng(cfg, split, polarity, i)
            n = int(rng.integers(lo, hi + 1))
            if polarity == "positive":
                img, boxes, _ = render_image(rng, cfg, n, 0)
            else:
                img, _, _ = render_image(rng, cfg, 0, n)
                boxes = np.zeros((0, 4))
            name = f"{polarity[:3]}_{i:04d}.png"
            path = out_dir / name
            try:
                Image.fromarray(to_uint8(img), mode="L").save(path)
            except OSError as exc:
                raise OSError(f"cannot write image {path}: {exc}") from exc
            patient = f"{split}-{polarity[:3]}-{i // cfg.images_per_patient:04d}"
            records.append(
                ImageRecord(name, patient, polarity, [BBox.from_seq(b) for b in boxes], out_dir)
            )
    save_manifest(records, out_dir / "manifest.json")
    return records


def generate_dataset(cfg: SynthConfig, out_dir) -> dict[str, list[ImageRecord]]:
    """Write ``<out>/train`` and ``<out>/test`` (PNG images + manifest.json)."""
    cfg.validate()
    out_dir = Path(out_dir)
    return {split: generate_split(cfg, split, out_dir / split) for split in SPLITS}


def dataset_stats(records: list[ImageRecord], bins=(0, 8, 16, 24, 32, 48, 64, 128)) -> dict:
    polarity = Counter(r.polarity for r in records)
    sides = [max(b.width, b.height) for r in records for b in r.boxes]
    hist, edges = np.histogram(sides, bins=bins)
    patients = {r.patient_id for r in records}
    n = len(records)
    return {
        "images": n,
        "positive_images": polarity.get("positive", 0),
        "negative_images": polarity.get("negative", 0),
        "patients": len(patients),
        "boxes": len(sides),
        "positive_fraction": polarity.get("positive", 0) / n if n else 0.0,
        "box_side_min": float(min(sides)) if sides else None,
        "box_side_max": float(max(sides)) if sides else None,
        "box_side_histogram": {f"{edges[i]:g}-{edges[i + 1]:g}": int(hist[i]) for i in range(len(hist))},
    }
