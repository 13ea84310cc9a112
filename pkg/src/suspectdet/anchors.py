"""Dense anchors, IoU label assignment and the two anchor samplers.

Label codes: ``POSITIVE = 1``, ``NEGATIVE = 0``, ``IGNORE = -1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import as_boxes, encode_boxes, iou_matrix

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1

BATCH_SIZE = 256
POS_IOU = 0.7
NEG_IOU = 0.3


@dataclass
class AnchorConfig:
    # square side lengths in pixels; the (4^2, ..., 64^2) notation is read as areas
    scales: list[float] = field(default_factory=lambda: [4.0, 8.0, 16.0, 32.0, 64.0])
    aspect_ratios: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    stride: int = 16

    @property
    def per_location(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)


@dataclass
class AnchorField:
    anchors: np.ndarray
    labels: np.ndarray
    scores: np.ndarray | None = None
    reg_targets: np.ndarray | None = None  # (N, 4); rows meaningful only where labels == POSITIVE


def base_shapes(config: AnchorConfig) -> np.ndarray:
    """(A, 2) widths/heights for one location, scale-major then ratio."""
    shapes = []
    for s in config.scales:
        for r in config.aspect_ratios:
            shapes.append((s * math.sqrt(r), s / math.sqrt(r)))
    return np.asarray(shapes, dtype=np.float64)


def generate_anchors(image_side: int, config: AnchorConfig) -> np.ndarray:
    """All anchors for a square image, ordered (row, column, anchor shape)."""
    if config.stride <= 0 or image_side % config.stride:
        raise ValueError(f"stride {config.stride} does not divide image side {image_side}")
    n = image_side // config.stride
    centers = (np.arange(n, dtype=np.float64) + 0.5) * config.stride
    cy, cx = np.meshgrid(centers, centers, indexing="ij")
    cx = cx.reshape(-1, 1)
    cy = cy.reshape(-1, 1)
    wh = base_shapes(config)
    w = wh[None, :, 0]
    h = wh[None, :, 1]
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)
    return boxes.reshape(-1, 4)


def assign_labels(anchors, gt, pos_iou: float = POS_IOU, neg_iou: float = NEG_IOU) -> np.ndarray:
    """Binary anchor labels against ground truth (empty ``gt`` -> all negative).

    Positive: the anchor(s) with the highest IoU for some ground-truth box, or
    IoU above ``pos_iou`` with any box. Negative: max IoU below ``neg_iou``
    and not positive. Everything else is ignored.
    """
    anchors = as_boxes(anchors)
    gt = as_boxes(gt)
    labels = np.full(len(anchors), IGNORE, dtype=np.int8)
    if len(gt) == 0:
        labels[:] = NEGATIVE
        return labels
    ious = iou_matrix(anchors, gt)
    best = ious.max(axis=1)
    labels[best < neg_iou] = NEGATIVE
    labels[best > pos_iou] = POSITIVE
    gt_best = ious.max(axis=0)
    # a box no anchor touches cannot nominate a positive
    hits = (ious == gt_best[None, :]) & (gt_best[None, :] > 0)
    labels[hits.any(axis=1)] = POSITIVE
    return labels


def build_field(anchors, gt) -> AnchorField:
    """Labels plus regression targets toward each anchor's best-matching box."""
    anchors = as_boxes(anchors)
    gt = as_boxes(gt)
    labels = assign_labels(anchors, gt)
    targets = np.zeros((len(anchors), 4))
    if len(gt):
        match = iou_matrix(anchors, gt).argmax(axis=1)
        pos = labels == POSITIVE
        targets[pos] = encode_boxes(gt[match[pos]], anchors[pos])
    return AnchorField(anchors=anchors, labels=labels, reg_targets=targets)


def sample_positive_image(
    labels, rng: np.random.Generator, batch_size: int = BATCH_SIZE, positive_fraction: float = 0.5
) -> np.ndarray:
    """Uniform sample of ``batch_size`` anchors with up to half positives.

    A shortfall of positives is padded with negatives; ignored anchors are
    never drawn.
    """
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == NEGATIVE)
    if len(pos) + len(neg) < batch_size:
        raise ValueError(
            f"need {batch_size} labelled anchors, have {len(pos)} positive + {len(neg)} negative"
        )
    n_pos = min(len(pos), int(batch_size * positive_fraction))
    n_neg = batch_size - n_pos
    if n_neg > len(neg):
        n_neg = len(neg)
        n_pos = batch_size - n_neg
    chosen_pos = rng.choice(pos, size=n_pos, replace=False) if n_pos else pos[:0]
    chosen_neg = rng.choice(neg, size=n_neg, replace=False)
    return np.concatenate([chosen_pos, chosen_neg])


def sample_top_likelihood(scores, k: int = BATCH_SIZE) -> np.ndarray:
    """Indices of the ``k`` highest scores, descending; ties go to the lower index.

    Fewer than ``k`` anchors returns all of them.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = len(scores)
    if n <= k:
        return np.lexsort((np.arange(n), -scores))
    # partition first, then resolve ties around the cut exactly
    kth = np.partition(-scores, k - 1)[k - 1]
    strictly_above = np.flatnonzero(-scores < kth)
    at_cut = np.flatnonzero(-scores == kth)[: k - len(strictly_above)]
    chosen = np.concatenate([strictly_above, at_cut])
    return chosen[np.lexsort((chosen, -scores[chosen]))]
