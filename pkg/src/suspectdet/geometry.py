"""Box arithmetic: IoU, delta encoding, non-maximum suppression.

Boxes are corner-form ``(x_min, y_min, x_max, y_max)`` in continuous pixel
coordinates. Area is ``(x_max - x_min) * (y_max - y_min)``; there is no
``+1`` pixel convention anywhere in the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# cap for predicted log-scales; exp() beyond it is never a useful box
MAX_LOG_SCALE = math.log(1000.0 / 16)


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(f"invalid box {self.as_tuple()}: min must not exceed max")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "BBox":
        return cls(*(float(v) for v in seq))


@dataclass(frozen=True)
class BoxDelta:
    dx: float
    dy: float
    dw: float
    dh: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.dx, self.dy, self.dw, self.dh)


def as_boxes(boxes) -> np.ndarray:
    """Coerce a box collection to a float64 ``(N, 4)`` array."""
    if isinstance(boxes, BBox):
        return np.asarray([boxes.as_tuple()], dtype=np.float64)
    if len(boxes) and isinstance(boxes[0], BBox):
        return np.asarray([b.as_tuple() for b in boxes], dtype=np.float64)
    arr = np.asarray(boxes, dtype=np.float64)
    return arr.reshape(-1, 4)


def validate_boxes(boxes: np.ndarray) -> None:
    bad = (boxes[:, 0] > boxes[:, 2]) | (boxes[:, 1] > boxes[:, 3])
    if np.any(bad):
        raise ValueError(f"invalid box {boxes[np.argmax(bad)].tolist()}: min must not exceed max")


def box_area(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou(a: BBox, b: BBox) -> float:
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays -> ``(N, M)``."""
    a = as_boxes(a)
    b = as_boxes(b)
    validate_boxes(a)
    validate_boxes(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def _center_size(boxes: np.ndarray):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


def encode_boxes(gt, anchors) -> np.ndarray:
    """Regression targets of ``gt`` relative to ``anchors`` (row-aligned)."""
    gt = as_boxes(gt)
    anchors = as_boxes(anchors)
    ax, ay, aw, ah = _center_size(anchors)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchor with non-positive side cannot be used for encoding")
    gx, gy, gw, gh = _center_size(gt)
    with np.errstate(divide="ignore"):
        return np.stack(
            [(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
        )


def decode_boxes(deltas, anchors, clip: float | tuple[float, float] | None = None,
                 max_log_scale: float | None = None) -> np.ndarray:
    """Apply ``(N, 4)`` deltas to anchors; optionally clip to ``[0, W] x [0, H]``.

    ``clip`` is either a square side or a ``(width, height)`` pair.
    ``max_log_scale`` caps ``dw``/``dh`` (use for network predictions).
    """
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = as_boxes(anchors)
    ax, ay, aw, ah = _center_size(anchors)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchor with non-positive side cannot be used for decoding")
    cx = deltas[:, 0] * aw + ax
    cy = deltas[:, 1] * ah + ay
    dw, dh = deltas[:, 2], deltas[:, 3]
    if max_log_scale is not None:
        dw, dh = np.minimum(dw, max_log_scale), np.minimum(dh, max_log_scale)
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if clip is not None:
        out = clip_boxes(out, clip)
    return out


def clip_boxes(boxes: np.ndarray, extent) -> np.ndarray:
    width, height = (extent, extent) if np.isscalar(extent) else extent
    out = boxes.copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0.0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0.0, height)
    return out


def encode(gt: BBox, anchor: BBox) -> BoxDelta:
    return BoxDelta(*encode_boxes(gt, anchor)[0].tolist())


def decode(delta: BoxDelta, anchor: BBox, clip=None) -> BBox:
    return BBox.from_seq(decode_boxes([delta.as_tuple()], anchor, clip)[0])


def nms(boxes, scores, iou_threshold: float = 0.7, max_keep: int | None = None) -> list[int]:
    """Greedy suppression in descending score order; returns kept indices.

    Equal scores are visited in ascending index order. A box is dropped when
    its IoU with an already kept box is strictly greater than the threshold.
    ``max_keep`` stops early; the result is the prefix of the full run.
    """
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError(f"{len(boxes)} boxes but {len(scores)} scores")
    if len(boxes) == 0:
        return []
    order = np.lexsort((np.arange(len(scores)), -scores))
    areas = box_area(boxes)
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = order[1:]
        lt = np.maximum(boxes[i, :2], boxes[rest, :2])
        rb = np.minimum(boxes[i, 2:], boxes[rest, 2:])
        wh = np.clip(rb - lt, 0.0, None)
        inter = wh[:, 0] * wh[:, 1]
        union = areas[i] + areas[rest] - inter
        ovr = np.zeros_like(inter)
        np.divide(inter, union, out=ovr, where=union > 0)
        order = rest[ovr <= iou_threshold]
    return keep
