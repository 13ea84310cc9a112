"""Two-stage detector: small conv backbone, RPN, RoI max pooling, detection head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_pool as tv_roi_pool

from .anchors import AnchorConfig, generate_anchors
from .geometry import MAX_LOG_SCALE, BBox, decode_boxes, nms

# class-specific head deltas are regressed in units of these
BBOX_STD = np.array([0.1, 0.1, 0.2, 0.2])
MIN_ROI_SIDE = 1.0


@dataclass
class BackboneConfig:
    widths: list[int] = field(default_factory=lambda: [16, 32, 64, 64])
    output_stride: int = 16
    in_channels: int = 1

    @property
    def stages(self) -> int:
        return len(self.widths)


@dataclass
class DetectorConfig:
    num_classes: int = 2  # background + lesion
    roi_size: int = 7
    head_hidden: int = 256
    pre_nms_top_n: int | None = 6000
    train_post_nms_top_n: int = 2000
    test_post_nms_top_n: int = 300
    proposal_nms: float = 0.7
    detection_nms: float = 0.3
    score_floor: float = 0.05
    max_detections: int = 100
    # similarity vectors: softmax outputs (default) or penultimate fc features
    similarity_on_features: bool = False


@dataclass
class Detection:
    box: BBox
    score: float
    class_id: int = 1


class Backbone(nn.Module):
    """Stages of two 3x3 convs; leading stages halve resolution until the stride is met."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        n_down = int(round(math.log2(config.output_stride)))
        if 2**n_down != config.output_stride or n_down > config.stages:
            raise ValueError(
                f"output stride {config.output_stride} needs a power of two <= 2**{config.stages}"
            )
        self.config = config
        layers = []
        c_in = config.in_channels
        for i, width in enumerate(config.widths):
            stride = 2 if i < n_down else 1
            layers += [
                nn.Conv2d(c_in, width, 3, stride=stride, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(width, width, 3, padding=1),
                nn.ReLU(inplace=True),
            ]
            c_in = width
        self.body = nn.Sequential(*layers)
        self.out_channels = c_in

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        side = x.shape[-1]
        if x.dim() != 4 or x.shape[-2] != side or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (B, {self.config.in_channels}, S, S) input, got {tuple(x.shape)}")
        if side % self.config.output_stride:
            raise ValueError(f"image side {side} not divisible by stride {self.config.output_stride}")
        return self.body(x)


def roi_cells(boxes, stride: int, height: int, width: int) -> np.ndarray:
    """Integer feature-cell extent ``[x0, y0, x1, y1)`` covered by each pixel box.

    A box covers cells ``floor(min / stride)`` up to ``ceil(max / stride)``,
    at least one cell per axis, clipped to the map. Boxes thinner than one
    pixel are widened to one pixel first.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    widths = np.maximum(boxes[:, 2] - boxes[:, 0], MIN_ROI_SIDE)
    heights = np.maximum(boxes[:, 3] - boxes[:, 1], MIN_ROI_SIDE)
    x0 = np.clip(np.floor(boxes[:, 0] / stride), 0, width - 1)
    y0 = np.clip(np.floor(boxes[:, 1] / stride), 0, height - 1)
    x1 = np.ceil((boxes[:, 0] + widths) / stride - 1e-9)
    y1 = np.ceil((boxes[:, 1] + heights) / stride - 1e-9)
    x1 = np.clip(np.maximum(x1, x0 + 1), 1, width)
    y1 = np.clip(np.maximum(y1, y0 + 1), 1, height)
    return np.stack([x0, y0, x1, y1], axis=1)


def roi_pool(features: torch.Tensor, boxes, output_size: int, stride: int) -> torch.Tensor:
    """Quantized max pooling of ``(C, H, W)`` features over pixel-space boxes.

    Cells come from :func:`roi_cells`; along an axis spanning ``n`` cells, bin
    ``i`` covers ``[floor(i * n / P), ceil((i + 1) * n / P))`` so bins are
    never empty. Returns ``(R, C, P, P)``.
    """
    C, H, W = features.shape
    cells = roi_cells(boxes, stride, H, W)
    if len(cells) == 0:
        return features.new_zeros((0, C, output_size, output_size))
    # torchvision's kernel on inclusive integer cell coordinates gives exactly these bins
    rois = np.zeros((len(cells), 5))
    rois[:, 1:3] = cells[:, :2]
    rois[:, 3:5] = cells[:, 2:] - 1
    rois = torch.as_tensor(rois, dtype=features.dtype)
    return tv_roi_pool(features[None], rois, output_size, spatial_scale=1.0)


class Detector(nn.Module):
    def __init__(
        self,
        image_side: int,
        anchors: AnchorConfig | None = None,
        backbone: BackboneConfig | None = None,
        detector: DetectorConfig | None = None,
    ):
        super().__init__()
        self.image_side = image_side
        self.anchor_config = anchors or AnchorConfig()
        self.backbone_config = backbone or BackboneConfig()
        self.config = detector or DetectorConfig()
        if self.anchor_config.stride != self.backbone_config.output_stride:
            raise ValueError(
                f"anchor stride {self.anchor_config.stride} != backbone stride "
                f"{self.backbone_config.output_stride}"
            )
        self.anchors = generate_anchors(image_side, self.anchor_config)
        self.feature_side = image_side // self.anchor_config.stride
        A = self.anchor_config.per_location
        cfg = self.config

        self.backbone = Backbone(self.backbone_config)
        c = self.backbone.out_channels
        self.rpn_conv = nn.Conv2d(c, c, 3, padding=1)
        self.rpn_cls = nn.Conv2d(c, A, 1)
        self.rpn_reg = nn.Conv2d(c, 4 * A, 1)
        self.fc1 = nn.Linear(c * cfg.roi_size**2, cfg.head_hidden)
        self.fc2 = nn.Linear(cfg.head_hidden, cfg.head_hidden)
        self.cls_score = nn.Linear(cfg.head_hidden, cfg.num_classes)
        self.bbox_pred = nn.Linear(cfg.head_hidden, 4 * cfg.num_classes)
        for layer, std in (
            (self.rpn_conv, 0.01),
            (self.rpn_cls, 0.01),
            (self.rpn_reg, 0.01),
            (self.cls_score, 0.01),
            (self.bbox_pred, 0.001),
        ):
            nn.init.normal_(layer.weight, std=std)
            nn.init.zeros_(layer.bias)

    @property
    def n_locations(self) -> int:
        return self.feature_side**2

    def features(self, image: torch.Tensor) -> torch.Tensor:
        """``(S, S)`` or ``(1, S, S)`` image in [0, 1] -> ``(C, S/stride, S/stride)``."""
        x = image
        if x.dim() == 2:
            x = x[None]
        if x.shape[-1] != self.image_side or x.shape[-2] != self.image_side:
            raise ValueError(f"expected {self.image_side}x{self.image_side} image, got {tuple(x.shape)}")
        return self.backbone((x - 0.5)[None])[0]

    def rpn_forward(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-anchor objectness logits ``(N,)`` and deltas ``(N, 4)`` in anchor order."""
        h = F.relu(self.rpn_conv(feat[None]))
        logits = self.rpn_cls(h)[0].permute(1, 2, 0).reshape(-1)
        deltas = self.rpn_reg(h)[0].permute(1, 2, 0).reshape(-1, 4)
        return logits, deltas

    def propose(self, scores, deltas, top_n: int, nms_threshold: float | None = None):
        """Decode, clip, NMS, truncate. Returns ``(boxes, anchor_indices, scores)``."""
        scores = _np(scores).reshape(-1)
        deltas = _np(deltas).reshape(-1, 4)
        nms_threshold = self.config.proposal_nms if nms_threshold is None else nms_threshold
        return propose(scores, deltas, self.anchors, top_n, nms_threshold, self.image_side,
                       self.config.pre_nms_top_n)

    def head(self, pooled: torch.Tensor):
        """Pooled ``(R, C, P, P)`` -> (class logits, per-class deltas, penultimate features)."""
        x = pooled.flatten(1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.cls_score(x), self.bbox_pred(x), x

    def roi_features(self, feat: torch.Tensor, boxes) -> torch.Tensor:
        return roi_pool(feat, boxes, self.config.roi_size, self.anchor_config.stride)

    @torch.no_grad()
    def predict(self, image: torch.Tensor, score_floor: float | None = None) -> list[Detection]:
        cfg = self.config
        floor = cfg.score_floor if score_floor is None else score_floor
        feat = self.features(image)
        logits, deltas = self.rpn_forward(feat)
        boxes, _, _ = self.propose(torch.sigmoid(logits), deltas, cfg.test_post_nms_top_n)
        if len(boxes) == 0:
            return []
        cls_logits, box_deltas, _ = self.head(self.roi_features(feat, boxes))
        probs = torch.softmax(cls_logits, dim=1).numpy().astype(np.float64)
        per_class = box_deltas.numpy().astype(np.float64).reshape(len(boxes), -1, 4)
        dets: list[Detection] = []
        for c in range(1, cfg.num_classes):
            refined = decode_boxes(per_class[:, c] * BBOX_STD, boxes, clip=self.image_side, max_log_scale=MAX_LOG_SCALE)
            score = probs[:, c]
            ok = (score >= floor) & (refined[:, 2] > refined[:, 0]) & (refined[:, 3] > refined[:, 1])
            idx = np.flatnonzero(ok)
            kept = idx[nms(refined[idx], score[idx], cfg.detection_nms)]
            dets += [Detection(BBox.from_seq(refined[i]), float(score[i]), c) for i in kept]
        dets.sort(key=lambda d: -d.score)
        return dets[: cfg.max_detections]


def _np(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def propose(scores, deltas, anchors, top_n: int, nms_threshold: float, image_side: int,
            pre_nms_top_n: int | None = None):
    """Decode all anchors, clip to the image, suppress, keep ``top_n`` by score.

    Returns ``(boxes, anchor_indices, scores)``; zero-area clipped boxes are dropped.
    """
    order = np.lexsort((np.arange(len(scores)), -scores))
    if pre_nms_top_n is not None:
        order = order[:pre_nms_top_n]
    boxes = decode_boxes(deltas[order], anchors[order], clip=image_side, max_log_scale=MAX_LOG_SCALE)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    order = order[valid]
    boxes = boxes[valid]
    keep = nms(boxes, scores[order], nms_threshold, max_keep=top_n)
    return boxes[keep], order[keep], scores[order[keep]]


def build_detector(image_side: int, anchors: AnchorConfig, backbone: BackboneConfig,
                   detector: DetectorConfig, seed: int) -> Detector:
    torch.manual_seed(seed)
    return Detector(image_side, anchors, backbone, detector)
