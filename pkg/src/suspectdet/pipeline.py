"""Paired positive/negative training loop.

Each iteration takes one annotated positive image and one unannotated
negative image. The positive image gets the usual two-stage detector losses;
the negative image gets the top likelihood loss on its RPN scores, background
classification of its proposals, and the similarity loss against the
positive image's foreground proposals. With ``lambda2 == lambda4 == 0`` the
negative image is not processed at all.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .anchors import (
    BATCH_SIZE,
    POSITIVE,
    AnchorConfig,
    build_field,
    sample_positive_image,
    sample_top_likelihood,
)
from .dataset import ImageRecord, image_size, load_image, scale_boxes
from .geometry import MAX_LOG_SCALE, decode_boxes, encode_boxes, iou_matrix
from .losses import (
    LossWeights,
    combine_rpn,
    fast_rcnn_cls_loss,
    fast_rcnn_reg_loss,
    fast_rcnn_total_loss,
    rpn_cls_loss,
    rpn_reg_loss,
    select_similarity_pairs,
    similarity_loss,
    top_likelihood_loss,
)
from .model import BBOX_STD, BackboneConfig, Detector, DetectorConfig, build_detector

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["pclsloss", "pregloss", "tlloss", "clsloss", "regloss", "simloss", "total"]
LOG_HEADER = ["iteration", "lr"] + LOSS_COLUMNS
CHECKPOINT_FORMAT = "suspectdet-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    image_side: int = 512
    iterations: int = 45000
    base_lr: float = 1e-4
    lr_decay_factor: float = 10.0
    lr_decay_period: int = 9000
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    rpn_batch: int = BATCH_SIZE
    top_likelihood_k: int = BATCH_SIZE
    roi_batch: int = 128
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    roi_bg_iou_low: float = 0.0
    similarity_max_pairs: int = 32
    grad_clip: float | None = None
    seed: int = 0
    log_interval: int = 20
    checkpoint_interval: int = 1000
    output_dir: str = "runs/train"


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class PairedBatch:
    positive: ImageRecord
    negative: ImageRecord

    def __post_init__(self):
        if not self.positive.is_positive or not self.positive.boxes:
            raise ValueError(f"{self.positive.image}: positive slot needs an annotated positive image")
        if self.negative.is_positive or self.negative.boxes:
            raise ValueError(f"{self.negative.image}: negative slot needs an unannotated negative image")


@dataclass
class StepReport:
    iteration: int
    lr: float
    pclsloss: float
    pregloss: float
    tlloss: float
    clsloss: float
    regloss: float
    simloss: float
    total: float
    pairs: int = 0

    def row(self) -> list:
        return [self.iteration, self.lr] + [getattr(self, c) for c in LOSS_COLUMNS]


def lr_at(iteration: int, config: TrainConfig) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return config.base_lr * config.lr_decay_factor ** (-(iteration // config.lr_decay_period))


class PairSchedule:
    """Deterministic pairing: each epoch reshuffles both sets; the shorter one recycles."""

    def __init__(self, positives: Sequence[ImageRecord], negatives: Sequence[ImageRecord], seed: int):
        if not positives or not negatives:
            raise ValueError("paired training needs at least one positive and one negative image")
        self.positives = list(positives)
        self.negatives = list(negatives)
        self.seed = seed
        self.per_epoch = max(len(self.positives), len(self.negatives))
        self._epoch = -1
        self._perms: tuple[np.ndarray, np.ndarray] | None = None

    def _perm(self, epoch: int):
        if epoch != self._epoch:
            rng = np.random.default_rng([self.seed, epoch])
            self._perms = (rng.permutation(len(self.positives)), rng.permutation(len(self.negatives)))
            self._epoch = epoch
        return self._perms

    def pair_at(self, step: int) -> PairedBatch:
        epoch, i = divmod(step, self.per_epoch)
        pp, pn = self._perm(epoch)
        return PairedBatch(self.positives[pp[i % len(pp)]], self.negatives[pn[i % len(pn)]])


def paired_batch_iterator(positives, negatives, seed: int, start: int = 0) -> Iterator[PairedBatch]:
    schedule = PairSchedule(positives, negatives, seed)
    step = start
    while True:
        yield schedule.pair_at(step)
        step += 1


class ImageCache:
    """Images resized to the training side, with boxes rescaled to match."""

    def __init__(self, side: int):
        self.side = side
        self._cache: dict[Path, tuple[torch.Tensor, np.ndarray]] = {}

    def get(self, record: ImageRecord) -> tuple[torch.Tensor, np.ndarray]:
        key = record.path
        if key not in self._cache:
            img = load_image(record, self.side)
            boxes = record.box_array()
            if len(boxes):
                boxes = scale_boxes(boxes, image_size(record), self.side)
            self._cache[key] = (torch.from_numpy(img), boxes)
        return self._cache[key]


def sample_rois(proposals: np.ndarray, gt: np.ndarray, rng: np.random.Generator, config: TrainConfig):
    """Fixed-size RoI sample for one image: ``(boxes, labels, targets)``.

    Ground-truth boxes join the candidate pool. Foreground is IoU >= roi_fg_iou
    (at most ``roi_fg_fraction`` of the batch); the rest is background.
    Without ground truth every RoI is background and targets are zero.
    """
    pool = np.concatenate([proposals, gt]) if len(gt) else proposals
    if len(gt):
        ious = iou_matrix(pool, gt)
        best, match = ious.max(axis=1), ious.argmax(axis=1)
    else:
        best, match = np.zeros(len(pool)), np.zeros(len(pool), dtype=int)
    fg = np.flatnonzero(best >= config.roi_fg_iou)
    bg = np.flatnonzero((best < config.roi_fg_iou) & (best >= config.roi_bg_iou_low))
    n_fg = min(len(fg), int(round(config.roi_batch * config.roi_fg_fraction)))
    n_bg = min(len(bg), config.roi_batch - n_fg)
    fg = rng.choice(fg, n_fg, replace=False) if n_fg else fg[:0]
    bg = rng.choice(bg, n_bg, replace=False) if n_bg else bg[:0]
    keep = np.concatenate([fg, bg]).astype(int)
    labels = np.concatenate([np.ones(n_fg, dtype=int), np.zeros(n_bg, dtype=int)])
    targets = np.zeros((len(keep), 4))
    if n_fg:
        targets[:n_fg] = encode_boxes(gt[match[fg]], pool[fg]) / BBOX_STD
    return pool[keep], labels, targets


def positive_losses(model: Detector, image: torch.Tensor, gt: np.ndarray, rng: np.random.Generator,
                    config: TrainConfig, field_cache: dict | None = None):
    """Standard detector losses for one annotated image.

    Returns ``(pclsloss, pregloss, clsloss, regloss, roi_labels, roi_outputs)`` where
    ``roi_outputs`` is ``(class logits, penultimate features)`` of the sampled RoIs.
    """
    key = gt.tobytes()
    if field_cache is not None and key in field_cache:
        anchor_field = field_cache[key]
    else:
        anchor_field = build_field(model.anchors, gt)
        if field_cache is not None:
            field_cache[key] = anchor_field
    feat = model.features(image)
    logits, deltas = model.rpn_forward(feat)
    scores = torch.sigmoid(logits)
    idx = sample_positive_image(anchor_field.labels, rng, config.rpn_batch)
    labels = anchor_field.labels[idx]
    pcls = rpn_cls_loss(scores[torch.from_numpy(idx)], labels)
    pos = idx[labels == POSITIVE]
    target = torch.as_tensor(anchor_field.reg_targets[pos], dtype=deltas.dtype)
    preg = rpn_reg_loss(deltas[torch.from_numpy(pos)], target, model.n_locations)

    proposals, _, _ = model.propose(scores, deltas, config.detector.train_post_nms_top_n)
    rois, roi_labels, roi_targets = sample_rois(proposals, gt, rng, config)
    cls_logits, box_deltas, hidden = model.head(model.roi_features(feat, rois))
    cls = fast_rcnn_cls_loss(cls_logits, roi_labels)
    reg = fast_rcnn_reg_loss(box_deltas, roi_labels, torch.as_tensor(roi_targets, dtype=box_deltas.dtype))
    return pcls, preg, cls, reg, roi_labels, (cls_logits, hidden)


def negative_losses(model: Detector, image: torch.Tensor, rng: np.random.Generator, config: TrainConfig,
                    n_pairs: int):
    """Top likelihood loss, background classification of proposals, and the
    class-probability (or feature) vectors of the ``n_pairs`` top-scored anchors.

    Returns ``(tlloss, clsloss, pair_vectors, pair_anchor_scores)``.
    """
    feat = model.features(image)
    logits, deltas = model.rpn_forward(feat)
    scores = torch.sigmoid(logits)
    tl = top_likelihood_loss(scores, config.top_likelihood_k)

    proposals, _, _ = model.propose(scores, deltas, config.detector.train_post_nms_top_n)
    rois, roi_labels, _ = sample_rois(proposals, np.zeros((0, 4)), rng, config)
    cls_logits, _, _ = model.head(model.roi_features(feat, rois))
    cls = fast_rcnn_cls_loss(cls_logits, roi_labels)

    score_np = scores.detach().numpy().astype(np.float64)
    top = sample_top_likelihood(score_np, n_pairs) if n_pairs else np.zeros(0, dtype=int)
    boxes = decode_boxes(deltas.detach().numpy()[top], model.anchors[top], clip=model.image_side, max_log_scale=MAX_LOG_SCALE)
    top_logits, _, top_hidden = model.head(model.roi_features(feat, boxes))
    vectors = top_hidden if config.detector.similarity_on_features else torch.softmax(top_logits, dim=1)
    return tl, cls, vectors, score_np[top]


def compute_losses(model: Detector, pos_image, pos_gt, neg_image, rng, config: TrainConfig,
                   field_cache: dict | None = None) -> dict[str, torch.Tensor]:
    w = config.weights
    pcls, preg, cls_p, reg, roi_labels, (pos_logits, pos_hidden) = positive_losses(
        model, pos_image, pos_gt, rng, config, field_cache
    )
    zero = pcls.new_zeros(())
    tl, sim, cls = zero, zero, cls_p
    n_pairs = 0
    if w.trains_negatives:
        n_fg = int((roi_labels > 0).sum())
        n_pairs = min(n_fg, config.similarity_max_pairs)
        tl, cls_n, neg_vectors, neg_scores = negative_losses(model, neg_image, rng, config, n_pairs)
        cls = cls_p + cls_n
        pos_vectors = pos_hidden if config.detector.similarity_on_features else torch.softmax(pos_logits, dim=1)
        pairs = select_similarity_pairs(pos_vectors, roi_labels, neg_vectors, neg_scores, n_pairs)
        n_pairs = pairs.k
        sim = similarity_loss(pairs)
    rpn = combine_rpn(pcls, preg, tl, w)
    fast = fast_rcnn_total_loss(cls, reg, sim, w)
    return {
        "pclsloss": pcls, "pregloss": preg, "tlloss": tl,
        "clsloss": cls, "regloss": reg, "simloss": sim,
        "total": rpn + fast, "pairs": n_pairs,
    }


def step_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1_000_003, iteration])


def make_optimizer(model: Detector, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer.lower() != "adam":
        raise ValueError(f"unsupported optimizer {config.optimizer!r}; only 'adam' is implemented")
    return torch.optim.Adam(model.parameters(), lr=config.base_lr, betas=tuple(config.adam_betas),
                            eps=config.adam_eps)


def train_step(batch: PairedBatch, model: Detector, optimizer, config: TrainConfig, iteration: int,
               images: ImageCache, field_cache: dict | None = None) -> StepReport:
    model.train()
    pos_image, pos_gt = images.get(batch.positive)
    neg_image = images.get(batch.negative)[0] if config.weights.trains_negatives else None
    rng = step_rng(config.seed, iteration)
    parts = compute_losses(model, pos_image, pos_gt, neg_image, rng, config, field_cache)
    values = {k: float(v.detach()) for k, v in parts.items() if k != "pairs"}
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        dump = ", ".join(f"{k}={v!r}" for k, v in values.items())
        raise NonFiniteLossError(
            f"non-finite loss at iteration {iteration} in {bad} "
            f"(positive={batch.positive.image}, negative={batch.negative.image}): {dump}"
        )
    lr = lr_at(iteration, config)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad()
    parts["total"].backward()
    if config.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()
    return StepReport(iteration=iteration, lr=lr, pairs=parts["pairs"], **values)


def save_checkpoint(path, model: Detector, optimizer, config: TrainConfig, iteration: int) -> None:
    from .config import config_to_dict

    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "iteration": iteration,
        "config": config_to_dict(config),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        torch.save(payload, tmp)
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> dict:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a suspectdet checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def model_from_checkpoint(payload: dict) -> tuple[Detector, TrainConfig]:
    from .config import train_config_from_dict

    config = train_config_from_dict(payload["config"])
    model = Detector(config.image_side, config.anchors, config.backbone, config.detector)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, config


def _write_log(path: Path, rows: list[list], append: bool) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if not append:
            writer.writerow(LOG_HEADER)
        writer.writerows(rows)


def _truncate_log(path: Path, iteration: int) -> None:
    """Drop rows logged after the checkpoint being resumed."""
    if not path.exists():
        _write_log(path, [], append=False)
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    kept = [r for r in rows[1:] if int(r[0]) < iteration]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        writer.writerows(kept)


@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    reports: list[StepReport]


def train(config: TrainConfig, records: Sequence[ImageRecord], output_dir=None, resume: bool = False,
          keep_reports: bool = False) -> TrainResult:
    """Run (or resume) paired training and write ``checkpoint.pt`` and ``loss.csv``.

    Log rows hold the mean of each component over ``log_interval`` steps, keyed
    by the last iteration of the window.
    """
    out = Path(output_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    positives = [r for r in records if r.is_positive]
    negatives = [r for r in records if not r.is_positive]
    schedule = PairSchedule(positives, negatives, config.seed)
    ckpt_path = out / "checkpoint.pt"
    log_path = out / "loss.csv"

    model = build_detector(config.image_side, config.anchors, config.backbone, config.detector, config.seed)
    optimizer = make_optimizer(model, config)
    start = 0
    if resume and ckpt_path.exists():
        payload = load_checkpoint(ckpt_path)
        model.load_state_dict(payload["model"])
        optimizer.load_state_dict(payload["optimizer"])
        start = int(payload["iteration"])
        _truncate_log(log_path, start)
        log.info("resumed from %s at iteration %d", ckpt_path, start)
    else:
        _write_log(log_path, [], append=False)

    images = ImageCache(config.image_side)
    field_cache: dict = {}
    window: list[StepReport] = []
    reports: list[StepReport] = []
    for it in range(start, config.iterations):
        report = train_step(schedule.pair_at(it), model, optimizer, config, it, images, field_cache)
        window.append(report)
        if keep_reports:
            reports.append(report)
        if (it + 1) % config.log_interval == 0:
            mean = [float(np.mean([getattr(r, c) for r in window])) for c in LOSS_COLUMNS]
            _write_log(log_path, [[it, report.lr] + mean], append=True)
            log.info("iter %d lr %.2e total %.4f tl %.4f sim %.4f", it, report.lr, mean[-1], mean[2], mean[5])
            window = []
        if (it + 1) % config.checkpoint_interval == 0 and it + 1 < config.iterations:
            save_checkpoint(ckpt_path, model, optimizer, config, it + 1)
    save_checkpoint(ckpt_path, model, optimizer, config, config.iterations)
    return TrainResult(ckpt_path, log_path, reports)
