"""Training objectives for paired positive/negative images.

RPN side: ``pclsloss + l1 * pregloss + l2 * tlloss`` where ``tlloss`` is the
background cross entropy over the 256 highest-scoring anchors of the
negative image. Detection-head side: ``clsloss + l3 * regloss + l4 * simloss``
where ``simloss`` is the mean cosine similarity between class-probability
vectors of positive foreground proposals and of the negative image's
top-scored anchors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .anchors import BATCH_SIZE, sample_top_likelihood

EPS = 1e-7
SMOOTH_L1_BETA = 1.0 / 9.0


@dataclass
class LossWeights:
    lambda1: float = 1.0  # positive-image RPN regression
    lambda2: float = 1.0  # top likelihood loss
    lambda3: float = 1.0  # detection-head regression
    lambda4: float = 0.1  # similarity loss

    @property
    def trains_negatives(self) -> bool:
        """Negative images only enter training through tlloss or simloss."""
        return self.lambda2 != 0 or self.lambda4 != 0


@dataclass
class SimilarityPairs:
    x1: torch.Tensor  # (K, C) from positive-image foreground proposals
    x2: torch.Tensor  # (K, C) from negative-image top-scored anchors

    def __post_init__(self):
        if self.x1.shape != self.x2.shape:
            raise ValueError(f"pair shapes differ: {tuple(self.x1.shape)} vs {tuple(self.x2.shape)}")
        if self.x1.dim() != 2:
            raise ValueError("pair tensors must be (K, C)")

    @property
    def k(self) -> int:
        return self.x1.shape[0]

    def check_probabilities(self, tol: float = 1e-5) -> None:
        for name, x in (("x1", self.x1), ("x2", self.x2)):
            if x.numel() == 0:
                continue
            if bool((x < -tol).any()) or not torch.allclose(
                x.sum(dim=1), torch.ones(x.shape[0], dtype=x.dtype), atol=tol
            ):
                raise ValueError(f"{name} rows are not probability vectors")


def _as_tensor(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)


def binary_ce(p, label) -> torch.Tensor:
    """Elementwise ``-y ln p - (1 - y) ln(1 - p)`` with ``p`` clamped to [eps, 1 - eps]."""
    p = _as_tensor(p).clamp(EPS, 1.0 - EPS)
    label = torch.as_tensor(label, dtype=p.dtype)
    return -(label * torch.log(p) + (1.0 - label) * torch.log1p(-p))


def top_likelihood_loss(scores: torch.Tensor, k: int = BATCH_SIZE) -> torch.Tensor:
    """Mean background cross entropy over the ``k`` highest anchor scores.

    Only the selected anchors receive gradient. Fewer than ``k`` anchors uses
    all of them.
    """
    scores = _as_tensor(scores).reshape(-1)
    if scores.numel() == 0:
        raise ValueError("top likelihood loss needs at least one anchor score")
    idx = sample_top_likelihood(scores.detach().cpu().numpy(), k)
    chosen = scores[torch.as_tensor(idx, dtype=torch.long)]
    return binary_ce(chosen, 0.0).mean()


def smooth_l1(x: torch.Tensor, beta: float = SMOOTH_L1_BETA) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax**2 / beta, ax - 0.5 * beta)


def rpn_cls_loss(scores: torch.Tensor, labels) -> torch.Tensor:
    """Mean cross entropy over the sampled anchors (``labels`` in {0, 1})."""
    labels = torch.as_tensor(labels, dtype=scores.dtype)
    return binary_ce(scores, labels).mean()


def rpn_reg_loss(pred: torch.Tensor, target: torch.Tensor, normalizer: float) -> torch.Tensor:
    """Smooth-L1 over positive sampled anchors, divided by the anchor-location count."""
    if pred.numel() == 0:
        return pred.sum() * 0.0
    return smooth_l1(pred - target).sum() / normalizer


def rpn_positive_loss(pclsloss: torch.Tensor, pregloss: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    return pclsloss + weights.lambda1 * pregloss


def combine_rpn(pclsloss, pregloss, tlloss, weights: LossWeights) -> torch.Tensor:
    return pclsloss + weights.lambda1 * pregloss + weights.lambda2 * tlloss


def rpn_total_loss(pclsloss, pregloss, neg_scores, weights: LossWeights, k: int = BATCH_SIZE) -> torch.Tensor:
    tl = top_likelihood_loss(neg_scores, k) if neg_scores is not None else 0.0
    return combine_rpn(pclsloss, pregloss, tl, weights)


def fast_rcnn_cls_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Softmax cross entropy averaged over the image's sampled proposals."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    return F.cross_entropy(logits, labels)


def fast_rcnn_reg_loss(deltas: torch.Tensor, labels, targets: torch.Tensor) -> torch.Tensor:
    """Class-specific smooth-L1 over foreground proposals, normalized by proposal count.

    ``deltas`` is ``(R, num_classes * 4)``; background rows contribute nothing.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    fg = torch.nonzero(labels > 0).reshape(-1)
    if fg.numel() == 0:
        return deltas.sum() * 0.0
    per_class = deltas.reshape(deltas.shape[0], -1, 4)
    pred = per_class[fg, labels[fg]]
    return smooth_l1(pred - targets[fg]).sum() / max(labels.numel(), 1)


def select_similarity_pairs(
    pos_probs: torch.Tensor,
    pos_labels,
    neg_probs: torch.Tensor,
    neg_anchor_scores,
    max_pairs: int = 32,
) -> SimilarityPairs:
    """Pair foreground proposal probabilities with the negative image's top-K anchors.

    ``neg_probs[j]`` is the class-probability vector of the proposal built from
    anchor ``j`` with RPN score ``neg_anchor_scores[j]``. The i-th foreground
    proposal (in the order given) is paired with the i-th highest-scored
    negative anchor.
    """
    labels = np.asarray(pos_labels).reshape(-1)
    fg = np.flatnonzero(labels > 0)[:max_pairs]
    scores = np.asarray(
        neg_anchor_scores.detach().cpu().numpy() if torch.is_tensor(neg_anchor_scores) else neg_anchor_scores,
        dtype=np.float64,
    ).reshape(-1)
    k = min(len(fg), len(scores))
    fg = fg[:k]
    top = sample_top_likelihood(scores, k) if k else np.zeros(0, dtype=np.int64)
    x1 = pos_probs[torch.as_tensor(fg, dtype=torch.long)]
    x2 = neg_probs[torch.as_tensor(top, dtype=torch.long)]
    return SimilarityPairs(x1, x2)


def similarity_loss(pairs: SimilarityPairs) -> torch.Tensor:
    """Mean cosine similarity over the pairs; 0 when there are none."""
    if pairs.k == 0:
        return pairs.x1.sum() * 0.0
    num = (pairs.x1 * pairs.x2).sum(dim=1)
    den = pairs.x1.norm(dim=1) * pairs.x2.norm(dim=1)
    return (num / den).mean()


def fast_rcnn_total_loss(clsloss, regloss, simloss, weights: LossWeights) -> torch.Tensor:
    return clsloss + weights.lambda3 * regloss + weights.lambda4 * simloss
