"""Training objectives: set prediction with bipartite matching, pairwise ranking hinge, dice."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor
from . import boxes as bx
from .matching import hungarian_match

W_CLS = 2.0
W_L1 = 5.0
W_GIOU = 2.0
RANK_MARGIN = 0.5


@dataclass(frozen=True)
class GroundTruth:
    """One planted / annotated object: rank (1 = most salient), normalised xyxy box, binary mask."""

    rank: int
    box: np.ndarray
    mask: np.ndarray


def _one_hot(indices: Sequence[int], width: int) -> np.ndarray:
    out = np.zeros((len(indices), width))
    out[np.arange(len(indices)), indices] = 1.0
    return out


def match_cost(rank_logits: np.ndarray, boxes_cxcywh: np.ndarray, gts: Sequence[GroundTruth],
               weights=(W_CLS, W_L1, W_GIOU)) -> np.ndarray:
    """(N_query, N_gt) matching cost from forward values."""
    w_cls, w_l1, w_giou = weights
    z = rank_logits - rank_logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    pred_xyxy = bx.cxcywh_to_xyxy(boxes_cxcywh)
    gt_xyxy = np.stack([g.box for g in gts])
    cls = -logp[:, [g.rank - 1 for g in gts]]
    l1 = np.abs(pred_xyxy[:, None, :] - gt_xyxy[None, :, :]).sum(-1)
    gi = bx.giou(pred_xyxy[:, None, :], gt_xyxy[None, :, :])
    return w_cls * cls + w_l1 * l1 + w_giou * (1.0 - gi)


def _check_ranks(gts: Sequence[GroundTruth], r_max: int) -> None:
    for g in gts:
        if not 1 <= g.rank <= r_max:
            raise ValueError(f"ground-truth rank {g.rank} outside 1..{r_max}")


def stage_set_loss(rank_logits: Tensor, boxes: Tensor, gts: Sequence[GroundTruth],
                   weights=(W_CLS, W_L1, W_GIOU), bg_weight: float = 1.0) -> tuple[Tensor, np.ndarray]:
    """Set loss for one image at one stage.

    ``rank_logits`` is (N, R_max + 1) with the last class meaning background,
    ``boxes`` is (N, 4) cxcywh. Cross-entropy runs over every query (unmatched
    ones target background, their terms scaled by ``bg_weight``); L1 and
    1 - GIoU over matched queries only. The sum is divided by
    max(1, number of ground truths). Returns (loss, assignment).
    """
    n, width = rank_logits.shape
    r_max = width - 1
    _check_ranks(gts, r_max)
    w_cls, w_l1, w_giou = weights
    targets = [r_max] * n
    assign = np.zeros(0, dtype=np.int64)
    if gts:
        assign = hungarian_match(match_cost(rank_logits.data, boxes.data, gts, weights))
        for g, q in enumerate(assign):
            targets[q] = gts[g].rank - 1
    logp = ag.log_softmax_axis(rank_logits, -1)
    target = _one_hot(targets, width)
    target[:, r_max] *= bg_weight
    loss = -ag.total_sum(logp * target) * w_cls
    if gts:
        pick = np.zeros((len(gts), n))
        pick[np.arange(len(gts)), assign] = 1.0
        matched = bx.tensor_cxcywh_to_xyxy(ag.matmul(pick, boxes))
        gt_xyxy = np.stack([g.box for g in gts])
        l1 = ag.total_sum(ag.abs_(matched - gt_xyxy))
        gi = ag.total_sum(1.0 - bx.tensor_giou(matched, gt_xyxy))
        loss = loss + l1 * w_l1 + gi * w_giou
    return loss * (1.0 / max(1, len(gts))), assign


def set_prediction_loss(stage_outputs, gts: Sequence[GroundTruth],
                        weights=(W_CLS, W_L1, W_GIOU), bg_weight: float = 1.0) -> tuple[Tensor, list[np.ndarray]]:
    """Stage losses summed; each stage item exposes ``rank_logits`` (N, R+1) and ``boxes`` (N, 4)."""
    total, assigns = None, []
    for out in stage_outputs:
        loss, assign = stage_set_loss(out.rank_logits, out.boxes, gts, weights, bg_weight)
        total = loss if total is None else total + loss
        assigns.append(assign)
    return total, assigns


def pairwise_rank_loss(scores: Tensor, gt_ranks: Sequence[int], margin: float = RANK_MARGIN) -> Tensor:
    """Mean hinge max(0, m - (s_i - s_j)) over pairs where i is more salient (smaller rank) than j."""
    gt_ranks = list(gt_ranks)
    pairs = [(i, j) for i in range(len(gt_ranks)) for j in range(len(gt_ranks)) if gt_ranks[i] < gt_ranks[j]]
    if not pairs:
        return Tensor(0.0)
    n = scores.shape[0]
    diff = np.zeros((len(pairs), n))
    for k, (i, j) in enumerate(pairs):
        diff[k, i] += 1.0
        diff[k, j] -= 1.0
    s = ag.reshape(scores, (n, 1))
    gaps = ag.matmul(diff, s)
    hinge = ag.relu(margin - gaps)
    return ag.total_sum(hinge) * (1.0 / len(pairs))


def dice_loss(mask_logits: Tensor, gt_mask) -> Tensor:
    """1 - (2 sum p g + 1) / (sum p + sum g + 1) with p = sigmoid(logits); averaged over leading axes."""
    g = np.asarray(gt_mask, dtype=np.float64)
    if g.shape != mask_logits.shape:
        raise ag.ShapeError(f"dice_loss: shape mismatch {mask_logits.shape} vs {g.shape}")
    p = ag.sigmoid(mask_logits)
    m = g.shape[-2] * g.shape[-1]
    lead = g.shape[:-2]
    count = int(np.prod(lead)) if lead else 1
    p2 = ag.reshape(p, (count, m))
    g2 = g.reshape(count, m)
    inter = ag.sum_axis(p2 * g2, -1)
    denom = ag.sum_axis(p2, -1) + (g2.sum(-1) + 1.0)
    per_mask = 1.0 - (inter * 2.0 + 1.0) / denom
    return ag.mean_axis(per_mask, 0, keepdims=True)
