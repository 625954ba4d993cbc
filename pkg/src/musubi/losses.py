from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .config import LossWeights
from .geometry import giou3d


@dataclass
class LossBreakdown:
    total: torch.Tensor
    init: torch.Tensor
    refine: torch.Tensor


def _masked_mean(values: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    count = valid.sum()
    if int(count) == 0:
        raise ValueError("loss needs at least one valid sentence")
    return torch.where(valid, values, torch.zeros_like(values)).sum() / count.to(values.dtype)


def loss_init(
    pred: torch.Tensor,
    gt: torch.Tensor,
    valid: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    """``λ_iou (1 − GIoU) + λ_L1 ‖pred − gt‖₁`` averaged over valid sentences."""

    per_box = weights.iou * (1.0 - giou3d(pred, gt)) + weights.l1 * (pred - gt).abs().sum(-1)
    return _masked_mean(per_box, valid)


def loss_refine(
    layer_boxes: Sequence[torch.Tensor],
    gt: torch.Tensor,
    valid: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    """Per-layer L1 to the ground truth, summed over layers and averaged over valid sentences.

    Each layer box is its detached input plus a predicted offset, so the center
    term equals the offset error against the residual target. Sizes are
    compared in log space, matching the multiplicative size offsets.
    """

    per_box = torch.zeros(gt.shape[:-1], dtype=gt.dtype, device=gt.device)
    for boxes in layer_boxes:
        center = (boxes[..., :3] - gt[..., :3]).abs().sum(-1)
        size = (torch.log(boxes[..., 3:]) - torch.log(gt[..., 3:])).abs().sum(-1)
        per_box = per_box + weights.cent * center + weights.size * size
    return _masked_mean(per_box, valid)


def total_loss(
    init_boxes: torch.Tensor,
    layer_boxes: Sequence[torch.Tensor],
    gt: torch.Tensor,
    valid: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Stage-3 objective; with no refinement layers it is the initial loss alone."""

    init = loss_init(init_boxes, gt, valid, weights)
    if not layer_boxes:
        return LossBreakdown(total=init, init=init, refine=torch.zeros_like(init))
    refine = loss_refine(layer_boxes, gt, valid, weights)
    return LossBreakdown(total=weights.refine * refine + weights.init * init, init=init, refine=refine)
