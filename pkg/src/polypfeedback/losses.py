"""Segmentation and attribute losses."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

EPS = 1e-7
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossReport:
    total: float
    bce: float
    dice: float
    attr: float


def _check(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def bce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check(pred, target)
    p = pred.clamp(EPS, 1 - EPS)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Soft Dice loss computed per image (leading dim) and averaged over the batch."""
    _check(pred, target)
    if pred.dim() < 2:
        raise ValueError("dice_loss expects a leading batch dimension")
    p = pred.reshape(pred.shape[0], -1)
    t = target.reshape(target.shape[0], -1)
    inter = (p * t).sum(1)
    score = (2 * inter + smooth) / (p.sum(1) + t.sum(1) + smooth)
    return (1 - score).mean()


def attribute_loss(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean of the four per-head binary cross-entropies on raw logits (B×4)."""
    _check(logits, gt)
    return F.binary_cross_entropy_with_logits(logits, gt.to(logits.dtype))


def total_loss(pred, target, logits, gt_attrs, lam: float = 1.0):
    """Returns (differentiable total, LossReport)."""
    bce = bce_loss(pred, target)
    dice = dice_loss(pred, target)
    attr = attribute_loss(logits, gt_attrs)
    total = bce + dice + lam * attr
    report = LossReport(*(float(t.detach()) for t in (total, bce, dice, attr)))
    return total, report
