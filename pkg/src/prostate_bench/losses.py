"""Composite Dice + focal + cross-entropy loss and the DSC metric."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class LossWeights:
    w_dice: float = 1.0
    w_focal: float = 1.0
    w_ce: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 1.0
    dice_eps: float = 1e-6

    def __post_init__(self):
        ws = (self.w_dice, self.w_focal, self.w_ce)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError(f"loss weights must be >= 0 with at least one > 0, got {ws}")
        if self.focal_gamma < 0 or self.focal_alpha < 0 or self.dice_eps < 0:
            raise ValueError("focal_gamma, focal_alpha and dice_eps must be >= 0")


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch in {what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_logits(logits: torch.Tensor, target: torch.Tensor, what: str):
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ValueError(f"{what} expects (B, 2, H, W) input, got {tuple(logits.shape)}")
    if tuple(target.shape) != (logits.shape[0], *logits.shape[2:]):
        raise ValueError(
            f"shape mismatch in {what}: target {tuple(target.shape)} vs input {tuple(logits.shape)}"
        )


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Soft Dice loss on foreground probabilities, pooled over the whole batch."""
    _check_same(probs, target, "dice_loss")
    target = target.to(probs.dtype)
    inter = (probs * target).sum()
    return 1.0 - (2.0 * inter + eps) / (probs.sum() + target.sum() + eps)


def _focal_from_log_probs(log_probs: torch.Tensor, target: torch.Tensor, gamma: float, alpha: float):
    logp_t = log_probs.gather(1, target.long().unsqueeze(1)).squeeze(1)
    p_t = logp_t.exp()
    return (-alpha * (1.0 - p_t) ** gamma * logp_t).mean()


def focal_loss(probs: torch.Tensor, target: torch.Tensor, gamma: float = 2.0, alpha: float = 1.0) -> torch.Tensor:
    """Mean of -alpha (1 - p_t)^gamma log p_t over pixels; ``probs`` is (B, 2, H, W)."""
    _check_logits(probs, target, "focal_loss")
    return _focal_from_log_probs(torch.log(probs.clamp_min(1e-12)), target, gamma, alpha)


def cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean pixelwise negative log-likelihood after softmax."""
    _check_logits(logits, target, "cross_entropy")
    return F.cross_entropy(logits, target.long())


def combined_loss(logits: torch.Tensor, target: torch.Tensor, w: LossWeights | None = None) -> torch.Tensor:
    """w_dice * dice + w_focal * focal + w_ce * ce, all computed from the same logits."""
    w = w or LossWeights()
    _check_logits(logits, target, "combined_loss")
    log_probs = F.log_softmax(logits, dim=1)
    total = logits.new_zeros(())
    if w.w_dice:
        total = total + w.w_dice * dice_loss(log_probs[:, 1].exp(), target, w.dice_eps)
    if w.w_focal:
        total = total + w.w_focal * _focal_from_log_probs(log_probs, target, w.focal_gamma, w.focal_alpha)
    if w.w_ce:
        total = total + w.w_ce * F.nll_loss(log_probs, target.long())
    return total


class CombinedLoss(nn.Module):
    def __init__(self, weights: LossWeights | None = None):
        super().__init__()
        self.weights = weights or LossWeights()

    def forward(self, logits, target):
        return combined_loss(logits, target, self.weights)


def dsc(pred, gt) -> float:
    """Dice similarity 2|A∩B| / (|A| + |B|); two empty masks score 1.0.

    Accepts :class:`~prostate_bench.volume_io.MaskVolume` objects or arrays.
    """
    a = np.asarray(getattr(pred, "labels", pred))
    b = np.asarray(getattr(gt, "labels", gt))
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch: {a.shape} vs {b.shape}")
    a, b = a != 0, b != 0
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def slice_dsc(pred, gt) -> list[float]:
    """Per-slice DSC along the first axis."""
    a = np.asarray(getattr(pred, "labels", pred))
    b = np.asarray(getattr(gt, "labels", gt))
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch: {a.shape} vs {b.shape}")
    return [dsc(x, y) for x, y in zip(a, b)]
