from __future__ import annotations

import torch
import torch.nn.functional as F

IGNORE_INDEX = 255


class EmptyTargetError(ValueError):
    """No valid pixel to compute a loss over."""


def depth_loss(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor | None = None, lam: float = 0.5) -> torch.Tensor:
    """Scale-invariant log loss: mean(d^2) - lam * mean(d)^2 with d = log pred - log gt.

    Pixels with non-positive or non-finite ground truth are invalid.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and gt {tuple(gt.shape)} differ")
    mask = (gt > 0) & torch.isfinite(gt)
    if valid is not None:
        mask &= valid.bool()
    if not mask.any():
        raise EmptyTargetError("depth loss over zero valid pixels")
    d = torch.log(pred[mask]) - torch.log(gt[mask])
    return (d**2).mean() - lam * d.mean() ** 2


def seg_loss(logits: torch.Tensor, target: torch.Tensor, ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """Mean cross-entropy over non-ignored pixels; logits (B, K, H, W), target (B, H, W)."""
    if not (target != ignore_index).any():
        raise EmptyTargetError("every pixel is ignore_index")
    return F.cross_entropy(logits, target.long(), ignore_index=ignore_index)
