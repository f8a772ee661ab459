"""Training objectives: masked autoregressive CE, MAE+MSE regression, BCE+Dice masks.

All functions take torch tensors of any float dtype and return 0-d tensors so
they can be differentiated (and finite-difference checked at float64).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .datamodel import LossWeights

BCE_CLIP = 1e-7
DICE_EPS = 1.0


def spans_to_mask(length: int, spans: Sequence[tuple[int, int]], device=None) -> torch.Tensor:
    mask = torch.zeros(length, dtype=torch.bool, device=device)
    for start, end in spans:
        if not 0 <= start <= end <= length:
            raise ValueError(f"span {(start, end)} outside sequence of length {length}")
        mask[start:end] = True
    return mask


def text_ce(logits: torch.Tensor, targets: torch.Tensor, spans: Sequence[tuple[int, int]] | torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over the positions covered by ``spans``.

    ``logits[t]`` scores ``targets[t]``; shifting for next-token prediction is
    the caller's job. ``spans`` may also be a boolean mask.
    """
    mask = spans if isinstance(spans, torch.Tensor) else spans_to_mask(len(targets), spans, logits.device)
    if not bool(mask.any()):
        warnings.warn("text_ce: empty loss mask, returning 0", RuntimeWarning, stacklevel=2)
        return logits.sum() * 0.0
    logp = F.log_softmax(logits[mask], dim=-1)
    return -logp.gather(-1, targets[mask].unsqueeze(-1)).mean()


def nutrition_terms(pred: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if pred.shape != target.shape:
        raise ValueError(f"prediction/target length mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.numel() == 0:
        raise ValueError("nutrition_loss needs n ≥ 1")
    diff = target - pred
    return diff.abs().mean(), (diff * diff).mean()


def nutrition_loss(pred: torch.Tensor, target: torch.Tensor, lambda_mae: float, lambda_mse: float) -> torch.Tensor:
    mae, mse = nutrition_terms(pred, target)
    return lambda_mae * mae + lambda_mse * mse


def bce_per_mask(prob: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = prob.clamp(BCE_CLIP, 1.0 - BCE_CLIP)
    t = target.to(p.dtype)
    return -(t * torch.log(p) + (1 - t) * torch.log1p(-p)).flatten(1).mean(1)


def dice_per_mask(prob: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    p, t = prob.flatten(1), target.to(prob.dtype).flatten(1)
    return 1.0 - (2.0 * (p * t).sum(1) + eps) / (p.sum(1) + t.sum(1) + eps)


def mask_terms(prob: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> tuple[torch.Tensor, torch.Tensor]:
    if prob.shape != target.shape:
        raise ValueError(f"mask shape mismatch: {tuple(prob.shape)} vs {tuple(target.shape)}")
    if prob.ndim != 3 or prob.shape[0] == 0:
        raise ValueError("mask_loss expects a non-empty stack [n, H, W]")
    return bce_per_mask(prob, target).mean(), dice_per_mask(prob, target, eps).mean()


def mask_loss(prob: torch.Tensor, target: torch.Tensor, lambda_bce: float, lambda_dice: float, eps: float = DICE_EPS) -> torch.Tensor:
    bce, dice = mask_terms(prob, target, eps)
    return lambda_bce * bce + lambda_dice * dice


@dataclass
class LossBreakdown:
    l_txt: torch.Tensor
    l_nutrition: torch.Tensor
    mae_term: torch.Tensor
    mse_term: torch.Tensor
    l_mask: torch.Tensor
    bce_term: torch.Tensor
    dice_term: torch.Tensor
    total: torch.Tensor

    LOG_FIELDS = ("l_txt", "l_nutrition", "l_mask", "total")

    def as_floats(self) -> dict[str, float]:
        names = ("l_txt", "l_nutrition", "mae_term", "mse_term", "l_mask", "bce_term", "dice_term", "total")
        return {k: float(getattr(self, k).detach()) for k in names}

    def log_line(self, step: int, extra: Sequence[str] = ()) -> str:
        vals = [f"{float(getattr(self, k).detach()):.9g}" for k in self.LOG_FIELDS]
        return "\t".join([str(step), *vals, *extra])


def total_loss(
    weights: LossWeights,
    l_txt: torch.Tensor | None = None,
    nutrition: tuple[torch.Tensor, torch.Tensor] | None = None,
    mask: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> LossBreakdown:
    """Weighted sum of the three task losses; absent parts count as 0.

    ``nutrition`` is (mae, mse) and ``mask`` is (bce, dice), as returned by
    :func:`nutrition_terms` and :func:`mask_terms`.
    """
    zero = torch.zeros(())
    for t in (l_txt, *(nutrition or ()), *(mask or ())):
        if t is not None:
            zero = torch.zeros((), dtype=t.dtype, device=t.device)
            break
    l_txt = zero if l_txt is None else l_txt
    mae, mse = nutrition if nutrition is not None else (zero, zero)
    bce, dice = mask if mask is not None else (zero, zero)
    l_nut = weights.lambda_mae * mae + weights.lambda_mse * mse
    l_mask = weights.lambda_bce * bce + weights.lambda_dice * dice
    total = weights.lambda_txt * l_txt + weights.lambda_nutrition * l_nut + weights.lambda_mask * l_mask
    return LossBreakdown(l_txt, l_nut, mae, mse, l_mask, bce, dice, total)
