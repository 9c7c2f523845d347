"""Supervised, consistency and combined objectives plus the ramp-up schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DataError, ShapeError

DICE_SMOOTH = 1e-5


@dataclass
class LossBreakdown:
    supervised: object
    consistency: object
    lambda_t: float
    total: object

    def as_floats(self) -> "LossBreakdown":
        f = lambda v: float(v.detach()) if torch.is_tensor(v) else float(v)
        return LossBreakdown(f(self.supervised), f(self.consistency), float(self.lambda_t), f(self.total))


def _batched(logits, labels):
    if logits.dim() == labels.dim() + 1 and logits.dim() in (4, 5):
        if logits.dim() == 4:
            logits, labels = logits[None], labels[None]
        return logits, labels
    raise ShapeError(f"logits {tuple(logits.shape)} incompatible with labels {tuple(labels.shape)}")


def dice_loss(probs: torch.Tensor, labels: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """1 - soft Dice, averaged over foreground classes 1..C-1 (whole batch pooled)."""
    scores = []
    for c in range(1, probs.shape[1]):
        g = (labels == c).to(probs.dtype)
        p = probs[:, c]
        scores.append((2 * (p * g).sum() + smooth) / (p.sum() + g.sum() + smooth))
    return 1 - torch.stack(scores).mean()


def supervised_loss(logits: torch.Tensor, labels: torch.Tensor, weight: torch.Tensor | None = None) -> torch.Tensor:
    """0.5 * cross-entropy + 0.5 * Dice loss. ``weight`` optionally reweights CE per voxel."""
    logits, labels = _batched(logits, torch.as_tensor(labels))
    if logits.shape[2:] != labels.shape[1:] or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {tuple(logits.shape)} incompatible with labels {tuple(labels.shape)}")
    labels = labels.long()
    C = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= C):
        raise DataError(f"labels must lie in [0, {C})")
    if weight is None:
        ce = F.cross_entropy(logits, labels)
    else:
        ce = (F.cross_entropy(logits, labels, reduction="none") * weight).mean()
    return 0.5 * ce + 0.5 * dice_loss(torch.softmax(logits, dim=1), labels)


def consistency_loss(student_pred: torch.Tensor, teacher_pred: torch.Tensor, weight=None) -> torch.Tensor:
    """Mean over voxels of ``w * sum_c (p_s - p_t)**2``; class axis at -4.

    ``weight`` is ``None`` (uniform 1), a per-voxel tensor, or an object with a
    ``.weight`` tensor (an ``UncertaintyMap``).
    """
    if student_pred.shape != teacher_pred.shape:
        raise ShapeError(f"prediction shapes differ: {tuple(student_pred.shape)} vs {tuple(teacher_pred.shape)}")
    sq = ((student_pred - teacher_pred) ** 2).sum(dim=-4)
    if weight is None:
        return sq.mean()
    w = getattr(weight, "weight", weight)
    w = torch.as_tensor(w, dtype=sq.dtype)
    try:
        w = torch.broadcast_to(w, sq.shape)
    except RuntimeError as exc:
        raise ShapeError(f"weight shape {tuple(w.shape)} does not match voxels {tuple(sq.shape)}") from exc
    return (w * sq).mean()


def pseudo_label_loss(student_logits: torch.Tensor, teacher_pred: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against the hard argmax of the teacher (no confidence filter)."""
    target = teacher_pred.argmax(dim=1).detach()
    return F.cross_entropy(student_logits, target)


def rampup(t, t_max) -> float:
    """0.1 * exp(-5 (1 - t/t_max)^2)."""
    if t_max <= 0:
        raise ConfigurationError(f"t_max must be positive, got {t_max}")
    if t < 0 or t > t_max:
        raise ConfigurationError(f"t={t} outside [0, {t_max}]")
    return 0.1 * math.exp(-5.0 * (1.0 - t / t_max) ** 2)


def total_objective(sup, cons, t, t_max) -> LossBreakdown:
    lam = rampup(t, t_max)
    return LossBreakdown(supervised=sup, consistency=cons, lambda_t=lam, total=sup + lam * cons)
