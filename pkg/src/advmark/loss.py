"""Landmark, contour, discriminator and adversarial losses, and the combined objective.

Every loss is a mean (over pixels and batch items). Probability-space versions
clamp at ``EPS`` before taking logs; the ``*_from_logits`` variants are the
numerically stable forms used during training and agree with them exactly in
exact arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DomainError, ShapeMismatch

EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0  # contour term
    lambda2: float = 0.02  # adversarial term

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


def _t(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _check_shapes(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")


def _class_dim(x: torch.Tensor) -> int:
    return 0 if x.dim() == 3 else 1


def landmark_loss(pred, target) -> torch.Tensor:
    """Cross-entropy between per-pixel class probabilities and the soft class target."""
    pred = _t(pred)
    target = _t(getattr(target, "probs", target), pred)
    _check_shapes(pred, target)
    ce = -(target * torch.log(pred.clamp_min(EPS))).sum(dim=_class_dim(pred))
    return ce.mean()


def landmark_loss_from_logits(logits: torch.Tensor, target) -> torch.Tensor:
    target = _t(getattr(target, "probs", target), logits)
    _check_shapes(logits, target)
    dim = _class_dim(logits)
    return -(target * F.log_softmax(logits, dim=dim)).sum(dim=dim).mean()


def contour_loss(pred, target) -> torch.Tensor:
    """Binary cross-entropy of the contour probability map against the fuzzy target."""
    pred = _t(pred)
    target = _t(getattr(target, "likelihood", target), pred)
    if target.shape != pred.shape and target.numel() == pred.numel():
        target = target.reshape(pred.shape)
    _check_shapes(pred, target)
    bce = -(target * torch.log(pred.clamp_min(EPS)) + (1 - target) * torch.log((1 - pred).clamp_min(EPS)))
    return bce.mean()


def contour_loss_from_logits(logits: torch.Tensor, target) -> torch.Tensor:
    target = _t(getattr(target, "likelihood", target), logits)
    if target.shape != logits.shape and target.numel() == logits.numel():
        target = target.reshape(logits.shape)
    _check_shapes(logits, target)
    return F.binary_cross_entropy_with_logits(logits, target, reduction="mean")


def _check_prob(name: str, p: torch.Tensor) -> None:
    if torch.isnan(p).any() or (p < 0).any() or (p > 1).any():
        raise DomainError(f"{name} must lie in [0, 1]")


def discriminator_loss(d_real, d_fake) -> torch.Tensor:
    """``-log D(x, y) - log(1 - D(x, S(x)))`` averaged over the batch."""
    d_real, d_fake = _t(d_real), _t(d_fake)
    _check_prob("d_real", d_real)
    _check_prob("d_fake", d_fake)
    return (-torch.log(d_real.clamp_min(EPS)) - torch.log((1 - d_fake).clamp_min(EPS))).mean()


def discriminator_loss_from_logits(real_logit: torch.Tensor, fake_logit: torch.Tensor) -> torch.Tensor:
    return (F.softplus(-real_logit) + F.softplus(fake_logit)).mean()


def adversarial_generator_loss(d_fake) -> torch.Tensor:
    """Non-saturating detector loss ``-log D(x, S(x))``."""
    d_fake = _t(d_fake)
    _check_prob("d_fake", d_fake)
    return (-torch.log(d_fake.clamp_min(EPS))).mean()


def adversarial_generator_loss_from_logits(fake_logit: torch.Tensor) -> torch.Tensor:
    return F.softplus(-fake_logit).mean()


def total_detector_loss(lm, cnt, adv, w: LossWeights = LossWeights()):
    return lm + w.lambda1 * cnt + w.lambda2 * adv
