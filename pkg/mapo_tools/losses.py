"""Differentiable segmentation and preference objectives.

All objectives take a probability map ``p`` (a ``Tensor`` of shape ``[H,W]``)
and binary masks of the same shape. Probabilities are clamped to
``[PROB_MIN, PROB_MAX]`` before any log.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

from beartype import beartype

from mapo_tools.autodiff import Tensor, clamp, log, power, reduce, softplus
from mapo_tools.constants import DEFAULT_BETA, DEFAULT_LAMBDA, DEFAULT_TAU, DICE_SMOOTH
from mapo_tools.errors import ContractViolation
from mapo_tools.metrics import BinaryMask

SupervisedKind = Literal["dice_bce", "dice", "bce", "focal", "dice_focal"]


@dataclass(frozen=True)
class DpoConfig:
    beta: float = DEFAULT_BETA
    tau: float = DEFAULT_TAU
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ContractViolation(f"beta must be positive, got {self.beta}")
        if not 0.0 <= self.tau <= 1.0:
            raise ContractViolation(f"tau must lie in [0, 1], got {self.tau}")
        if not self.lam >= 0:
            raise ContractViolation(f"lambda must be non-negative, got {self.lam}")


def _check(p: Tensor, *masks: BinaryMask) -> None:
    for m in masks:
        if p.shape != m.shape:
            raise ContractViolation(f"Shape mismatch: probabilities {p.shape}, mask {m.shape}")


@beartype
def dice_loss(p: Tensor, gt: BinaryMask) -> Tensor:
    """1 - (2Σpg + ε) / (Σp + Σg + ε)."""
    _check(p, gt)
    g = Tensor(gt)
    numerator = reduce("sum", p * g) * 2.0 + DICE_SMOOTH
    denominator = reduce("sum", p) + (float(gt.sum()) + DICE_SMOOTH)
    return 1.0 - numerator / denominator


@beartype
def mask_loglik(p: Tensor, mask: BinaryMask) -> Tensor:
    """Per-pixel averaged Bernoulli log-likelihood of *mask* under *p*."""
    _check(p, mask)
    q = clamp(p)
    m = Tensor(mask)
    return reduce("mean", m * log(q) + (1.0 - m) * log(1.0 - q))


@beartype
def bce_loss(p: Tensor, gt: BinaryMask) -> Tensor:
    return -mask_loglik(p, gt)


@beartype
def focal_loss(p: Tensor, gt: BinaryMask, gamma: float = 2.0) -> Tensor:
    """Binary focal loss; ``gamma=0`` reduces to ``bce_loss``."""
    _check(p, gt)
    q = clamp(p)
    m = Tensor(gt)
    pos = m * power(1.0 - q, gamma) * log(q)
    neg = (1.0 - m) * power(q, gamma) * log(1.0 - q)
    return -reduce("mean", pos + neg)


@beartype
def supervised_loss(kind: SupervisedKind, p: Tensor, gt: BinaryMask) -> Tensor:
    match kind:
        case "dice_bce":
            return dice_loss(p, gt) + bce_loss(p, gt)
        case "dice":
            return dice_loss(p, gt)
        case "bce":
            return bce_loss(p, gt)
        case "focal":
            return focal_loss(p, gt)
        case "dice_focal":
            return dice_loss(p, gt) + focal_loss(p, gt)


@beartype
def dpo_margin_loss(logratio_pos: Tensor, logratio_neg: Tensor, beta: float) -> Tensor:
    """-log σ(β(r₊ - r₋)), evaluated as softplus(-Δ)."""
    delta = (logratio_pos - logratio_neg) * beta
    return softplus(-delta)


@beartype
def dpo_loss(
    p_theta: Tensor,
    p_ref: Tensor,
    pos: BinaryMask,
    neg: BinaryMask,
    cfg: DpoConfig,
) -> Tensor:
    """Preference loss of the preferred mask *pos* over *neg* against a frozen reference."""
    _check(p_theta, pos, neg)
    if p_ref.shape != p_theta.shape:
        raise ContractViolation(f"Reference shape {p_ref.shape} != policy shape {p_theta.shape}")
    if p_ref.requires_grad:
        raise ContractViolation("Reference probabilities must not carry gradients")
    ref_pos = mask_loglik(p_ref, pos).item()
    ref_neg = mask_loglik(p_ref, neg).item()
    logratio_pos = mask_loglik(p_theta, pos) - ref_pos
    logratio_neg = mask_loglik(p_theta, neg) - ref_neg
    return dpo_margin_loss(logratio_pos, logratio_neg, cfg.beta)


@beartype
def combined_loss(
    p_theta: Tensor,
    p_ref: Tensor,
    gt: BinaryMask,
    pos: BinaryMask,
    neg: BinaryMask,
    cfg: DpoConfig,
) -> Tensor:
    """λ·(Dice + BCE) + DPO."""
    supervised = dice_loss(p_theta, gt) + bce_loss(p_theta, gt)
    return supervised * cfg.lam + dpo_loss(p_theta, p_ref, pos, neg, cfg)
