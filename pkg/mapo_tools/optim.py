"""Adam / AdamW over named float64 parameter arrays, with global-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from beartype import beartype

from mapo_tools.constants import ADAM_BETA1, ADAM_BETA2, ADAM_EPS
from mapo_tools.errors import ContractViolation, NonFiniteGradientError
from mapo_tools.segnet import ModelState

OptimizerKind = Literal["adam", "adamw"]


@dataclass
class Moments:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@beartype
def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    moments: Moments,
    lr: float,
    step_index: int,
    weight_decay: float = 0.0,
) -> None:
    """One bias-corrected Adam update, in place. *step_index* counts from 1.

    A non-zero *weight_decay* applies decoupled (AdamW) decay before the Adam step.
    """
    if step_index < 1:
        raise ContractViolation(f"step_index counts from 1, got {step_index}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)

    bc1 = 1.0 - ADAM_BETA1**step_index
    bc2 = 1.0 - ADAM_BETA2**step_index
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractViolation(f"Gradient for {name} has shape {g.shape}, expected {p.shape}")
        if name not in moments.m:
            moments.m[name] = np.zeros_like(p)
            moments.v[name] = np.zeros_like(p)
        m, v = moments.m[name], moments.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


@beartype
def clip_grad_norm(
    grads: dict[str, np.ndarray], max_norm: float
) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients together so their global L2 norm is at most *max_norm*."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not math.isfinite(total) or total <= max_norm:
        return grads, total
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}, total


class Optimizer:
    """Adam (or AdamW) bound to a live ``ModelState``."""

    def __init__(
        self,
        state: ModelState,
        lr: float,
        kind: OptimizerKind = "adam",
        weight_decay: float = 0.0,
        clip_norm: float | None = None,
    ) -> None:
        if state.frozen:
            raise ContractViolation("Cannot optimise a frozen model")
        if lr <= 0:
            raise ContractViolation(f"Learning rate must be positive, got {lr}")
        self.state = state
        self.lr = lr
        self.weight_decay = weight_decay if kind == "adamw" else 0.0
        self.clip_norm = clip_norm
        self.moments = Moments()
        self.steps = 0
        self.last_grad_norm = 0.0

    def step(self) -> None:
        """Apply accumulated ``.grad`` values, then clear them."""
        grads = {
            name: t.grad for name, t in self.state.params.items() if t.grad is not None
        }
        if self.clip_norm is not None:
            grads, self.last_grad_norm = clip_grad_norm(grads, self.clip_norm)
        params = {name: t.data for name, t in self.state.params.items()}
        try:
            adam_step(
                params,
                grads,
                self.moments,
                self.lr,
                self.steps + 1,
                weight_decay=self.weight_decay,
            )
        finally:
            self.state.zero_grad()
        self.steps += 1
