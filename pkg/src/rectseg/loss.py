"""Pseudo-label cross-entropy and the variance-rectified objective.

Per valid pixel j the rectified loss is

    exp(-D_j) * ce_j + D_j

where D_j is the disagreement between the primary and auxiliary heads and
ce_j the cross-entropy of the primary head against the frozen pseudo label.
A large D_j switches the pixel's label term off; the additive D_j keeps the
model from declaring everything uncertain.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .tensor import (Tensor, clamp_min, exp, gather_last, log_softmax, mul, scale, sub,
                     tsum)

PROB_FLOOR = 1e-8
LOG_PROB_FLOOR = float(np.log(PROB_FLOOR))

DISTANCES = ("kl_forward", "kl_reversed", "mse")
VARIANCE_GRAD_MODES = ("detached", "full")


class EmptyMaskError(ValueError):
    """No valid pixel is left to supervise."""


@dataclass(frozen=True)
class RectifiedLossConfig:
    distance: str = "kl_forward"
    variance_grad: str = "detached"
    aux_ce_weight: float = 0.0

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise ValueError(f"unknown distance {self.distance!r}; expected one of {DISTANCES}")
        if self.variance_grad not in VARIANCE_GRAD_MODES:
            raise ValueError(f"unknown variance_grad {self.variance_grad!r}")
        if self.aux_ce_weight < 0:
            raise ValueError("aux_ce_weight must be nonnegative")


def clamped_log_probs(logits: Tensor) -> Tensor:
    """log(max(softmax(logits), 1e-8)), computed from log-softmax."""
    return clamp_min(log_softmax(logits), LOG_PROB_FLOOR)


def masked_mean(values: Tensor, valid: np.ndarray) -> Tensor:
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != values.shape:
        raise ValueError(f"mask shape {valid.shape} != value shape {values.shape}")
    count = int(valid.sum())
    if count == 0:
        raise EmptyMaskError("valid mask is empty; no training signal")
    return scale(tsum(mul(values, Tensor(valid.astype(np.float64)))), 1.0 / count)


def pixel_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    return scale(gather_last(clamped_log_probs(logits), labels), -1.0)


def cross_entropy(logits: Tensor, labels: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean of -log P[label] over valid pixels."""
    return masked_mean(pixel_cross_entropy(logits, labels), valid)


def pixel_distance(logits: Tensor, aux_logits: Tensor, kind: str) -> Tensor:
    """Per-pixel head disagreement (differentiable), shape logits.shape[:-1]."""
    if logits.shape != aux_logits.shape:
        raise ValueError(f"head shapes differ: {logits.shape} vs {aux_logits.shape}")
    if kind not in DISTANCES:
        raise ValueError(f"unknown distance {kind!r}; expected one of {DISTANCES}")
    lp = clamped_log_probs(logits)
    lq = clamped_log_probs(aux_logits)
    if kind == "mse":
        diff = sub(exp(log_softmax(logits)), exp(log_softmax(aux_logits)))
        return tsum(mul(diff, diff), axis=-1)
    if kind == "kl_forward":
        p = exp(log_softmax(logits))
        d = tsum(mul(p, sub(lp, lq)), axis=-1)
    else:
        q = exp(log_softmax(aux_logits))
        d = tsum(mul(q, sub(lq, lp)), axis=-1)
    # clamping can push KL a hair below zero
    return clamp_min(d, 0.0)


def rectified_loss_terms(logits: Tensor, aux_logits: Tensor, labels: np.ndarray, valid: np.ndarray,
                         cfg: RectifiedLossConfig = RectifiedLossConfig()) -> Tuple[Tensor, float, float]:
    """(loss, mean damped CE term, mean distance term) over valid pixels."""
    d = pixel_distance(logits, aux_logits, cfg.distance)
    ce = pixel_cross_entropy(logits, labels)
    if cfg.variance_grad == "detached":
        weight = Tensor(np.exp(-d.data))
    else:
        weight = exp(scale(d, -1.0))
    damped = mul(weight, ce)
    loss = masked_mean(damped + d, valid)
    ce_term = float(damped.data[np.asarray(valid, bool)].mean())
    var_term = float(d.data[np.asarray(valid, bool)].mean())
    if cfg.aux_ce_weight > 0:
        loss = loss + scale(cross_entropy(aux_logits, labels, valid), cfg.aux_ce_weight)
    return loss, ce_term, var_term


def rectified_loss(logits: Tensor, aux_logits: Tensor, labels: np.ndarray, valid: np.ndarray,
                   cfg: RectifiedLossConfig = RectifiedLossConfig()) -> Tensor:
    return rectified_loss_terms(logits, aux_logits, labels, valid, cfg)[0]


def loss_floor_probe(history: Sequence[float]) -> dict:
    """Floor = mean of the last 10% of a loss history (at least 100 entries)."""
    h = np.asarray(history, dtype=np.float64)
    if h.size < 100:
        raise ValueError("loss history needs at least 100 entries")
    tail = h[-max(1, h.size // 10):]
    floor = float(tail.mean())
    return {"converged_to_zero": floor < 1e-3, "floor": floor}
