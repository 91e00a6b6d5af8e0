"""Weighted asymmetric multi-label loss.

Positives and negatives get separate focusing exponents, negatives are
hard-shifted by a probability margin before focusing, and each class carries
a weight. New-session classes are up-weighted by sqrt(total classes / new
classes) to balance the pseudo-labeled old classes against the scarcer new
annotations. With both exponents and the margin at zero the loss reduces to
mean binary cross-entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, clip, log, mul, power, relu, scale, sub, sum_all
from .errors import ConfigError, ContractError, NumericError

PROB_FLOOR = 1e-8


@dataclass
class LossConfig:
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    margin: float = 0.05

    def validate(self) -> None:
        if self.gamma_pos < 0.0 or self.gamma_neg < 0.0:
            raise ConfigError("focusing exponents must be non-negative")
        if self.gamma_neg < self.gamma_pos:
            raise ConfigError("gamma_neg must be at least gamma_pos")
        if not 0.0 <= self.margin < 1.0:
            raise ConfigError(f"margin {self.margin} outside [0, 1)")


def new_class_weight(n_total: int, n_new: int) -> float:
    """sqrt(|all seen classes| / |new classes|); 1.0 in the first session."""
    if n_new < 1 or n_total < n_new:
        raise ContractError(f"bad class counts: total {n_total}, new {n_new}")
    return math.sqrt(n_total / n_new)


def class_weights(n_old: int, n_new: int, include_unknown: bool = False) -> np.ndarray:
    """Per-output weights: 1 for old classes and the unknown, boosted for new ones."""
    if n_old < 0 or n_new < 1:
        raise ContractError(f"bad class counts: old {n_old}, new {n_new}")
    w_new = new_class_weight(n_old + n_new, n_new)
    parts = [np.ones(n_old), np.full(n_new, w_new)]
    if include_unknown:
        parts.append(np.ones(1))
    return np.concatenate(parts)


def wasl_loss(probs: Tensor, targets: np.ndarray, weights: np.ndarray, config: LossConfig) -> Tensor:
    """Weighted asymmetric loss over a column of probabilities.

    ``probs`` is a (K, 1) tensor of per-output probabilities; ``targets`` and
    ``weights`` are length-K arrays. Probabilities are clipped away from 0
    and 1 before any log. The result is the negative weighted mean over the
    K outputs, so it is always non-negative, and it stays differentiable end
    to end including the focusing factors.
    """
    config.validate()
    k = probs.data.shape[0]
    if probs.data.ndim != 2 or probs.data.shape[1] != 1:
        raise ContractError(f"probs must be a (K, 1) column, got {probs.data.shape}")
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if targets.shape[0] != k or weights.shape[0] != k:
        raise ContractError(f"lengths differ: {k} probs, {targets.shape[0]} targets, {weights.shape[0]} weights")
    if np.any((probs.data < 0.0) | (probs.data > 1.0)):
        raise NumericError("probabilities outside [0, 1]")

    y = Tensor(targets.reshape(-1, 1))
    w = Tensor(weights.reshape(-1, 1))
    one = Tensor(np.ones((k, 1)))

    p = clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    pos_term = mul(power(sub(one, p), config.gamma_pos), log(p))
    p_shift = relu(sub(p, Tensor([[config.margin]]))) if config.margin > 0.0 else p
    neg_term = mul(power(p_shift, config.gamma_neg), log(clip(sub(one, p_shift), PROB_FLOOR, 1.0)))
    combined = add(mul(y, pos_term), mul(sub(one, y), neg_term))
    return scale(sum_all(mul(w, combined)), -1.0 / k)
