"""Probing unknown classes by interpolating absent-class features.

During training each sample's purified class features are split by the
effective label vector into present (positive) and absent rows. A convex
combination of the absent rows, with Beta-distributed weights normalized onto
the simplex, acts as a stand-in feature for the unknown class and is trained
toward target 1 on the unknown output. The weights are constants: gradients
flow through the absent feature rows, not through the sampled coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError

WEIGHT_RESAMPLE_LIMIT = 8
_WEIGHT_SUM_FLOOR = 1e-12


@dataclass
class FeaturePartition:
    """Present/absent split of one sample's class feature rows."""

    present: np.ndarray
    absent: np.ndarray
    present_ids: tuple[int, ...]
    absent_ids: tuple[int, ...]
    present_rows: np.ndarray
    absent_rows: np.ndarray


@dataclass
class UnknownSample:
    feature: np.ndarray
    weights: np.ndarray
    target: int = 1


def partition_features(o_s: np.ndarray, y_effective: np.ndarray,
                       class_ids: tuple[int, ...] | None = None) -> FeaturePartition:
    """Split feature rows into present and absent groups by the label vector."""
    if o_s.ndim != 2 or y_effective.shape != (o_s.shape[0],):
        raise ShapeError(f"partition: features {o_s.shape} vs labels {y_effective.shape}")
    ids = tuple(class_ids) if class_ids is not None else tuple(range(o_s.shape[0]))
    if len(ids) != o_s.shape[0]:
        raise ShapeError(f"partition: {len(ids)} class ids for {o_s.shape[0]} rows")
    mask = np.asarray(y_effective) == 1
    present_rows = np.flatnonzero(mask)
    absent_rows = np.flatnonzero(~mask)
    return FeaturePartition(
        present=o_s[present_rows],
        absent=o_s[absent_rows],
        present_ids=tuple(ids[i] for i in present_rows),
        absent_ids=tuple(ids[i] for i in absent_rows),
        present_rows=present_rows,
        absent_rows=absent_rows,
    )


def normalize_weights(lam: np.ndarray) -> np.ndarray:
    """Project raw non-negative coefficients onto the simplex."""
    lam = np.asarray(lam, dtype=np.float64)
    total = lam.sum()
    if total <= _WEIGHT_SUM_FLOOR:
        raise ContractError("weights sum to (nearly) zero and cannot be normalized")
    return lam / total


def combine_features(absent: np.ndarray, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination of the absent rows under normalized weights."""
    if absent.ndim != 2 or lam.shape != (absent.shape[0],):
        raise ShapeError(f"combine: {absent.shape} rows vs {lam.shape} weights")
    lam_bar = normalize_weights(lam)
    return lam_bar @ absent, lam_bar


def sample_simplex_weights(m: int, alpha: float, beta: float, rng: np.random.Generator) -> np.ndarray:
    """Draw m Beta(alpha, beta) coefficients and normalize them onto the simplex.

    A draw whose raw sum is numerically zero is retried up to
    ``WEIGHT_RESAMPLE_LIMIT`` times, after which uniform weights are used.
    """
    if m < 1:
        raise ContractError(f"need at least one weight, got m={m}")
    if alpha <= 0.0 or beta <= 0.0:
        raise ContractError(f"Beta parameters must be positive, got ({alpha}, {beta})")
    for _ in range(WEIGHT_RESAMPLE_LIMIT):
        lam = rng.beta(alpha, beta, size=m)
        if lam.sum() > _WEIGHT_SUM_FLOOR:
            return lam / lam.sum()
    return np.full(m, 1.0 / m)


def synthesize_unknown(absent: np.ndarray, alpha: float, beta: float,
                       rng: np.random.Generator) -> UnknownSample | None:
    """Build one unknown-class sample from the absent feature rows.

    Returns None when there are no absent rows, in which case the batch item
    simply contributes no unknown term. With a single absent row the feature
    is that row exactly.
    """
    if absent.ndim != 2:
        raise ShapeError(f"synthesize: absent rows must be rank 2, got {absent.shape}")
    if absent.shape[0] == 0:
        return None
    lam_bar = sample_simplex_weights(absent.shape[0], alpha, beta, rng)
    return UnknownSample(feature=lam_bar @ absent, weights=lam_bar, target=1)
