"""Multi-label evaluation: AP/mAP, F1 summaries, session accuracies, and a
cluster separation index over purified class features.

Average precision follows the precision-at-positive-ranks convention with
ties broken toward the lower sample id, so it is invariant to any strictly
monotone transform of the scores. Per-session mAP over all seen classes is
the session accuracy; their mean across sessions is the average accuracy and
the final one is the last accuracy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, MetricError

logger = logging.getLogger(__name__)


@dataclass
class PredictionMatrix:
    """Scores and ground truth for one evaluation pass, one column per class."""

    scores: np.ndarray
    truths: np.ndarray
    class_ids: tuple[int, ...]
    session: int = 0

    def validate(self) -> None:
        if self.scores.shape != self.truths.shape:
            raise ContractError(f"scores {self.scores.shape} vs truths {self.truths.shape}")
        if self.scores.ndim != 2 or self.scores.shape[1] != len(self.class_ids):
            raise ContractError(f"matrix {self.scores.shape} vs {len(self.class_ids)} class ids")


@dataclass
class SessionResult:
    session: int
    map: float
    cf1: float
    of1: float
    per_class_ap: dict[int, float] = field(default_factory=dict)
    per_class_forgetting: dict[int, float] = field(default_factory=dict)
    per_class_confidence: dict[int, tuple[float, float]] = field(default_factory=dict)
    ch_index: float = float("nan")
    wall_time: float = 0.0


def average_precision(scores: np.ndarray, truths: np.ndarray) -> float:
    """Mean precision at the rank of each positive, ranking by descending score.

    Equal scores keep ascending sample-id order (stable sort), so earlier
    samples rank first.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    truths = np.asarray(truths).reshape(-1)
    if scores.shape != truths.shape:
        raise ContractError(f"scores {scores.shape} vs truths {truths.shape}")
    n_pos = int(truths.sum())
    if n_pos == 0:
        raise MetricError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    ranked = truths[order]
    cum = np.cumsum(ranked)
    ranks = np.arange(1, ranked.shape[0] + 1)
    at_pos = ranked == 1
    return float((cum[at_pos] / ranks[at_pos]).sum() / n_pos)


def map_over_classes(pm: PredictionMatrix) -> tuple[float, dict[int, float]]:
    """Mean AP across class columns; zero-positive columns are skipped with a warning."""
    pm.validate()
    per_class: dict[int, float] = {}
    for col, cid in enumerate(pm.class_ids):
        if pm.truths[:, col].sum() == 0:
            logger.warning("class %d has no positives in the evaluation split; excluded from mAP", cid)
            continue
        per_class[cid] = average_precision(pm.scores[:, col], pm.truths[:, col])
    if not per_class:
        raise MetricError("no class had positives; mAP undefined")
    return float(np.mean(list(per_class.values()))), per_class


def f1_scores(pm: PredictionMatrix, threshold: float = 0.5) -> tuple[float, float]:
    """(CF1, OF1): macro and micro F1 after binarizing at the threshold.

    A class with neither predicted nor true positives contributes an F1 of 0.
    """
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold {threshold} outside (0, 1)")
    pm.validate()
    preds = pm.scores >= threshold
    truths = pm.truths == 1
    tp = (preds & truths).sum(axis=0).astype(np.float64)
    fp = (preds & ~truths).sum(axis=0).astype(np.float64)
    fn = (~preds & truths).sum(axis=0).astype(np.float64)
    denom = 2 * tp + fp + fn
    per_class = np.divide(2 * tp, denom, out=np.zeros_like(denom), where=denom > 0)
    cf1 = float(per_class.mean())
    total = 2 * tp.sum() + fp.sum() + fn.sum()
    of1 = float(2 * tp.sum() / total) if total > 0 else 0.0
    return cf1, of1


def session_accuracies(results: list[SessionResult]) -> tuple[float, float]:
    """(average accuracy, last accuracy) over the per-session mAPs."""
    if not results:
        raise MetricError("no session results")
    maps = [r.map for r in results]
    return float(np.mean(maps)), float(maps[-1])


def calinski_harabasz(features: np.ndarray, labels: np.ndarray) -> float:
    """Between/within variance ratio over labeled feature groups.

    Degenerate cases: zero within-scatter with separated means returns +inf
    (perfectly tight clusters); all points identical returns 0 with a warning.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ContractError(f"features {features.shape} vs labels {labels.shape}")
    groups = np.unique(labels)
    n, g = features.shape[0], groups.shape[0]
    if g < 2:
        raise MetricError("cluster index needs at least two groups")
    if n <= g:
        raise MetricError(f"cluster index needs more points ({n}) than groups ({g})")
    overall = features.mean(axis=0)
    between = 0.0
    within = 0.0
    for group in groups:
        rows = features[labels == group]
        centre = rows.mean(axis=0)
        diff = centre - overall
        between += rows.shape[0] * float(diff @ diff)
        within += float(((rows - centre) ** 2).sum())
    if within == 0.0:
        if between == 0.0:
            logger.warning("all feature rows identical; cluster index reported as 0")
            return 0.0
        return float("inf")
    return (between / (g - 1)) / (within / (n - g))
