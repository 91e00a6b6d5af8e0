"""Recall enhancement: per-class confidence distributions and pseudo-labeling.

At the end of a session, the per-class mean and variance of predicted
confidence are fitted over that session's ground-truth positives. One session
later those means serve as per-class pseudo-label thresholds, replacing a
single global cutoff. The table also keeps a per-session history of the
fitted means, from which confidence forgetting (the largest drop from any
earlier session to the latest) is computed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import ContractError, MetricError, StateError

logger = logging.getLogger(__name__)

DEFAULT_FALLBACK_EPSILON = 0.8


@dataclass
class ClassConfidenceStats:
    mean: float
    var: float
    count: int


@dataclass
class ConfidenceDistributionTable:
    """Per-class confidence statistics plus their per-session history."""

    stats: dict[int, ClassConfidenceStats] = field(default_factory=dict)
    history: dict[int, dict[int, float]] = field(default_factory=dict)
    last_session: int = 0

    def threshold(self, class_id: int, sigma_coef: float = 0.0,
                  fallback: float = DEFAULT_FALLBACK_EPSILON) -> float:
        entry = self.stats.get(class_id)
        if entry is None:
            return fallback
        return entry.mean - sigma_coef * np.sqrt(entry.var)

    def to_dict(self) -> dict:
        return {
            "stats": {
                str(k): {"mean": s.mean, "var": s.var, "count": s.count}
                for k, s in sorted(self.stats.items())
            },
            "history": {
                str(k): {str(t): v for t, v in sorted(h.items())}
                for k, h in sorted(self.history.items())
            },
            "last_session": self.last_session,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ConfidenceDistributionTable":
        table = cls(last_session=payload["last_session"])
        for k, s in payload["stats"].items():
            table.stats[int(k)] = ClassConfidenceStats(mean=s["mean"], var=s["var"], count=s["count"])
        for k, h in payload["history"].items():
            table.history[int(k)] = {int(t): v for t, v in h.items()}
        return table


def fit_from_matrix(probs: np.ndarray, positives: np.ndarray, class_ids: Iterable[int],
                    session: int) -> ConfidenceDistributionTable:
    """Fit per-class stats from an (N, M) probability matrix and 0/1 positives.

    Statistics use ground-truth positives only; the variance is the population
    variance over those positives. Classes with zero positives are excluded
    with a warning and later fall back to the global default threshold.
    """
    ids = list(class_ids)
    if probs.shape != positives.shape or probs.shape[1] != len(ids):
        raise ContractError(
            f"fit_from_matrix: probs {probs.shape}, positives {positives.shape}, {len(ids)} classes"
        )
    table = ConfidenceDistributionTable(last_session=session)
    for col, cid in enumerate(ids):
        mask = positives[:, col] == 1
        n = int(mask.sum())
        if n == 0:
            logger.warning("class %d has no positives in session %d; excluded from the table", cid, session)
            continue
        vals = probs[mask, col]
        mean = float(vals.mean())
        table.stats[cid] = ClassConfidenceStats(mean=mean, var=float(vals.var()), count=n)
        table.history[cid] = {session: mean}
    return table


def fit_distributions(predict: Callable[[object], np.ndarray], data: list, class_ids: Iterable[int],
                      session: int) -> ConfidenceDistributionTable:
    """Fit a fresh table by running ``predict`` over ``data``.

    ``predict(sample)`` must return probabilities aligned with ``class_ids``;
    ground-truth positives are read from ``sample.labels_full``. The samples
    should be the training pool of the session where these classes are
    current, the one point where their true labels are available.
    """
    ids = list(class_ids)
    probs = np.empty((len(data), len(ids)))
    positives = np.empty((len(data), len(ids)), dtype=np.int8)
    for i, sample in enumerate(data):
        probs[i] = predict(sample)
        positives[i] = sample.labels_full[ids]
    return fit_from_matrix(probs, positives, ids, session)


def update_queue(table: ConfidenceDistributionTable, new: ConfidenceDistributionTable,
                 session: int, mode: str = "replace", rho: float = 0.5) -> None:
    """Merge a freshly fitted table into the persistent one.

    ``replace`` keeps the newest statistics; ``ema`` blends an existing entry
    with the incoming one, where ``rho`` is the weight on the new values. The
    history always records the raw per-session means.
    """
    if mode not in ("replace", "ema"):
        raise ContractError(f"unknown queue mode {mode!r}")
    if session <= table.last_session:
        raise StateError(f"stale queue update: session {session} after {table.last_session}")
    for cid, stats in new.stats.items():
        old = table.stats.get(cid)
        if old is not None and mode == "ema":
            table.stats[cid] = ClassConfidenceStats(
                mean=(1.0 - rho) * old.mean + rho * stats.mean,
                var=(1.0 - rho) * old.var + rho * stats.var,
                count=stats.count,
            )
        else:
            table.stats[cid] = ClassConfidenceStats(stats.mean, stats.var, stats.count)
        table.history.setdefault(cid, {})[session] = stats.mean
    table.last_session = session


# ---------------------------------------------------------------------------
# pseudo-label strategies


def pseudo_label_re(probs: np.ndarray, class_ids: Iterable[int], table: ConfidenceDistributionTable,
                    sigma_coef: float = 0.0, fallback: float = DEFAULT_FALLBACK_EPSILON) -> np.ndarray:
    """Per-class thresholds: positive when p_k >= mu_k (optionally mu_k - c*sigma_k)."""
    ids = list(class_ids)
    if probs.shape != (len(ids),):
        raise ContractError(f"probs shape {probs.shape} vs {len(ids)} class ids")
    thresholds = np.array([table.threshold(cid, sigma_coef, fallback) for cid in ids])
    return (probs >= thresholds).astype(np.int8)


def pseudo_label_static(probs: np.ndarray, epsilon: float) -> np.ndarray:
    """Single global threshold; positive when p_k >= epsilon."""
    if not 0.0 < epsilon < 1.0:
        raise ContractError(f"epsilon {epsilon} outside (0, 1)")
    return (probs >= epsilon).astype(np.int8)


def pseudo_label_topk(probs: np.ndarray, k: int) -> np.ndarray:
    """Exactly min(k, len(probs)) positives; ties go to the lower class index."""
    if k < 0:
        raise ContractError(f"top-k needs k >= 0, got {k}")
    out = np.zeros(probs.shape[0], dtype=np.int8)
    if k == 0:
        return out
    order = np.argsort(-probs, kind="stable")
    out[order[: min(k, probs.shape[0])]] = 1
    return out


def confidence_forgetting(table: ConfidenceDistributionTable, class_id: int, final_session: int) -> float:
    """Largest drop in mean confidence from any earlier session to the final one."""
    history = table.history.get(class_id)
    if not history or final_session not in history:
        raise MetricError(f"no confidence history for class {class_id} at session {final_session}")
    earlier = [v for t, v in history.items() if t < final_session]
    if not earlier:
        raise MetricError(f"class {class_id} has no history before session {final_session}")
    return max(earlier) - history[final_session]
