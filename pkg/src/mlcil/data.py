"""Synthetic multi-label patch-token datasets with session protocols.

Each sample is a grid of ``h * w`` token vectors. Every class owns a fixed
unit-norm prototype; for each positive label the prototype, scaled by a
per-sample amplitude, is written into ``occupancy`` randomly chosen disjoint
patches. All remaining patches hold isotropic Gaussian noise. Labels come
from a small co-occurrence model and every sample carries at least one
positive.

Label model. The co-occurrence matrix is symmetric with entries in [0, 1].
The diagonal holds independent per-class base rates; an off-diagonal entry
q = M[a, b] is the probability that the pair (a, b) fires as a joint event
and forces both labels on. A label vector is redrawn when it has no positive
or when its total patch demand ``occupancy * positives`` exceeds the grid.

The incremental protocol splits class ids, ordered by lexicographic class
name, into a base session of ``base_size`` classes followed by increments of
``increment`` classes each. A sample belongs to session t's pool when it has
at least one positive among that session's classes, so the same sample can
appear in several pools. Masking restricts labels to the current session's
classes, which is what makes past labels missing during later sessions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DatasetError, ProtocolError

logger = logging.getLogger(__name__)

AMPLITUDE_RANGE = (0.8, 1.2)


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    name: str
    prototype: np.ndarray
    occupancy: int


@dataclass
class MultiLabelSample:
    """One sample: ``tokens`` is (L, d); ``labels_full`` is a 0/1 vector over all classes."""

    sample_id: int
    tokens: np.ndarray
    labels_full: np.ndarray


@dataclass(frozen=True)
class SessionProtocol:
    """Class-id partition into a base session plus fixed-size increments."""

    base_size: int
    increment: int
    partitions: tuple[tuple[int, ...], ...]

    @property
    def num_sessions(self) -> int:
        return len(self.partitions)

    def classes_of(self, t: int) -> tuple[int, ...]:
        if not 1 <= t <= self.num_sessions:
            raise ProtocolError(f"session index {t} outside 1..{self.num_sessions}")
        return self.partitions[t - 1]

    def seen_classes(self, t: int) -> tuple[int, ...]:
        """All class ids learned in sessions 1..t, in learning order."""
        if not 1 <= t <= self.num_sessions:
            raise ProtocolError(f"session index {t} outside 1..{self.num_sessions}")
        seen: list[int] = []
        for part in self.partitions[:t]:
            seen.extend(part)
        return tuple(seen)


@dataclass
class DatasetConfig:
    num_classes: int = 20
    feature_dim: int = 16
    grid_h: int = 4
    grid_w: int = 4
    samples_per_session: int = 600
    num_sessions: int = 6
    cooccurrence: np.ndarray | None = None
    noise_std: float = 0.3
    occupancy: int = 2
    test_fraction: float = 0.2
    seed: int = 0

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if self.feature_dim < 1 or self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError("feature_dim and grid extents must be positive")
        if self.samples_per_session < 1 or self.num_sessions < 1:
            raise ConfigError("samples_per_session and num_sessions must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.occupancy < 1 or self.occupancy > self.num_patches:
            raise ConfigError(
                f"occupancy {self.occupancy} cannot fit a {self.grid_h}x{self.grid_w} grid"
            )
        m = self.cooccurrence
        if m is None:
            return
        if m.shape != (self.num_classes, self.num_classes):
            raise ConfigError(f"cooccurrence matrix must be {self.num_classes} square, got {m.shape}")
        if not np.allclose(m, m.T):
            raise ConfigError("cooccurrence matrix must be symmetric")
        if np.any(m < 0.0) or np.any(m > 1.0):
            raise ConfigError("cooccurrence entries must lie in [0, 1]")


@dataclass
class Dataset:
    config: DatasetConfig
    classes: list[ClassSpec]
    samples: list[MultiLabelSample] = field(default_factory=list)


def default_class_names(num_classes: int) -> list[str]:
    width = max(2, len(str(num_classes - 1)))
    return [f"c{i:0{width}d}" for i in range(num_classes)]


def build_cooccurrence(
    num_classes: int,
    base_rate: float = 0.12,
    pairs: list[tuple[int, int, float]] | None = None,
) -> np.ndarray:
    """Convenience constructor: uniform base rates plus a few boosted pairs."""
    if not 0.0 <= base_rate <= 1.0:
        raise ConfigError(f"base_rate {base_rate} outside [0, 1]")
    m = np.zeros((num_classes, num_classes))
    np.fill_diagonal(m, base_rate)
    for a, b, p in pairs or []:
        if a == b or not (0 <= a < num_classes and 0 <= b < num_classes):
            raise ConfigError(f"bad co-occurrence pair ({a}, {b})")
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"pair probability {p} outside [0, 1]")
        m[a, b] = m[b, a] = p
    return m


def build_protocol(num_classes: int, base_size: int, increment: int, names: list[str]) -> SessionProtocol:
    """Partition class ids, ordered by name, into base + fixed increments.

    ``base_size == 0`` means there is no distinguished base session and the
    classes split into equal chunks of ``increment``.
    """
    if len(names) != num_classes:
        raise ProtocolError(f"got {len(names)} names for {num_classes} classes")
    if len(set(names)) != num_classes:
        raise ProtocolError("class names must be unique")
    if base_size < 0 or increment < 1:
        raise ProtocolError(f"invalid sizes: base {base_size}, increment {increment}")
    if base_size > num_classes:
        raise ProtocolError(f"base size {base_size} exceeds {num_classes} classes")
    remaining = num_classes - base_size
    if remaining % increment != 0:
        raise ProtocolError(
            f"{remaining} classes after the base session do not divide into increments of {increment}"
        )
    order = sorted(range(num_classes), key=lambda cid: names[cid])
    sizes = [base_size] if base_size > 0 else []
    sizes.extend([increment] * (remaining // increment))
    if not sizes:
        raise ProtocolError("protocol has no sessions")
    partitions = []
    at = 0
    for size in sizes:
        partitions.append(tuple(order[at : at + size]))
        at += size
    return SessionProtocol(base_size=base_size, increment=increment, partitions=tuple(partitions))


def _draw_labels(rng: np.random.Generator, diag: np.ndarray, pair_index: np.ndarray,
                 pair_probs: np.ndarray, occupancy: int, num_patches: int) -> np.ndarray:
    """Draw one label vector, redrawing until it is usable."""
    num_classes = diag.shape[0]
    while True:
        y = rng.random(num_classes) < diag
        if pair_probs.size:
            fired = rng.random(pair_probs.size) < pair_probs
            for (a, b), hit in zip(pair_index, fired):
                if hit:
                    y[a] = True
                    y[b] = True
        n_pos = int(y.sum())
        if n_pos == 0:
            continue
        if occupancy * n_pos > num_patches:
            continue
        return y.astype(np.int8)


def generate_dataset(config: DatasetConfig) -> Dataset:
    """Generate prototypes and samples deterministically from ``config.seed``.

    The total sample count is ``samples_per_session * num_sessions`` grown by
    the held-out test fraction; :func:`split_train_test` separates the two
    parts afterwards.
    """
    config.validate()
    if config.cooccurrence is None:
        config.cooccurrence = build_cooccurrence(config.num_classes)
        config.validate()
    rng = np.random.default_rng([config.seed, 0x5EED])
    names = default_class_names(config.num_classes)

    classes: list[ClassSpec] = []
    for cid in range(config.num_classes):
        vec = rng.standard_normal(config.feature_dim)
        vec /= np.linalg.norm(vec)
        classes.append(ClassSpec(class_id=cid, name=names[cid], prototype=vec, occupancy=config.occupancy))

    m = config.cooccurrence
    diag = np.diag(m).copy()
    upper = [(a, b) for a in range(config.num_classes) for b in range(a + 1, config.num_classes) if m[a, b] > 0]
    pair_index = np.array(upper, dtype=np.int64).reshape(-1, 2)
    pair_probs = np.array([m[a, b] for a, b in upper])

    n_train = config.samples_per_session * config.num_sessions
    n_total = n_train + int(round(config.test_fraction * n_train))
    L, d = config.num_patches, config.feature_dim

    samples: list[MultiLabelSample] = []
    for sid in range(n_total):
        y = _draw_labels(rng, diag, pair_index, pair_probs, config.occupancy, L)
        tokens = rng.standard_normal((L, d)) * config.noise_std
        positives = np.flatnonzero(y)
        order = rng.permutation(L)
        amp = rng.uniform(*AMPLITUDE_RANGE, size=positives.size)
        for j, cid in enumerate(positives):
            patch_ids = order[j * config.occupancy : (j + 1) * config.occupancy]
            tokens[patch_ids] = amp[j] * classes[cid].prototype
        samples.append(MultiLabelSample(sample_id=sid, tokens=tokens, labels_full=y))
    return Dataset(config=config, classes=classes, samples=samples)


def split_train_test(dataset: Dataset) -> tuple[list[MultiLabelSample], list[MultiLabelSample]]:
    """Deterministic split by sample id; the tail fraction is the test set.

    Every class must keep at least one test positive, otherwise per-class
    evaluation would be undefined; generation sizes make this overwhelmingly
    likely and a violation raises so the caller can regenerate larger.
    """
    n_train = dataset.config.samples_per_session * dataset.config.num_sessions
    train, test = dataset.samples[:n_train], dataset.samples[n_train:]
    if not test:
        raise DatasetError("empty test split; increase samples_per_session or test_fraction")
    positives = np.zeros(dataset.config.num_classes, dtype=np.int64)
    for s in test:
        positives += s.labels_full
    missing = np.flatnonzero(positives == 0)
    if missing.size:
        raise DatasetError(
            f"test split lacks positives for classes {missing.tolist()}; regenerate with more samples"
        )
    return train, test


def assign_sessions(samples: list[MultiLabelSample], protocol: SessionProtocol) -> list[list[MultiLabelSample]]:
    """Pool samples per session by label membership; pools may overlap."""
    pools: list[list[MultiLabelSample]] = []
    for t in range(1, protocol.num_sessions + 1):
        current = list(protocol.classes_of(t))
        pool = [s for s in samples if s.labels_full[current].any()]
        if not pool:
            raise DatasetError(
                f"session {t} has an empty pool; regenerate with larger samples_per_session"
            )
        pools.append(pool)
    return pools


def mask_labels(sample: MultiLabelSample, t: int, protocol: SessionProtocol) -> np.ndarray:
    """Ground truth restricted to session t's classes, in protocol order."""
    current = protocol.classes_of(t)
    return sample.labels_full[list(current)].astype(np.int8)


# ---------------------------------------------------------------------------
# JSON export / import

_SCHEMA_VERSION = 1


def export_json(dataset: Dataset, path: str) -> None:
    cfg = dataset.config
    payload = {
        "schema_version": _SCHEMA_VERSION,
        "config": {
            "num_classes": cfg.num_classes,
            "feature_dim": cfg.feature_dim,
            "grid_h": cfg.grid_h,
            "grid_w": cfg.grid_w,
            "samples_per_session": cfg.samples_per_session,
            "num_sessions": cfg.num_sessions,
            "cooccurrence": cfg.cooccurrence.tolist() if cfg.cooccurrence is not None else None,
            "noise_std": cfg.noise_std,
            "occupancy": cfg.occupancy,
            "test_fraction": cfg.test_fraction,
            "seed": cfg.seed,
        },
        "classes": [
            {"id": c.class_id, "name": c.name, "prototype": c.prototype.tolist()} for c in dataset.classes
        ],
        "samples": [
            {
                "id": s.sample_id,
                "tokens": s.tokens.reshape(-1).tolist(),
                "labels": np.flatnonzero(s.labels_full).tolist(),
            }
            for s in dataset.samples
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def import_json(path: str) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("schema_version") != _SCHEMA_VERSION:
        raise DatasetError(f"unsupported dataset schema version {payload.get('schema_version')}")
    c = payload["config"]
    config = DatasetConfig(
        num_classes=c["num_classes"],
        feature_dim=c["feature_dim"],
        grid_h=c["grid_h"],
        grid_w=c["grid_w"],
        samples_per_session=c["samples_per_session"],
        num_sessions=c["num_sessions"],
        cooccurrence=np.array(c["cooccurrence"]) if c["cooccurrence"] is not None else None,
        noise_std=c["noise_std"],
        occupancy=c["occupancy"],
        test_fraction=c["test_fraction"],
        seed=c["seed"],
    )
    config.validate()
    classes = [
        ClassSpec(class_id=e["id"], name=e["name"], prototype=np.array(e["prototype"]), occupancy=config.occupancy)
        for e in payload["classes"]
    ]
    L, d = config.num_patches, config.feature_dim
    samples = []
    for e in payload["samples"]:
        labels = np.zeros(config.num_classes, dtype=np.int8)
        labels[e["labels"]] = 1
        samples.append(
            MultiLabelSample(
                sample_id=e["id"],
                tokens=np.array(e["tokens"], dtype=np.float64).reshape(L, d),
                labels_full=labels,
            )
        )
    return Dataset(config=config, classes=classes, samples=samples)
