"""Session-wise incremental training, evaluation, checkpoints, and the ablation grid.

One experiment runs the session protocol end to end. Per session: snapshot
the previous model, expand the embedding bank and plasticity head for the new
classes, train on the session pool with effective labels (masked ground truth
for current classes, pseudo-labels from the frozen snapshot for old ones),
evaluate on the held-out split over all seen classes, fit the confidence
distributions of the new classes on the session pool, merge the classifier
heads, and write a checkpoint.

Determinism: every random stream is derived from the experiment seed plus a
fixed purpose tag (and session/epoch indices), so reruns and checkpoint
resumes at session boundaries reproduce results bit for bit. Wall-clock
timings are therefore kept out of every serialized artifact.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, backward, matmul, scale, sigmoid
from .config import ExperimentConfig
from .data import (
    Dataset,
    MultiLabelSample,
    SessionProtocol,
    assign_sessions,
    build_protocol,
    default_class_names,
    generate_dataset,
    mask_labels,
    split_train_test,
)
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .losses import class_weights, wasl_loss
from .metrics import (
    PredictionMatrix,
    SessionResult,
    calinski_harabasz,
    f1_scores,
    map_over_classes,
    session_accuracies,
)
from .optim import Adam
from .probing import partition_features, sample_simplex_weights
from .purifier import PurifierModel
from .recall import (
    ConfidenceDistributionTable,
    confidence_forgetting,
    fit_distributions,
    fit_from_matrix,
    pseudo_label_re,
    pseudo_label_static,
    pseudo_label_topk,
    update_queue,
)

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1

# (name, fp, re on?, pu on?) rows of the standard ablation grid
ABLATION_VARIANTS: tuple[tuple[str, bool, bool, bool], ...] = (
    ("ft", False, False, False),
    ("fp", True, False, False),
    ("fp_re", True, True, False),
    ("fp_pu", True, False, True),
    ("fp_re_pu", True, True, True),
)


def _stream(seed: int, *key: int) -> np.random.Generator:
    """A generator derived from the experiment seed and a fixed purpose key."""
    return np.random.default_rng([seed, *key])


def _result_to_dict(r: SessionResult) -> dict:
    return {
        "session": r.session,
        "map": r.map,
        "cf1": r.cf1,
        "of1": r.of1,
        "per_class_ap": {str(k): v for k, v in sorted(r.per_class_ap.items())},
        "per_class_forgetting": {str(k): v for k, v in sorted(r.per_class_forgetting.items())},
        "per_class_confidence": {
            str(k): [v[0], v[1]] for k, v in sorted(r.per_class_confidence.items())
        },
        "ch_index": None if np.isnan(r.ch_index) else r.ch_index,
    }


def _result_from_dict(payload: dict) -> SessionResult:
    return SessionResult(
        session=payload["session"],
        map=payload["map"],
        cf1=payload["cf1"],
        of1=payload["of1"],
        per_class_ap={int(k): v for k, v in payload["per_class_ap"].items()},
        per_class_forgetting={int(k): v for k, v in payload["per_class_forgetting"].items()},
        per_class_confidence={
            int(k): (v[0], v[1]) for k, v in payload["per_class_confidence"].items()
        },
        ch_index=float("nan") if payload["ch_index"] is None else payload["ch_index"],
    )


@dataclass
class RunOutcome:
    """In-memory summary of one experiment run."""

    avg_acc: float
    last_acc: float
    results: list[SessionResult]
    mean_final_forgetting: float
    final_ch: float
    out_dir: str


class Runner:
    """Drives one experiment configuration through all sessions."""

    def __init__(self, config: ExperimentConfig):
        config.validate()
        self.config = config
        self.seed = config.seed
        names = default_class_names(config.dataset.num_classes)
        self.protocol: SessionProtocol = build_protocol(
            config.dataset.num_classes, config.protocol.base_classes, config.protocol.increment, names
        )
        self.model: PurifierModel | None = None
        self.train_table = ConfidenceDistributionTable()
        self.eval_table = ConfidenceDistributionTable()
        self.results: list[SessionResult] = []
        self.dataset: Dataset | None = None
        self.pools: list[list[MultiLabelSample]] = []
        self.test_samples: list[MultiLabelSample] = []

    # -- data and model setup ------------------------------------------------

    def _prepare(self) -> None:
        out_dir = self.config.out.dir
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        probe = os.path.join(out_dir, ".write_probe")
        with open(probe, "w", encoding="utf-8") as fh:
            fh.write("ok")
        os.remove(probe)
        self.dataset = generate_dataset(self.config.dataset)
        train, self.test_samples = split_train_test(self.dataset)
        self.pools = assign_sessions(train, self.protocol)

    def _fresh_model(self) -> PurifierModel:
        rng = _stream(self.seed, 101)
        return PurifierModel(
            feature_dim=self.config.dataset.feature_dim,
            heads=self.config.train.heads,
            num_blocks=self.config.train.blocks,
            rng=rng,
            freeze_old=self.config.train.fp,
        )

    # -- pseudo-labels --------------------------------------------------------

    def _pseudo_labels(self, snapshot: PurifierModel | None, pool: list[MultiLabelSample],
                       t: int) -> dict[int, np.ndarray]:
        """Old-class label guesses per pool sample, from the frozen snapshot."""
        old_ids = self.protocol.seen_classes(t - 1)
        zeros = np.zeros(len(old_ids), dtype=np.int8)
        strategy = self.config.re.strategy
        if strategy == "off" or snapshot is None:
            return {s.sample_id: zeros for s in pool}
        assert snapshot.class_ids == old_ids
        re_cfg = self.config.re
        out: dict[int, np.ndarray] = {}
        for sample in pool:
            probs = snapshot.predict_probs(sample.tokens)
            if strategy == "re":
                out[sample.sample_id] = pseudo_label_re(
                    probs, old_ids, self.train_table,
                    sigma_coef=re_cfg.sigma_coef, fallback=re_cfg.fallback_epsilon,
                )
            elif strategy == "static":
                out[sample.sample_id] = pseudo_label_static(probs, re_cfg.epsilon)
            else:
                out[sample.sample_id] = pseudo_label_topk(probs, re_cfg.top_k)
        return out

    # -- training -------------------------------------------------------------

    def _train_session(self, t: int, pool: list[MultiLabelSample],
                       pseudo: dict[int, np.ndarray]) -> None:
        cfg = self.config
        model = self.model
        n_new = len(self.protocol.classes_of(t))
        n_old = model.bank.num_classes - n_new
        m = model.bank.num_classes
        base_weights = class_weights(n_old, n_new, include_unknown=False)
        pu = cfg.probe_unknown
        lr = cfg.train.base_lr if t == 1 else cfg.train.incremental_lr
        optimizer = Adam(model.trainable_params(), lr=lr, weight_decay=cfg.train.weight_decay)
        rng_unknown = _stream(self.seed, 109, t)

        for epoch in range(cfg.train.epochs):
            order = _stream(self.seed, 107, t, epoch).permutation(len(pool))
            for start in range(0, len(order), cfg.train.batch_size):
                batch = order[start : start + cfg.train.batch_size]
                inv = 1.0 / batch.shape[0]
                optimizer.zero_grad()
                for idx in batch:
                    sample = pool[idx]
                    y_new = mask_labels(sample, t, self.protocol)
                    y_eff = np.concatenate([pseudo[sample.sample_id], y_new]) if n_old else y_new
                    with Tape():
                        fwd = model.forward(sample.tokens)
                        unknown_feat = None
                        part = None
                        if pu.enabled:
                            part = partition_features(fwd.o_s.data, y_eff, model.class_ids)
                            if part.absent_rows.size:
                                lam = sample_simplex_weights(
                                    part.absent_rows.size, pu.alpha, pu.beta, rng_unknown
                                )
                                row = np.zeros((1, m))
                                row[0, part.absent_rows] = lam
                                unknown_feat = matmul(Tensor(row), fwd.o_s)
                        logits = model.classify(fwd.o_s, unknown_feat)
                        y_vec, w_vec = y_eff, base_weights
                        if unknown_feat is not None:
                            y_vec = np.concatenate([y_vec, [1]])
                            w_vec = np.concatenate([w_vec, [1.0]])
                        if pu.enabled and pu.real_negative_targets and part is not None and part.present_rows.size:
                            sel = np.zeros((part.present_rows.size, m))
                            sel[np.arange(part.present_rows.size), part.present_rows] = 1.0
                            present_feats = matmul(Tensor(sel), fwd.o_s)
                            extra = model.classify_unknown_rows(present_feats)
                            logits = _concat_logits(logits, extra)
                            y_vec = np.concatenate([y_vec, np.zeros(part.present_rows.size)])
                            w_vec = np.concatenate([w_vec, np.ones(part.present_rows.size)])
                        loss = scale(wasl_loss(sigmoid(logits), y_vec, w_vec, cfg.loss), inv)
                    backward(loss)
                    value = loss.item() / inv
                    if not np.isfinite(value):
                        self._dump_divergence(t, epoch, int(sample.sample_id), value)
                        raise TrainingDiverged(
                            f"non-finite loss at session {t}, epoch {epoch}, sample {sample.sample_id}"
                        )
                optimizer.step()
            logger.debug("session %d epoch %d done", t, epoch)

    def _dump_divergence(self, t: int, epoch: int, sample_id: int, value: float) -> None:
        dump = {
            "session": t,
            "epoch": epoch,
            "sample_id": sample_id,
            "loss": None if np.isnan(value) else value,
            "param_norms": [float(np.linalg.norm(p.data)) for p in self.model.params()],
        }
        path = os.path.join(self.config.out.dir, "diverged_dump.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dump, fh, indent=2)
        logger.error("training diverged; diagnostics written to %s", path)

    # -- evaluation -------------------------------------------------------------

    def _evaluate(self, t: int) -> SessionResult:
        model = self.model
        seen = list(self.protocol.seen_classes(t))
        n_test = len(self.test_samples)
        scores = np.empty((n_test, len(seen)))
        truths = np.empty((n_test, len(seen)), dtype=np.int8)
        feats: list[np.ndarray] = []
        feat_labels: list[int] = []
        for i, sample in enumerate(self.test_samples):
            fwd = model.forward(sample.tokens)
            scores[i] = sigmoid(model.classify(fwd.o_s)).data.reshape(-1)
            truths[i] = sample.labels_full[seen]
            for row in np.flatnonzero(truths[i]):
                feats.append(fwd.o_s.data[row])
                feat_labels.append(seen[row])
        pm = PredictionMatrix(scores=scores, truths=truths, class_ids=tuple(seen), session=t)
        mean_ap, per_class_ap = map_over_classes(pm)
        cf1, of1 = f1_scores(pm)
        try:
            ch = calinski_harabasz(np.array(feats), np.array(feat_labels))
        except Exception as exc:  # degenerate grouping; keep the run alive
            logger.warning("cluster index unavailable at session %d: %s", t, exc)
            ch = float("nan")

        fresh = fit_from_matrix(scores, truths, seen, session=t)
        update_queue(self.eval_table, fresh, session=t)
        forgetting: dict[int, float] = {}
        for cid in seen:
            history = self.eval_table.history.get(cid, {})
            if any(s < t for s in history) and t in history:
                forgetting[cid] = confidence_forgetting(self.eval_table, cid, t)
        confidence = {
            cid: (self.eval_table.stats[cid].mean, self.eval_table.stats[cid].var)
            for cid in seen
            if cid in self.eval_table.stats
        }
        return SessionResult(
            session=t,
            map=mean_ap,
            cf1=cf1,
            of1=of1,
            per_class_ap=per_class_ap,
            per_class_forgetting=forgetting,
            per_class_confidence=confidence,
            ch_index=ch,
        )

    # -- checkpointing ------------------------------------------------------------

    def _checkpoint_path(self, t: int) -> str:
        return os.path.join(self.config.out.dir, "checkpoints", f"session_{t}.json")

    def _save_checkpoint(self, t: int) -> None:
        payload = {
            "schema_version": CHECKPOINT_SCHEMA_VERSION,
            "session": t,
            "model": self.model.to_dict(),
            "train_table": self.train_table.to_dict(),
            "eval_table": self.eval_table.to_dict(),
            "results": [_result_to_dict(r) for r in self.results],
            "rng": {"scheme": "session-derived", "seed": self.seed},
            "config": self.config.to_dict(),
        }
        with open(self._checkpoint_path(t), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)

    def _load_checkpoint(self, path: str) -> int:
        payload = load_checkpoint(path)
        stored = payload["config"]
        current = self.config.to_dict()
        stored.pop("out", None)
        current_no_out = {k: v for k, v in current.items() if k != "out"}
        if stored != current_no_out:
            raise CheckpointError("checkpoint config does not match the current config")
        self.model = PurifierModel.from_dict(payload["model"])
        self.train_table = ConfidenceDistributionTable.from_dict(payload["train_table"])
        self.eval_table = ConfidenceDistributionTable.from_dict(payload["eval_table"])
        self.results = [_result_from_dict(r) for r in payload["results"]]
        return int(payload["session"])

    # -- the main loop ---------------------------------------------------------------

    def _run_session(self, t: int) -> SessionResult:
        started = time.perf_counter()
        current = list(self.protocol.classes_of(t))
        pool = self.pools[t - 1]
        snapshot = self.model.snapshot() if t > 1 else None
        self.model.expand_for_session(current, _stream(self.seed, 103, t))
        frozen_bytes = _frozen_state_bytes(self.model)
        pseudo = self._pseudo_labels(snapshot, pool, t) if t > 1 else {}
        self._train_session(t, pool, pseudo)
        if frozen_bytes != _frozen_state_bytes(self.model):
            raise TrainingDiverged(f"frozen parameters changed during session {t}")

        result = self._evaluate(t)

        def predict_current(sample: MultiLabelSample) -> np.ndarray:
            probs = self.model.predict_probs(sample.tokens)
            return probs[-len(current):]

        fresh = fit_distributions(predict_current, pool, current, session=t)
        update_queue(self.train_table, fresh, session=t,
                     mode=self.config.re.queue_mode, rho=self.config.re.ema_rho)
        self.model.merge_classifiers()
        result.wall_time = time.perf_counter() - started
        logger.info(
            "session %d/%d: mAP %.4f CF1 %.4f OF1 %.4f (%.1fs)",
            t, self.protocol.num_sessions, result.map, result.cf1, result.of1, result.wall_time,
        )
        return result

    def run(self, resume_from: str | None = None) -> RunOutcome:
        self._prepare()
        start_session = 1
        if resume_from is not None:
            start_session = self._load_checkpoint(resume_from) + 1
        else:
            self.model = self._fresh_model()
        for t in range(start_session, self.protocol.num_sessions + 1):
            self.results.append(self._run_session(t))
            self._save_checkpoint(t)
        avg_acc, last_acc = session_accuracies(self.results)
        final = self.results[-1]
        mean_forget = (
            float(np.mean(list(final.per_class_forgetting.values())))
            if final.per_class_forgetting
            else 0.0
        )
        self._write_results(avg_acc, last_acc)
        return RunOutcome(
            avg_acc=avg_acc,
            last_acc=last_acc,
            results=self.results,
            mean_final_forgetting=mean_forget,
            final_ch=final.ch_index,
            out_dir=self.config.out.dir,
        )

    def _write_results(self, avg_acc: float, last_acc: float) -> None:
        from .reporting import write_results_json, write_session_csv

        write_results_json(
            os.path.join(self.config.out.dir, "results.json"),
            self.config, self.results, avg_acc, last_acc,
        )
        write_session_csv(os.path.join(self.config.out.dir, "report.csv"), self.results)


def _concat_logits(a, b):
    from .autodiff import concat_rows

    return concat_rows(a, b)


def _frozen_state_bytes(model: PurifierModel) -> bytes:
    """Serialized bytes of everything that must not move during a session."""
    if not model.freeze_old:
        return b""
    parts = []
    if model.bank.frozen is not None:
        parts.append(model.bank.frozen.data.tobytes())
    if model.stability is not None:
        parts.append(model.stability.w.data.tobytes())
        parts.append(model.stability.b.data.tobytes())
    return b"|".join(parts)


def load_checkpoint(path: str) -> dict:
    """Read and version-check a checkpoint file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint {path} is corrupt near byte {exc.pos}: {exc.msg}") from exc
    version = payload.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint schema version {version} unsupported; expected {CHECKPOINT_SCHEMA_VERSION}"
        )
    return payload


def run_experiment(config: ExperimentConfig, resume_from: str | None = None) -> RunOutcome:
    return Runner(config).run(resume_from=resume_from)


def run_ablation(base_config: ExperimentConfig, seeds: list[int], out_dir: str | None = None) -> dict:
    """Run the five-variant grid for every seed on paired datasets.

    For a given seed all variants share the same dataset and the same
    initialization streams, so comparisons are paired. Returns the summary
    dict that is also written to ``ablation_summary.json``.
    """
    base_config.validate()
    root = out_dir or base_config.out.dir
    os.makedirs(root, exist_ok=True)
    strategy_on = base_config.re.strategy if base_config.re.strategy != "off" else "re"
    runs: dict[str, dict[str, dict]] = {name: {} for name, *_ in ABLATION_VARIANTS}
    for seed in seeds:
        for name, fp, re_on, pu_on in ABLATION_VARIANTS:
            config = copy.deepcopy(base_config)
            config.seed = seed
            config.dataset.seed = seed
            config.train.fp = fp
            config.re.strategy = strategy_on if re_on else "off"
            config.probe_unknown.enabled = pu_on
            config.out.dir = os.path.join(root, name, f"seed{seed}")
            outcome = run_experiment(config)
            runs[name][str(seed)] = {
                "avg_acc": outcome.avg_acc,
                "last_acc": outcome.last_acc,
                "mean_final_forgetting": outcome.mean_final_forgetting,
                "final_ch": None if np.isnan(outcome.final_ch) else outcome.final_ch,
            }
            logger.info("ablation %s seed %d: avg %.4f last %.4f", name, seed, outcome.avg_acc, outcome.last_acc)
    summary = {
        "schema_version": 1,
        "seeds": list(seeds),
        "variants": runs,
        "mean_avg_acc": {
            name: float(np.mean([r["avg_acc"] for r in per_seed.values()]))
            for name, per_seed in runs.items()
        },
    }
    from .reporting import write_ablation_summary

    write_ablation_summary(root, summary)
    return summary
