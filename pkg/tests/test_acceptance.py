"""Acceptance gate: one test per shipped guarantee, at its stated tolerance.

`pytest -v tests/test_acceptance.py` reads as a checklist, one pass/fail
line per guarantee. The three ablation-grid checks share a single
module-scoped five-seed run of configs/ablation_b10c2.json.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from mlcil.autodiff import Tensor, grad_check, matmul, sigmoid
from mlcil.config import config_from_dict, load_config
from mlcil.losses import LossConfig, wasl_loss
from mlcil.metrics import (
    PredictionMatrix,
    SessionResult,
    f1_scores,
    map_over_classes,
    session_accuracies,
)
from mlcil.probing import synthesize_unknown
from mlcil.purifier import PurifierModel
from mlcil.recall import (
    ClassConfidenceStats,
    ConfidenceDistributionTable,
    pseudo_label_re,
    pseudo_label_static,
)
from mlcil.runner import ABLATION_VARIANTS, Runner, run_ablation, run_experiment

from reference import (
    reference_average_precision,
    reference_cf1_of1,
    reference_mean_ap,
)

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"
GRID_SEEDS = [0, 1, 2, 3, 4]


def micro_config(out_dir, **overrides):
    payload = {
        "dataset": {"num_classes": 6, "feature_dim": 8, "grid_h": 3, "grid_w": 3,
                    "samples_per_session": 24, "noise_std": 0.3, "occupancy": 1,
                    "test_fraction": 0.25, "seed": 0, "base_rate": 0.3},
        "protocol": {"base_classes": 2, "increment": 2},
        "train": {"epochs": 2, "batch_size": 8, "blocks": 1, "heads": 2},
        "out": {"dir": str(out_dir)},
        "seed": 0,
    }
    for section, value in overrides.items():
        if isinstance(value, dict):
            payload.setdefault(section, {}).update(value)
        else:
            payload[section] = value
    return config_from_dict(payload)


def test_criterion_01_gradient_fidelity():
    """Backprop through purifier + classifier + loss matches central finite
    differences (step 1e-5) to a relative error below 1e-4, in under 10 s."""
    started = time.perf_counter()
    rng = np.random.default_rng(0)
    model = PurifierModel(feature_dim=8, heads=2, num_blocks=3, rng=rng)
    model.expand_for_session([0, 1, 2, 3], rng)
    tokens = rng.normal(size=(4, 8))
    targets = np.array([1, 0, 1, 0, 1], dtype=float)
    weights = np.ones(5)
    lam = rng.dirichlet(np.ones(2))
    row = np.zeros((1, 4))
    row[0, [1, 3]] = lam
    loss_cfg = LossConfig()

    def build_loss():
        fwd = model.forward(tokens)
        unknown = matmul(Tensor(row), fwd.o_s)
        logits = model.classify(fwd.o_s, unknown)
        return wasl_loss(sigmoid(logits), targets, weights, loss_cfg)

    worst = grad_check(build_loss, model.trainable_params(), step=1e-5)
    elapsed = time.perf_counter() - started
    assert worst < 1e-4
    assert elapsed < 10.0


def test_criterion_02_attention_rows_normalized():
    """Every attention row from 1000 random forward passes sums to 1 ± 1e-9."""
    rng = np.random.default_rng(1)
    model = PurifierModel(feature_dim=8, heads=2, num_blocks=2, rng=rng)
    model.expand_for_session([0, 1, 2], rng)
    rows_checked = 0
    for _ in range(1000):
        scale = float(rng.uniform(0.1, 3.0))
        tokens = rng.normal(scale=scale, size=(int(rng.integers(1, 9)), 8))
        fwd = model.forward(tokens, record_attention=True)
        for attn in fwd.attention:
            assert np.max(np.abs(attn.sum(axis=1) - 1.0)) <= 1e-9
            rows_checked += attn.shape[0]
    assert rows_checked >= 1000


def test_criterion_03_frozen_state_immutable(tmp_path):
    """Frozen embeddings and the stability head serialize to identical bytes
    before and after a full training session, for every ablation variant."""

    def frozen_bytes(model):
        if not model.freeze_old:
            return b""  # plain fine-tuning designates nothing as frozen
        parts = []
        if model.bank.frozen is not None:
            parts.append(model.bank.frozen.data.tobytes())
        if model.stability is not None:
            parts.append(model.stability.w.data.tobytes())
            parts.append(model.stability.b.data.tobytes())
        return b"|".join(parts)

    for name, fp, re_on, pu_on in ABLATION_VARIANTS:
        config = micro_config(
            tmp_path / name,
            train={"fp": fp},
            re={"strategy": "re" if re_on else "off"},
            probe_unknown={"enabled": pu_on},
        )
        runner = Runner(config)
        runner._prepare()
        runner.model = runner._fresh_model()
        runner.results.append(runner._run_session(1))

        t = 2
        pool = runner.pools[t - 1]
        snapshot = runner.model.snapshot()
        runner.model.expand_for_session(
            list(runner.protocol.classes_of(t)), np.random.default_rng([config.seed, 103, t])
        )
        pseudo = runner._pseudo_labels(snapshot, pool, t)
        before = frozen_bytes(runner.model)
        runner._train_session(t, pool, pseudo)
        assert frozen_bytes(runner.model) == before, name
        if fp:
            assert before  # the frozen path actually had state to protect


def test_criterion_04a_metric_oracle_equivalence():
    """mAP, CF1, and OF1 on 200 random prediction matrices match brute-force
    counting references within 1e-10."""
    rng = np.random.default_rng(4)
    for i in range(200):
        n = int(rng.integers(2, 40))
        k = int(rng.integers(1, 8))
        if i % 3 == 0:  # force heavy score ties every third matrix
            scores = rng.choice([0.1, 0.3, 0.5, 0.7, 0.9], size=(n, k))
        else:
            scores = rng.uniform(size=(n, k))
        truths = rng.integers(0, 2, size=(n, k))
        truths[rng.integers(0, n), :] = 1
        pm = PredictionMatrix(scores=scores, truths=truths, class_ids=tuple(range(k)))
        mean_ap, per_class = map_over_classes(pm)
        assert abs(mean_ap - reference_mean_ap(scores, truths)) <= 1e-10
        for col in range(k):
            want = reference_average_precision(scores[:, col], truths[:, col])
            assert abs(per_class[col] - want) <= 1e-10
        cf1, of1 = f1_scores(pm)
        want_cf1, want_of1 = reference_cf1_of1(scores, truths, 0.5)
        assert abs(cf1 - want_cf1) <= 1e-10
        assert abs(of1 - want_of1) <= 1e-10


def test_criterion_04b_reported_average_accuracy_arithmetic():
    """The average-accuracy arithmetic should reproduce a published six-session
    row: per-session values 97.87..70.82 quoted with an average of 85.08.

    The six values actually average to 85.0983, so the quoted 85.08 sits
    0.0183 outside the stated ±0.005 tolerance. The assertion keeps the
    stated tolerance and records the discrepancy instead of hiding it.
    """
    maps = [97.87, 93.30, 90.81, 82.10, 75.69, 70.82]
    results = [SessionResult(session=t, map=m, cf1=0.0, of1=0.0)
               for t, m in enumerate(maps, start=1)]
    avg, last = session_accuracies(results)
    assert last == pytest.approx(70.82)
    assert avg == pytest.approx(85.08, abs=0.005)


def test_criterion_05_unknown_synthesis_contract():
    """10^4 synthesized unknown features: weights on the simplex (sum 1 within
    1e-12), features inside per-coordinate hull bounds, one-row case exact."""
    rng = np.random.default_rng(5)
    for _ in range(10_000):
        m = int(rng.integers(1, 7))
        absent = rng.normal(size=(m, 6))
        alpha = float(rng.uniform(0.3, 3.0))
        beta = float(rng.uniform(0.3, 3.0))
        sample = synthesize_unknown(absent, alpha, beta, rng)
        assert abs(sample.weights.sum() - 1.0) <= 1e-12
        assert np.all(sample.weights >= 0.0)
        if m == 1:
            assert np.array_equal(sample.feature, absent[0])
        assert np.all(sample.feature >= absent.min(axis=0) - 1e-12)
        assert np.all(sample.feature <= absent.max(axis=0) + 1e-12)


def test_criterion_06_recall_threshold_contracts():
    """With equal per-class confidence means the adaptive labeling equals one
    static threshold exactly; on 10^3 random probability vectors a higher
    static threshold never adds a positive."""
    table = ConfidenceDistributionTable()
    ids = list(range(5))
    for cid in ids:
        table.stats[cid] = ClassConfidenceStats(mean=0.65, var=0.01, count=9)
    rng = np.random.default_rng(6)
    for _ in range(200):
        probs = rng.uniform(size=5)
        assert np.array_equal(pseudo_label_re(probs, ids, table),
                              pseudo_label_static(probs, 0.65))
    for _ in range(1000):
        probs = rng.uniform(size=int(rng.integers(1, 12)))
        lo, hi = np.sort(rng.uniform(0.01, 0.99, size=2))
        assert np.all(pseudo_label_static(probs, hi) <= pseudo_label_static(probs, lo))


@pytest.fixture(scope="module")
def ablation_grid(tmp_path_factory):
    """One five-seed run of the standard 20-class B10-C2 grid, shared by the
    three directional checks below."""
    config = load_config(str(CONFIG_DIR / "ablation_b10c2.json"))
    out_dir = tmp_path_factory.mktemp("ablation_grid")
    started = time.perf_counter()
    summary = run_ablation(config, seeds=GRID_SEEDS, out_dir=str(out_dir))
    return summary, time.perf_counter() - started


def _per_seed_wins(summary, better, worse, field="avg_acc"):
    variants = summary["variants"]
    wins = 0
    for seed in map(str, GRID_SEEDS):
        a = variants[worse][seed][field]
        b = variants[better][seed][field]
        wins += b > a
    return wins


def test_criterion_07_ablation_ordering(ablation_grid):
    """20 classes, B10-C2, 5 paired seeds: mean Avg Acc orders FT < FP < FP+RE
    and FP < FP+PU, the full method lands within 0.01 of the best pair, each
    pairwise ordering holds on at least 4 of 5 seeds, all inside 30 min."""
    summary, elapsed = ablation_grid
    means = summary["mean_avg_acc"]
    assert means["ft"] < means["fp"] < means["fp_re"]
    assert means["fp"] < means["fp_pu"]
    assert means["fp_re_pu"] >= max(means["fp_re"], means["fp_pu"]) - 0.01
    assert _per_seed_wins(summary, "fp", "ft") >= 4
    assert _per_seed_wins(summary, "fp_re", "fp") >= 4
    assert _per_seed_wins(summary, "fp_pu", "fp") >= 4
    assert elapsed < 1800.0


def test_criterion_08_forgetting_reduction(ablation_grid):
    """Mean final confidence forgetting over old classes with the adaptive
    thresholds is no worse than without them on at least 4 of 5 seeds."""
    summary, _ = ablation_grid
    variants = summary["variants"]
    better = sum(
        variants["fp_re"][seed]["mean_final_forgetting"]
        <= variants["fp"][seed]["mean_final_forgetting"]
        for seed in map(str, GRID_SEEDS)
    )
    assert better >= 4


def test_criterion_09_cluster_separation(ablation_grid):
    """The final-session cluster-separation index with unknown probing is at
    least as high as without it on at least 4 of 5 seeds."""
    summary, _ = ablation_grid
    variants = summary["variants"]

    def ch(name, seed):
        value = variants[name][seed]["final_ch"]
        return float("nan") if value is None else value

    better = sum(
        ch("fp_re_pu", seed) >= ch("fp_re", seed) for seed in map(str, GRID_SEEDS)
    )
    assert better >= 4


def test_criterion_10_determinism_and_resume(tmp_path):
    """Same config and seed give a bitwise-identical results.json, and a
    resume from any checkpoint reproduces the uninterrupted run bitwise."""
    out = tmp_path / "run"
    run_experiment(micro_config(out))
    reference_bytes = (out / "results.json").read_bytes()
    assert json.loads(reference_bytes)["sessions"]  # sanity: non-trivial payload

    run_experiment(micro_config(out))
    assert (out / "results.json").read_bytes() == reference_bytes

    for t in (1, 2):
        checkpoint = out / "checkpoints" / f"session_{t}.json"
        run_experiment(micro_config(out), resume_from=str(checkpoint))
        assert (out / "results.json").read_bytes() == reference_bytes
