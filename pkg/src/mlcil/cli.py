"""Command line entry point.

Usage errors exit 2 (argparse default), runtime failures exit 1 with a
single ``error: ...`` line on stderr, success exits 0. The experiment seed
resolves in the order ``--seed`` flag, then the ``HCP_SEED`` environment
variable, then the config file value.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .autodiff import Tensor, grad_check, matmul, sigmoid
from .config import ExperimentConfig, load_config
from .data import import_json
from .errors import CheckpointError, ConfigError, MlcilError
from .losses import LossConfig, wasl_loss
from .metrics import PredictionMatrix, f1_scores, map_over_classes
from .purifier import PurifierModel
from .reporting import load_results, render_report
from .runner import load_checkpoint, run_ablation, run_experiment

SEED_ENV_VAR = "HCP_SEED"

logger = logging.getLogger(__name__)


def _resolve_seed(flag_value: int | None, config: ExperimentConfig) -> int:
    if flag_value is not None:
        return flag_value
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from exc
    return config.seed


def _cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    config.seed = _resolve_seed(args.seed, config)
    if args.out is not None:
        config.out.dir = args.out
    outcome = run_experiment(config, resume_from=args.resume)
    if args.export_dataset:
        from .data import export_json, generate_dataset

        export_json(generate_dataset(config.dataset), args.export_dataset)
    print(json.dumps({"avg_acc": outcome.avg_acc, "last_acc": outcome.last_acc,
                      "out_dir": outcome.out_dir}, sort_keys=True))
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from exc
    if not seeds:
        raise ConfigError("--seeds is empty")
    summary = run_ablation(config, seeds, out_dir=args.out)
    print(json.dumps(summary["mean_avg_acc"], sort_keys=True))
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    payload = load_checkpoint(args.checkpoint)
    model = PurifierModel.from_dict(payload["model"])
    dataset = import_json(args.dataset)
    ids = list(model.class_ids)
    if not ids:
        raise CheckpointError("checkpoint model has no classes to evaluate")
    scores = np.empty((len(dataset.samples), len(ids)))
    truths = np.empty((len(dataset.samples), len(ids)), dtype=np.int8)
    for i, sample in enumerate(dataset.samples):
        scores[i] = model.predict_probs(sample.tokens)
        truths[i] = sample.labels_full[ids]
    pm = PredictionMatrix(scores=scores, truths=truths, class_ids=tuple(ids),
                          session=payload["session"])
    mean_ap, per_class = map_over_classes(pm)
    cf1, of1 = f1_scores(pm)
    print(json.dumps({
        "map": mean_ap, "cf1": cf1, "of1": of1,
        "num_samples": len(dataset.samples),
        "per_class_ap": {str(k): v for k, v in sorted(per_class.items())},
    }, sort_keys=True))
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    dim, heads, num_classes, num_patches = 8, 2, 4, 4
    model = PurifierModel(feature_dim=dim, heads=heads, num_blocks=args.blocks, rng=rng)
    model.expand_for_session(list(range(num_classes)), rng)
    tokens = rng.normal(size=(num_patches, dim))
    y = np.array([1, 0, 1, 0, 1], dtype=float)
    weights = np.ones(y.shape[0])
    lam = rng.dirichlet(np.ones(2))
    row = np.zeros((1, num_classes))
    row[0, [1, 3]] = lam
    loss_cfg = LossConfig()

    def build_loss():
        fwd = model.forward(tokens)
        unknown = matmul(Tensor(row), fwd.o_s)
        logits = model.classify(fwd.o_s, unknown)
        return wasl_loss(sigmoid(logits), y, weights, loss_cfg)

    probs = sigmoid(model.classify(model.forward(tokens).o_s)).data.reshape(-1)
    if np.any(np.abs(probs - loss_cfg.margin) < 1e-3):
        logger.warning("a probability sits near the loss margin; finite differences may be noisy")
    worst = grad_check(build_loss, model.trainable_params(), step=args.step)
    ok = worst < args.tol
    print(f"max relative gradient error {worst:.3e} (tolerance {args.tol:g}): "
          f"{'OK' if ok else 'FAIL'}")
    return 0 if ok else 1


def _cmd_report(args: argparse.Namespace) -> int:
    payload = load_results(args.in_dir)
    print(render_report(payload, args.format))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlcil",
                                     description="class-incremental multi-label experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--resume", default=None, help="checkpoint file to resume after")
    p_run.add_argument("--export-dataset", default=None,
                       help="also write the generated dataset to this JSON file")
    p_run.set_defaults(func=_cmd_run)

    p_ablate = sub.add_parser("ablate", help="run the five-variant ablation grid")
    p_ablate.add_argument("--config", required=True)
    p_ablate.add_argument("--seeds", required=True, help="comma-separated, e.g. 0,1,2")
    p_ablate.add_argument("--out", default=None)
    p_ablate.set_defaults(func=_cmd_ablate)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True)
    p_eval.set_defaults(func=_cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of the full graph")
    p_grad.add_argument("--blocks", type=int, default=3)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--step", type=float, default=1e-5)
    p_grad.add_argument("--tol", type=float, default=1e-4)
    p_grad.set_defaults(func=_cmd_gradcheck)

    p_report = sub.add_parser("report", help="render results from a run directory")
    p_report.add_argument("--in", dest="in_dir", required=True)
    p_report.add_argument("--format", choices=("csv", "json", "md"), default="md")
    p_report.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s",
                            stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MlcilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
