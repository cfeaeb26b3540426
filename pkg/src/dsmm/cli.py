"""Experiment harness: dataset generation, strategy-grid training across
folds and seeds, checkpoint evaluation, and meta-gradient checking.

Subcommands: ``generate``, ``train``, ``eval``, ``gradcheck``. Experiments
are driven by a single JSON config with a flat schema; unknown keys are hard
errors so a typo can never silently change an experiment. Exit codes:
0 success, 1 validation error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .metrics import accuracy, roc_auc
from .models import (
    KinshipConfig,
    MinerConfig,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import ContractError, NumericError, Rng
from .pairdata import (
    FoldSpec,
    PairDataset,
    balanced_eval_pairs,
    bayes_scores,
    generate_synthetic,
    load_dataset,
    make_folds,
    save_dataset,
)
from .training import (
    GRADCHECK_TOLERANCE,
    TrainConfig,
    cross_validate,
    default_gradcheck_grid,
    run_gradcheck,
)


class ConfigError(ContractError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


_DATASET_KEYS = {
    "path": str,
    "n_families": int,
    "dim": int,
    "rho": float,
    "sigma": float,
    "nonlinear": bool,
    "seed": int,
}

_MODEL_KEYS = {
    "encoder_hidden": int,
    "embed_dim": int,
    "relation_hidden": int,
    "relation_out": int,
    "agg_hidden": int,
    "miner_hidden": int,
    "loss_cap": float,
}

_TOP_KEYS = {
    "dataset": dict,
    "folds": int,
    "fold_seed": int,
    "seeds": list,
    "out": str,
    "strategy": (str, list),
    "c": (int, list),
    "m": int,
    "alpha": float,
    "beta": float,
    "gamma": float,
    "epochs": int,
    "optimizer": str,
    "decay_factor": float,
    "milestones": (list, type(None)),
    "focal_gamma": float,
    "model": dict,
}


@dataclass
class ExperimentConfig:
    dataset: dict
    folds: int = 5
    fold_seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs"
    strategies: list[str] = field(default_factory=lambda: ["dsmm"])
    c_values: list[int] = field(default_factory=lambda: [4])
    m: int = 8
    alpha: float = 1e-3
    beta: float = 1e-4
    gamma: float = 1e-3
    epochs: int = 200
    optimizer: str = "adam"
    decay_factor: float = 0.1
    milestones: list[int] | None = None
    focal_gamma: float = 2.0
    model: dict = field(default_factory=dict)

    def train_config(self, strategy: str, c: int, seed: int) -> TrainConfig:
        return TrainConfig(
            alpha=self.alpha,
            beta=self.beta,
            gamma=self.gamma,
            c_ratio=c,
            m_pos=self.m,
            epochs=self.epochs,
            optimizer=self.optimizer,
            decay_factor=self.decay_factor,
            milestones=tuple(self.milestones) if self.milestones else None,
            strategy=strategy,
            focal_gamma=self.focal_gamma,
            seed=seed,
        )

    def model_configs(self, input_dim: int) -> tuple[KinshipConfig, MinerConfig]:
        m = dict(self.model)
        miner = MinerConfig(
            hidden=m.pop("miner_hidden", 64), loss_cap=m.pop("loss_cap", 10.0)
        )
        return KinshipConfig(input_dim=input_dim, **m), miner

    def snapshot(self) -> dict:
        return {
            "dataset": self.dataset,
            "folds": self.folds,
            "fold_seed": self.fold_seed,
            "seeds": self.seeds,
            "out": self.out,
            "strategy": self.strategies,
            "c": self.c_values,
            "m": self.m,
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "epochs": self.epochs,
            "optimizer": self.optimizer,
            "decay_factor": self.decay_factor,
            "milestones": self.milestones,
            "focal_gamma": self.focal_gamma,
            "model": self.model,
            "version": __version__,
        }


def _check_type(value, expected, key: str, problems: list[str]) -> None:
    types = expected if isinstance(expected, tuple) else (expected,)
    ok = False
    for t in types:
        if t is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            ok = True
        elif t is int and isinstance(value, int) and not isinstance(value, bool):
            ok = True
        elif t is not float and t is not int and isinstance(value, t):
            ok = True
    if not ok:
        names = "/".join(getattr(t, "__name__", str(t)) for t in types)
        problems.append(f"field '{key}' must be {names}, got {type(value).__name__}")


def parse_experiment_config(raw: dict) -> ExperimentConfig:
    """Validate the flat JSON schema; every offending field is reported."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a JSON object"])
    for key in raw:
        if key not in _TOP_KEYS:
            problems.append(f"unknown config key '{key}'")
    for key, value in raw.items():
        if key in _TOP_KEYS:
            _check_type(value, _TOP_KEYS[key], key, problems)
    dataset = raw.get("dataset")
    if dataset is None:
        problems.append("missing required key 'dataset'")
        dataset = {}
    if isinstance(dataset, dict):
        for key in dataset:
            if key not in _DATASET_KEYS:
                problems.append(f"unknown config key 'dataset.{key}'")
            else:
                _check_type(dataset[key], _DATASET_KEYS[key], f"dataset.{key}", problems)
        if "path" in dataset and len(dataset) > 1:
            problems.append("'dataset.path' excludes inline generator fields")
    model = raw.get("model", {})
    if isinstance(model, dict):
        for key in model:
            if key not in _MODEL_KEYS:
                problems.append(f"unknown config key 'model.{key}'")
            else:
                _check_type(model[key], _MODEL_KEYS[key], f"model.{key}", problems)
    seeds = raw.get("seeds", [0])
    if isinstance(seeds, list) and (
        not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds)
    ):
        problems.append("'seeds' must be a non-empty list of integers")
    milestones = raw.get("milestones")
    if isinstance(milestones, list) and not all(isinstance(v, int) for v in milestones):
        problems.append("'milestones' must be a list of integers")
    folds = raw.get("folds", 5)
    if isinstance(folds, int) and not isinstance(folds, bool) and folds < 1:
        problems.append("'folds' must be >= 1")
    if problems:
        raise ConfigError(problems)

    strategy = raw.get("strategy", "dsmm")
    c = raw.get("c", 4)
    return ExperimentConfig(
        dataset=dataset,
        folds=folds,
        fold_seed=raw.get("fold_seed", 0),
        seeds=list(seeds),
        out=raw.get("out", "runs"),
        strategies=strategy if isinstance(strategy, list) else [strategy],
        c_values=c if isinstance(c, list) else [c],
        m=raw.get("m", 8),
        alpha=float(raw.get("alpha", 1e-3)),
        beta=float(raw.get("beta", 1e-4)),
        gamma=float(raw.get("gamma", 1e-3)),
        epochs=raw.get("epochs", 200),
        optimizer=raw.get("optimizer", "adam"),
        decay_factor=float(raw.get("decay_factor", 0.1)),
        milestones=milestones,
        focal_gamma=float(raw.get("focal_gamma", 2.0)),
        model=model,
    )


def _load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"])
    except json.JSONDecodeError as err:
        raise ConfigError([f"config file {path} is not valid JSON: {err}"])


def _resolve_dataset(config: ExperimentConfig, seed_override: int | None = None) -> PairDataset:
    spec = dict(config.dataset)
    if "path" in spec:
        path = spec["path"]
        if not Path(path).exists():
            raise ConfigError([f"dataset file not found: {path}"])
        return load_dataset(path)
    if seed_override is not None:
        spec["seed"] = seed_override
    return generate_synthetic(**spec)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _fmt(v: float) -> str:
    return format(v, ".17g")


def cmd_generate(args) -> int:
    config = parse_experiment_config(_load_config_file(args.config))
    dataset = _resolve_dataset(config, args.seed)
    out = Path(args.out or "dataset.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, dataset)
    print(f"wrote {dataset.n_families} families (dim {dataset.dim}) to {out}")
    return 0


def _folds_payload(folds: FoldSpec, seed: int) -> dict:
    return {
        "k": folds.k,
        "seed": seed,
        "folds": [f.tolist() for f in folds.folds],
    }


def _load_folds(path: str) -> FoldSpec:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return FoldSpec([np.asarray(f, dtype=np.int64) for f in payload["folds"]])


class _EverythingFolds:
    """folds=1 protocol: train and evaluate on the full family set."""

    k = 1

    def __init__(self, dataset: PairDataset):
        self._all = np.arange(dataset.n_families, dtype=np.int64)

    def train_families(self, fold: int) -> np.ndarray:
        return self._all

    def test_families(self, fold: int) -> np.ndarray:
        return self._all


def cmd_train(args) -> int:
    config = parse_experiment_config(_load_config_file(args.config))
    if args.out:
        config.out = args.out
    if args.seed is not None:
        config.seeds = [args.seed]
    if args.strategy:
        config.strategies = [args.strategy]
    if args.c is not None:
        config.c_values = [args.c]
    if args.epochs is not None:
        config.epochs = args.epochs

    dataset = _resolve_dataset(config)
    out_root = Path(config.out)
    out_root.mkdir(parents=True, exist_ok=True)
    if "path" not in config.dataset:
        save_dataset(out_root / "dataset.csv", dataset)
    if config.folds == 1:
        folds = _EverythingFolds(dataset)
        _write_json(
            out_root / "folds.json",
            {"k": 1, "seed": config.fold_seed, "folds": [folds.train_families(0).tolist()]},
        )
    else:
        folds = make_folds(dataset, config.folds, config.fold_seed)
        _write_json(out_root / "folds.json", _folds_payload(folds, config.fold_seed))
    _write_json(out_root / "config.json", config.snapshot())

    kconfig, mconfig = config.model_configs(dataset.dim)
    for strategy in config.strategies:
        for c in config.c_values:
            for seed in config.seeds:
                run_id = f"{strategy}-C{c}-seed{seed}"
                run_dir = out_root / run_id
                run_dir.mkdir(parents=True, exist_ok=True)
                tcfg = config.train_config(strategy, c, seed)
                tcfg.validate()
                started = time.time()
                results = cross_validate(dataset, folds, tcfg, kconfig, mconfig)
                elapsed = time.time() - started
                _write_run(run_dir, tcfg, results, elapsed)
                accs = [r.accuracy for r in results]
                print(
                    f"{run_id}: accuracy {np.mean(accs):.4f} +/- {np.std(accs):.4f} "
                    f"({elapsed:.1f}s)"
                )
    return 0


def _write_run(run_dir: Path, tcfg: TrainConfig, results, elapsed: float) -> None:
    per_fold = []
    for r in results:
        fold_dir = run_dir / f"fold{r.fold}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        rows = ["epoch,train_loss,meta_loss,pos_weight_ratio,lr"]
        for rec in r.state.history:
            rows.append(
                f"{rec.epoch},{_fmt(rec.train_loss)},{_fmt(rec.meta_loss)},"
                f"{_fmt(rec.pos_weight_ratio)},{_fmt(rec.lr)}"
            )
        (fold_dir / "metrics.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        pred_rows = ["parent,child,label,score"] + [
            f"{p},{c},{label},{_fmt(score)}"
            for p, c, label, score in zip(r.parent_idx, r.child_idx, r.labels, r.scores)
        ]
        (fold_dir / "predictions.csv").write_text(
            "\n".join(pred_rows) + "\n", encoding="utf-8"
        )
        save_checkpoint(fold_dir / "checkpoint.txt", r.state.theta, r.state.phi)
        per_fold.append(
            {
                "fold": r.fold,
                "accuracy": r.accuracy,
                "auc": r.auc,
                "bayes_accuracy": r.bayes_accuracy,
                "bayes_auc": r.bayes_auc,
                "weight_fallbacks": r.state.weight_fallbacks,
            }
        )
    accs = np.array([r.accuracy for r in results])
    aucs = np.array([r.auc for r in results])
    summary = {
        "version": __version__,
        "strategy": tcfg.strategy,
        "c": tcfg.c_ratio,
        "seed": tcfg.seed,
        "folds": len(results),
        "per_fold": per_fold,
        "mean_accuracy": float(np.mean(accs)),
        "std_accuracy": float(np.std(accs)),
        "mean_auc": float(np.mean(aucs)),
        "std_auc": float(np.std(aucs)),
    }
    bayes = [r.bayes_accuracy for r in results if r.bayes_accuracy is not None]
    if bayes:
        summary["mean_bayes_accuracy"] = float(np.mean(bayes))
    _write_json(run_dir / "summary.json", summary)
    # wall clock lives outside summary.json so reruns stay byte-identical
    _write_json(run_dir / "timing.json", {"wall_clock_seconds": elapsed})
    _write_json(
        run_dir / "config.json",
        {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(tcfg).items()},
    )


def cmd_eval(args) -> int:
    dataset = load_dataset(args.dataset)
    if args.folds:
        folds = _load_folds(args.folds)
        if not 0 <= args.fold < folds.k:
            raise ContractError(f"fold {args.fold} out of range 0..{folds.k - 1}")
        families = folds.folds[args.fold]
    else:
        families = np.arange(dataset.n_families, dtype=np.int64)
    pairs = balanced_eval_pairs(dataset, families, Rng(args.seed, "eval"))
    x, y = pairs.features(dataset)
    if args.oracle:
        scores = bayes_scores(dataset, pairs.parent_idx, pairs.child_idx)
    else:
        if not args.checkpoint:
            raise ContractError("eval needs --checkpoint (or --oracle)")
        theta, _ = load_checkpoint(args.checkpoint)
        if theta.config.input_dim != dataset.dim:
            raise ContractError(
                f"checkpoint input_dim {theta.config.input_dim} does not match "
                f"dataset dim {dataset.dim}"
            )
        from .models import kinship_batch

        scores = kinship_batch(x, y, theta)
    acc = accuracy(scores, pairs.labels)
    points, auc = roc_auc(scores, pairs.labels)
    out = Path(args.out or "eval")
    out.mkdir(parents=True, exist_ok=True)
    roc_rows = ["threshold,fpr,tpr"] + [
        f"{_fmt(t)},{_fmt(f)},{_fmt(tp)}" for t, f, tp in points
    ]
    (out / "roc.csv").write_text("\n".join(roc_rows) + "\n", encoding="utf-8")
    report = {
        "accuracy": acc,
        "auc": auc,
        "n_pos": int(np.sum(pairs.labels == 1)),
        "n_neg": int(np.sum(pairs.labels == 0)),
        "scored_by": "oracle" if args.oracle else "checkpoint",
        "version": __version__,
    }
    _write_json(out / "report.json", report)
    print(f"accuracy {acc:.4f}  auc {auc:.4f}  -> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    grid = default_gradcheck_grid()
    if args.seed is not None:
        for case in grid:
            case.seed += args.seed
    rows = run_gradcheck(grid, step=args.step)
    failed = False
    for row in rows:
        status = "ok" if row.passed else "FAIL"
        print(f"{row.case.label:48s} max-rel-err {row.gap:.3e}  {status}")
        failed |= not row.passed
    if failed:
        print(f"FAILED: gap above {GRADCHECK_TOLERANCE:g}", file=sys.stderr)
        return 2
    print(f"all {len(rows)} cases within {GRADCHECK_TOLERANCE:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsmm",
        description="Meta-mined sample re-weighting on synthetic pair data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic pair dataset")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", help="output dataset path")
    p.add_argument("--seed", type=int, help="override the generator seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the strategy grid across folds and seeds")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--seed", type=int, help="run a single seed")
    p.add_argument("--strategy", help="run a single strategy")
    p.add_argument("--c", type=int, help="run a single negative ratio C")
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or the Bayes oracle)")
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--dataset", required=True, help="pair dataset file")
    p.add_argument("--folds", help="folds.json from a training run")
    p.add_argument("--fold", type=int, default=0, help="fold index to evaluate")
    p.add_argument("--oracle", action="store_true", help="score with the Bayes oracle")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=0, help="negative-sampling seed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="meta-gradient finite-difference suite")
    p.add_argument("--seed", type=int, help="offset the case seeds")
    p.add_argument("--step", type=float, default=1e-4, help="central-difference step")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        for problem in err.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 1
    except ContractError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return 1
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
