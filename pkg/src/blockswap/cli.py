"""Experiment driver.

Subcommands:

  sample       print budget-satisfying candidate configs, one per line
  score        rank sampled candidates by one metric -> scores.csv
  search       sample -> score -> pick the best -> candidates.csv + chosen.json
  distill      train a config (optionally with a teacher checkpoint)
               -> history.csv + model.ckpt
  correlate    train random candidates to completion and correlate each
               metric with final error -> metrics.csv + correlation.csv
  sensitivity  swap G4 into each position of an all-S net, train each
               -> sensitivity.csv
  density      train random budget-matched candidates plus the best-fitting
               single-blocktype reference -> density.csv

Settings come from a flat `key = value` config file (see DEFAULTS for the
key names), overridable with --seed/--jobs/--out. The output directory
resolves as --out, then the config file, then $BLOCKSWAP_OUT, then
"runs". One master seed drives sampling, data synthesis, initialization,
and batch order, so every command is rerun-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from .checkpoint import restore_network, save_checkpoint
from .data import load_cifar_binary, make_synthetic, minibatches, SyntheticSpec
from .distill import TrainRecipe, cosine_lr, train
from .errors import (BlockSwapError, BudgetError, ConfigError, DataError,
                     TrainingDiverged)
from .network import Network, NetworkConfig, config_params
from .sampler import BudgetSpec, position_grids, sample_candidates
from .scoring import (METRICS, best_score, fisher_potential, rank_scores,
                      score_candidate, spearman, training_metrics)

# sub-stream tags hung off the master seed
TAG_DATA = 0
TAG_SCORE_BATCH = 1
TAG_INIT = 2
TAG_TRAJECTORY = 3
TAG_TRAIN = 4

CORRELATE_CHECKPOINTS = (1, 10, 100)
SCORE_HEADER = ["candidate", "config", "params", "macs",
                "metric", "minibatches", "value", "rank"]


@dataclass
class ExperimentConfig:
    depth: int = 16
    width: int = 1
    classes: int = 10
    budget: int = 0
    budget_fraction: float = 0.0
    num_samples: int = 100
    metric: str = "fisher"
    minibatches: int = 1
    dataset: str = "synthetic"
    cifar_train: str = ""
    cifar_eval: str = ""
    synthetic_size: int = 16
    synthetic_train: int = 1280
    synthetic_eval: int = 512
    epochs: int = 10
    batch_size: int = 128
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    beta: float = 1000.0
    seed: int = 0
    out: str = ""
    jobs: int = 1

    def validate(self):
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.minibatches not in (1, 10, 100):
            raise ConfigError(f"minibatches must be 1, 10 or 100, got {self.minibatches}")
        if self.dataset not in ("synthetic", "cifar"):
            raise ConfigError(f"dataset must be 'synthetic' or 'cifar', got {self.dataset!r}")
        if self.budget and self.budget_fraction:
            raise ConfigError("set budget or budget_fraction, not both")
        if self.budget < 0 or not 0 <= self.budget_fraction <= 1:
            raise ConfigError("budget must be >= 0 and budget_fraction within [0, 1]")
        if self.num_samples < 1 or self.jobs < 1:
            raise ConfigError("num_samples and jobs must be >= 1")


def load_experiment(path=None, **overrides) -> ExperimentConfig:
    """Parse `key = value` lines (# comments) and apply CLI overrides."""
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                lines = f.readlines()
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from e
        for lineno, line in enumerate(lines, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            key, eq, value = text.partition("=")
            key = key.strip()
            value = value.strip()
            if not eq or not key:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
            if key not in types:
                raise ConfigError(f"{path}:{lineno}: unknown setting {key!r}")
            values[key] = value
    for key, value in overrides.items():
        if value is not None:
            values[key] = value

    exp = ExperimentConfig()
    for key, value in values.items():
        kind = types[key]
        try:
            if kind in (int, "int"):
                parsed = int(str(value), 0)
            elif kind in (float, "float"):
                parsed = float(value)
            else:
                parsed = str(value)
        except ValueError as e:
            raise ConfigError(f"setting {key!r}: {e}") from e
        setattr(exp, key, parsed)
    exp.validate()
    return exp


def derived_seed(*parts) -> int:
    return int(np.random.default_rng(list(parts)).integers(2 ** 63))


def _skeleton(exp) -> NetworkConfig:
    return NetworkConfig.uniform(exp.depth, exp.width, exp.classes)


def _resolve_budget(exp, skeleton) -> int:
    if exp.budget:
        return exp.budget
    if exp.budget_fraction:
        return int(exp.budget_fraction * config_params(skeleton))
    raise ConfigError("this command needs budget or budget_fraction")


def _load_data(exp):
    if exp.dataset == "synthetic":
        spec = SyntheticSpec(exp.classes, exp.synthetic_size, exp.synthetic_train,
                             exp.synthetic_eval, derived_seed(exp.seed, TAG_DATA))
        return make_synthetic(spec)
    if not exp.cifar_train or not exp.cifar_eval:
        raise ConfigError("dataset = cifar needs cifar_train and cifar_eval paths")
    train_ds = load_cifar_binary(exp.cifar_train.split(","), split="train")
    eval_ds = load_cifar_binary(exp.cifar_eval.split(","), split="eval")
    if exp.classes != 10:
        raise ConfigError("the CIFAR loader is 10-class")
    return train_ds, eval_ds


def _recipe(exp, seed) -> TrainRecipe:
    return TrainRecipe(exp.epochs, exp.batch_size, exp.lr0, exp.momentum,
                       exp.weight_decay, exp.beta, seed)


def _scoring_minibatch(exp, train_ds):
    if exp.batch_size > len(train_ds):
        raise ConfigError(
            f"batch size {exp.batch_size} exceeds train split of {len(train_ds)}")
    rng = np.random.default_rng([exp.seed, TAG_SCORE_BATCH])
    idx = rng.choice(len(train_ds), exp.batch_size, replace=False)
    return train_ds.images[idx], train_ds.labels[idx]


def _parallel_map(fn, items, jobs):
    if jobs <= 1:
        return [fn(i, item) for i, item in enumerate(items)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda pair: fn(*pair), enumerate(items)))


def _score_all(exp, candidates, train_ds):
    images, labels = _scoring_minibatch(exp, train_ds)
    traj_recipe = _recipe(exp, derived_seed(exp.seed, TAG_TRAJECTORY))
    input_hw = train_ds.images.shape[2]

    def work(i, cand):
        net = Network(cand, np.random.default_rng([exp.seed, i, TAG_INIT]))
        if exp.metric == "fisher" and exp.minibatches == 1:
            value = fisher_potential(net, images, labels)[0]
        else:
            value = training_metrics(net, train_ds, traj_recipe,
                                     (exp.minibatches,))[exp.minibatches][exp.metric]
        return score_candidate(i, cand, value, exp.metric, exp.minibatches, input_hw)

    return rank_scores(_parallel_map(work, candidates, exp.jobs))


def _train_candidate(exp, cand, index, train_ds, eval_ds):
    """Plain-CE training run; returns final eval error (1.0 on divergence)."""
    net = Network(cand, np.random.default_rng([exp.seed, index, TAG_INIT]))
    recipe = _recipe(exp, derived_seed(exp.seed, TAG_TRAIN))
    try:
        history = train(net, train_ds, eval_ds, recipe)
    except TrainingDiverged:
        return 1.0
    return history[-1].eval_error


def _score_row(s):
    return [s.index, s.config, s.params, s.macs, s.metric, s.minibatches,
            repr(float(s.value)), s.rank]


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    print(f"wrote {path}")


def _out_dir(exp, flag_value):
    out = flag_value or exp.out or os.environ.get("BLOCKSWAP_OUT") or "runs"
    os.makedirs(out, exist_ok=True)
    return out


def cmd_sample(exp, out):
    skeleton = _skeleton(exp)
    budget = BudgetSpec(_resolve_budget(exp, skeleton), exp.num_samples, exp.seed)
    for cand in sample_candidates(skeleton, budget):
        print(cand.config_string())
    return 0


def cmd_score(exp, out):
    skeleton = _skeleton(exp)
    budget = BudgetSpec(_resolve_budget(exp, skeleton), exp.num_samples, exp.seed)
    train_ds, _ = _load_data(exp)
    scores = _score_all(exp, sample_candidates(skeleton, budget), train_ds)
    _write_csv(os.path.join(out, "scores.csv"), SCORE_HEADER,
               [_score_row(s) for s in scores])
    return 0


def cmd_search(exp, out):
    skeleton = _skeleton(exp)
    budget = BudgetSpec(_resolve_budget(exp, skeleton), exp.num_samples, exp.seed)
    train_ds, _ = _load_data(exp)
    scores = _score_all(exp, sample_candidates(skeleton, budget), train_ds)
    _write_csv(os.path.join(out, "candidates.csv"), SCORE_HEADER,
               [_score_row(s) for s in scores])

    best = best_score(scores)
    chosen = {"config": best.config, "params": best.params, "macs": best.macs,
              "potential": float(best.value), "seed": exp.seed}
    path = os.path.join(out, "chosen.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(chosen, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {path}")
    return 0


def cmd_distill(exp, out, chosen_path=None, teacher_path=None):
    train_ds, eval_ds = _load_data(exp)
    if chosen_path:
        try:
            with open(chosen_path, encoding="utf-8") as f:
                config_string = json.load(f)["config"]
        except (OSError, ValueError, KeyError) as e:
            raise ConfigError(f"cannot read chosen config: {e}") from e
        student_cfg = NetworkConfig.from_string(config_string, exp.depth,
                                                exp.width, exp.classes)
    else:
        student_cfg = _skeleton(exp)
    teacher = restore_network(teacher_path) if teacher_path else None

    student = Network(student_cfg, np.random.default_rng([exp.seed, 0, TAG_INIT]))
    recipe = _recipe(exp, derived_seed(exp.seed, TAG_TRAIN))
    try:
        history = train(student, train_ds, eval_ds, recipe, teacher)
    except TrainingDiverged as diverged:
        _write_history(out, diverged.history)
        raise
    _write_history(out, history)
    ckpt = os.path.join(out, "model.ckpt")
    save_checkpoint(ckpt, student)
    print(f"wrote {ckpt}")
    print(f"final eval error {history[-1].eval_error!r}")
    return 0


def _write_history(out, history):
    _write_csv(os.path.join(out, "history.csv"),
               ["epoch", "lr", "train_loss", "eval_error"],
               [[h.epoch, repr(h.lr), repr(h.train_loss), repr(h.eval_error)]
                for h in history])


def cmd_correlate(exp, out):
    if exp.num_samples < 10:
        raise ConfigError(f"correlate needs num_samples >= 10, got {exp.num_samples}")
    skeleton = _skeleton(exp)
    budget = BudgetSpec(_resolve_budget(exp, skeleton), exp.num_samples, exp.seed)
    candidates = sample_candidates(skeleton, budget)
    train_ds, eval_ds = _load_data(exp)
    traj_recipe = _recipe(exp, derived_seed(exp.seed, TAG_TRAJECTORY))
    input_hw = train_ds.images.shape[2]

    def work(i, cand):
        probe_net = Network(cand, np.random.default_rng([exp.seed, i, TAG_INIT]))
        metrics = training_metrics(probe_net, train_ds, traj_recipe, CORRELATE_CHECKPOINTS)
        error = _train_candidate(exp, cand, i, train_ds, eval_ds)
        return metrics, error

    results = _parallel_map(work, candidates, exp.jobs)
    errors = [error for _, error in results]

    rows = []
    corr_rows = []
    for metric in METRICS:
        corr = [metric]
        for m in CORRELATE_CHECKPOINTS:
            values = [metrics[m][metric] for metrics, _ in results]
            group = rank_scores([
                score_candidate(i, cand, value, metric, m, input_hw)
                for i, (cand, value) in enumerate(zip(candidates, values))])
            rows.extend(_score_row(s) for s in group)
            corr.append(repr(_safe_spearman(values, errors)))
        corr_rows.append(corr)
    error_group = rank_scores([
        score_candidate(i, cand, err, "error", 0, input_hw)
        for i, (cand, err) in enumerate(zip(candidates, errors))])
    rows.extend(_score_row(s) for s in error_group)
    corr_rows.append(["error"] + [repr(_safe_spearman(errors, errors))] * 3)

    _write_csv(os.path.join(out, "metrics.csv"), SCORE_HEADER, rows)
    _write_csv(os.path.join(out, "correlation.csv"),
               ["metric", "m1", "m10", "m100"], corr_rows)
    return 0


def _safe_spearman(x, y):
    try:
        return spearman(x, y)
    except ConfigError:
        return math.nan


def cmd_sensitivity(exp, out):
    skeleton = _skeleton(exp)
    train_ds, eval_ds = _load_data(exp)
    variants = [skeleton.replace_block(i, "G4") for i in range(len(skeleton.blocks))]

    def work(i, cand):
        return _train_candidate(exp, cand, i, train_ds, eval_ds)

    errors = _parallel_map(work, variants, exp.jobs)
    reference_error = _train_candidate(exp, skeleton, len(variants), train_ds, eval_ds)
    rows = [[i, "G4", config_params(cand), repr(err)]
            for i, (cand, err) in enumerate(zip(variants, errors))]
    rows.append([-1, "none", config_params(skeleton), repr(reference_error)])
    _write_csv(os.path.join(out, "sensitivity.csv"),
               ["position", "substitution", "params", "error"], rows)
    return 0


def _uniform_reference(skeleton, budget):
    """Best single-blocktype config fitting the budget."""
    shared = None
    for grid in position_grids(skeleton):
        tokens = {d.token() for d in grid}
        shared = tokens if shared is None else shared & tokens
    fitting = []
    for token in sorted(shared):
        cfg = NetworkConfig.uniform(skeleton.depth, skeleton.width,
                                    skeleton.num_classes, token)
        params = config_params(cfg)
        if params <= budget:
            fitting.append((params, token, cfg))
    if not fitting:
        raise BudgetError(
            f"no single-blocktype config fits the budget of {budget} params")
    fitting.sort(key=lambda item: (-item[0], item[1]))
    return fitting[0][2]


def cmd_density(exp, out):
    skeleton = _skeleton(exp)
    if exp.num_samples < 10:
        raise ConfigError(f"density needs num_samples >= 10, got {exp.num_samples}")
    budget_params = _resolve_budget(exp, skeleton)
    budget = BudgetSpec(budget_params, exp.num_samples, exp.seed)
    candidates = sample_candidates(skeleton, budget)
    reference = _uniform_reference(skeleton, budget_params)
    train_ds, eval_ds = _load_data(exp)

    def work(i, cand):
        return _train_candidate(exp, cand, i, train_ds, eval_ds)

    errors = _parallel_map(work, candidates, exp.jobs)
    ref_error = _train_candidate(exp, reference, len(candidates), train_ds, eval_ds)
    rows = [[i, cand.config_string(), config_params(cand), repr(err)]
            for i, (cand, err) in enumerate(zip(candidates, errors))]
    rows.append(["reference", reference.config_string(),
                 config_params(reference), repr(ref_error)])
    _write_csv(os.path.join(out, "density.csv"),
               ["candidate", "config", "params", "error"], rows)
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="blockswap",
        description="Budgeted block substitution for WideResNets.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_out in (("sample", False), ("score", True), ("search", True),
                            ("distill", True), ("correlate", True),
                            ("sensitivity", True), ("density", True)):
        p = sub.add_parser(name)
        p.add_argument("--config", help="path to a key = value settings file")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--jobs", type=int, help="max concurrent candidate evaluations")
        p.add_argument("--out", help="output directory (else $BLOCKSWAP_OUT, else ./runs)")
        p.set_defaults(needs_out=needs_out)
        if name == "distill":
            p.add_argument("--chosen", help="chosen.json from `search` (default: all-S)")
            p.add_argument("--teacher", help="teacher checkpoint for attention transfer")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        exp = load_experiment(args.config, seed=args.seed, jobs=args.jobs)
        out = _out_dir(exp, args.out) if args.needs_out else None
        if args.command == "sample":
            return cmd_sample(exp, out)
        if args.command == "score":
            return cmd_score(exp, out)
        if args.command == "search":
            return cmd_search(exp, out)
        if args.command == "distill":
            return cmd_distill(exp, out, args.chosen, args.teacher)
        if args.command == "correlate":
            return cmd_correlate(exp, out)
        if args.command == "sensitivity":
            return cmd_sensitivity(exp, out)
        return cmd_density(exp, out)
    except BudgetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except (ConfigError, DataError, BlockSwapError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
