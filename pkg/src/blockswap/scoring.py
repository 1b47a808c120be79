"""Candidate ranking: Fisher potential plus the ablation metrics.

The Fisher signal for one block reads the activation a and gradient g at
the block's probe (last conv output) after a single cross-entropy
backward pass:

    delta_c = (1/2N) * sum_n (sum_ij a_nij * g_nij)^2      per channel
    delta_b = sum_c delta_c                                 per block

A candidate's potential is the sum of delta_b over blocks, computed from
one minibatch on a freshly initialized network with no parameter update.
The alternative metrics (gradient norm, weight l2, training accuracy) come
from short training trajectories and exist to measure how well each signal
predicts final error.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import minibatches
from .distill import SGD, TrainRecipe
from .engine import backward, softmax_cross_entropy
from .errors import ConfigError, EngineError
from .network import Network, NetworkConfig, config_macs, config_params


@dataclass(frozen=True)
class FisherProbeReading:
    block: int
    delta_c: np.ndarray

    @property
    def delta_b(self):
        return float(self.delta_c.sum())


def fisher_delta_c(a, g) -> float:
    """Single-channel reading from activation and gradient slabs (N, H, W)."""
    a = np.asarray(a, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if a.shape != g.shape:
        raise EngineError(f"activation/gradient shapes differ: {a.shape} vs {g.shape}")
    inner = (a * g).reshape(a.shape[0], -1).sum(axis=1)
    return float((inner ** 2).sum() / (2 * a.shape[0]))


def readings_from_probes(probes):
    """Per-block readings from probe tensors after one backward pass."""
    readings = []
    for i, probe in enumerate(probes):
        if probe.grad is None:
            raise EngineError(f"probe {i} has no gradient; run backward first")
        a = probe.data.astype(np.float64)
        g = probe.grad.astype(np.float64)
        n = a.shape[0]
        inner = (a * g).reshape(n, a.shape[1], -1).sum(axis=2)
        readings.append(FisherProbeReading(i, (inner ** 2).sum(axis=0) / (2 * n)))
    return readings


def fisher_potential(net: Network, images, labels):
    """One forward + backward on a fresh net; no parameter update.

    Returns (potential, readings) where potential = sum of delta_b.
    """
    out = net.forward(images)
    if len(out.probes) != len(net.config.blocks):
        raise EngineError(
            f"{len(out.probes)} probes for {len(net.config.blocks)} blocks")
    backward(softmax_cross_entropy(out.logits, labels))
    readings = readings_from_probes(out.probes)
    net.zero_grad()
    return sum(r.delta_b for r in readings), readings


def metric_l2(net: Network) -> float:
    """Sum over parameters of each tensor's Euclidean norm."""
    return float(sum(np.linalg.norm(p.data.astype(np.float64)) for p in net.parameters))


METRICS = ("fisher", "gradnorm", "l2", "accuracy")


def training_metrics(net: Network, train_ds, recipe: TrainRecipe, checkpoints=(1, 10, 100)):
    """All four metrics along one training trajectory.

    Trains ``net`` in place for max(checkpoints) steps at constant lr0
    (the probe window sits at the start of the schedule, where cosine
    annealing is still at its initial value) and records, at each
    checkpoint m: accumulated Fisher potential, accumulated sum of |grad|,
    fraction of training examples classified correctly so far, and the
    current weight l2. The minibatch stream is recipe-seeded, so every
    candidate scored with the same recipe sees the same data.
    """
    checkpoints = sorted(set(int(m) for m in checkpoints))
    if not checkpoints or checkpoints[0] < 1:
        raise ConfigError(f"checkpoints must be positive, got {checkpoints}")
    steps_per_epoch = len(train_ds) // recipe.batch_size
    if steps_per_epoch < 1:
        raise ConfigError(
            f"batch size {recipe.batch_size} exceeds train split of {len(train_ds)}")

    opt = SGD(net.parameters, recipe.lr0, recipe.momentum, recipe.weight_decay)
    fisher_acc = 0.0
    gradnorm_acc = 0.0
    correct = 0
    seen = 0
    results = {}
    step = 0
    epoch = 0
    while step < checkpoints[-1]:
        for images, labels in minibatches(train_ds, recipe.batch_size, recipe.seed, epoch):
            out = net.forward(images)
            backward(softmax_cross_entropy(out.logits, labels))
            fisher_acc += sum(r.delta_b for r in readings_from_probes(out.probes))
            gradnorm_acc += float(sum(np.abs(p.grad).sum(dtype=np.float64)
                                      for p in net.parameters if p.grad is not None))
            correct += int((out.logits.data.argmax(axis=1) == labels).sum())
            seen += len(labels)
            opt.step()
            opt.zero_grad()
            step += 1
            if step in checkpoints:
                results[step] = {
                    "fisher": fisher_acc,
                    "gradnorm": gradnorm_acc,
                    "accuracy": correct / seen,
                    "l2": metric_l2(net),
                }
            if step >= checkpoints[-1]:
                break
        epoch += 1
    return results


def metric_grad_norm(net, train_ds, recipe, m) -> float:
    return training_metrics(net, train_ds, recipe, (m,))[m]["gradnorm"]


def metric_accuracy(net, train_ds, recipe, m) -> float:
    return training_metrics(net, train_ds, recipe, (m,))[m]["accuracy"]


def _average_ranks(values):
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ConfigError(f"need two equal-length sequences, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ConfigError(f"need at least 2 points, got {len(x)}")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    if denom == 0:
        raise ConfigError("rank correlation undefined for a constant sequence")
    return float((rx * ry).sum() / denom)


@dataclass(frozen=True)
class CandidateScore:
    index: int
    config: str
    params: int
    macs: int
    metric: str
    minibatches: int
    value: float
    rank: int = 0


def score_candidate(index, cfg: NetworkConfig, value, metric, m, input_hw) -> CandidateScore:
    return CandidateScore(index, cfg.config_string(), config_params(cfg),
                          config_macs(cfg, input_hw), metric, m, float(value))


def rank_scores(scores):
    """Fill ranks: 1 = highest value; ties broken by lower candidate index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i].value, scores[i].index))
    ranked = list(scores)
    for rank, i in enumerate(order, start=1):
        ranked[i] = replace(scores[i], rank=rank)
    return ranked


def best_score(scores) -> CandidateScore:
    """Highest-value entry; ties go to the lowest candidate index."""
    if not scores:
        raise ConfigError("cannot select from an empty score list")
    best = scores[0]
    for s in scores[1:]:
        if s.value > best.value or (s.value == best.value and s.index < best.index):
            best = s
    return best


def select_best(scores, depth, width, num_classes) -> NetworkConfig:
    """Config of the highest-value candidate; ties go to the lowest index."""
    return NetworkConfig.from_string(best_score(scores).config, depth, width, num_classes)
