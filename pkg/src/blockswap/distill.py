"""SGD training with optional attention transfer from a frozen teacher.

The recipe follows the usual wide-residual-network setup: SGD with
momentum 0.9, weight decay 5e-4 on conv/linear weights only, and a cosine
learning-rate schedule evaluated per epoch, from lr0 down to zero. The
transfer term compares L2-normalized per-example attention maps at the
three stage outputs and is weighted by beta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import minibatches
from .engine import Parameter, add, backward, normalized_map_distance, scale, softmax_cross_entropy
from .errors import ConfigError, TrainingDiverged
from .network import Network

DECAYED_ROLES = (Parameter.CONV_WEIGHT, Parameter.LINEAR_WEIGHT)


@dataclass(frozen=True)
class TrainRecipe:
    epochs: int
    batch_size: int = 128
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    beta: float = 1000.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr0 <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("lr0 > 0, 0 <= momentum < 1, weight_decay >= 0 required")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")


def cosine_lr(t, total, lr0):
    if not 0 <= t <= total:
        raise ConfigError(f"schedule step {t} outside [0, {total}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / total))


class SGD:
    """Momentum SGD; weight decay is folded into the gradient of decayed roles."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            if self.weight_decay and p.role in DECAYED_ROLES:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def at_loss(student_maps, teacher_maps, ce, beta):
    """ce + beta * sum over points of the normalized-map distance.

    ``student_maps`` are graph tensors; ``teacher_maps`` are plain arrays
    (no gradient flows into the teacher).
    """
    if len(student_maps) != len(teacher_maps):
        raise ConfigError(
            f"{len(student_maps)} student maps vs {len(teacher_maps)} teacher maps")
    total = ce
    for s, t in zip(student_maps, teacher_maps):
        total = add(total, scale(normalized_map_distance(s, t), beta))
    return total


def evaluate(net: Network, ds, batch) -> float:
    """Fraction of eval examples misclassified (batch statistics in BN)."""
    wrong = 0
    for images, labels in minibatches(ds, batch):
        logits = net.forward(images).logits.data
        wrong += int((logits.argmax(axis=1) != labels).sum())
    return wrong / len(ds)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    eval_error: float


def train(student: Network, train_ds, eval_ds, recipe: TrainRecipe, teacher: Network = None):
    """Train the student in place; returns per-epoch history.

    With a teacher, every step adds the attention-transfer term built from
    the teacher's (frozen) stage maps on the same minibatch. Loss going
    non-finite aborts with the history collected so far.
    """
    opt = SGD(student.parameters, cosine_lr(0, recipe.epochs, recipe.lr0),
              recipe.momentum, recipe.weight_decay)
    history = []
    for epoch in range(recipe.epochs):
        opt.lr = cosine_lr(epoch, recipe.epochs, recipe.lr0)
        losses = []
        for images, labels in minibatches(train_ds, recipe.batch_size, recipe.seed, epoch):
            out = student.forward(images)
            loss = softmax_cross_entropy(out.logits, labels)
            if teacher is not None:
                t_maps = [m.data for m in teacher.forward(images).attention]
                loss = at_loss(out.attention, t_maps, loss, recipe.beta)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"loss became {value} in epoch {epoch}", history)
            backward(loss)
            opt.step()
            opt.zero_grad()
            losses.append(value)
        if not losses:
            raise ConfigError(
                f"batch size {recipe.batch_size} exceeds train split of {len(train_ds)}")
        history.append(EpochStats(epoch, opt.lr, float(np.mean(losses)),
                                  evaluate(student, eval_ds, recipe.batch_size)))
    return history
