"""Momentum-SGD training loop with two multi-head strategies.

multitask: one phase, all heads live, loss = unweighted sum of per-head
cross-entropies, every parameter trainable.

separate: phase 1 trains the backbone plus the final head only; phase 2
freezes the backbone bit-for-bit (it runs in inference mode, untaped) and
trains the two mid branches on their own losses. The branches share no
parameters, so training them in one pass is the same arithmetic as
training them one at a time.

Learning-rate bookkeeping runs in exact decimal arithmetic so that two
0.1x decays of 0.1 give 0.001, not 0.001 plus an ulp of drift.
"""

import csv
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

import numpy as np

from . import data as data_mod
from . import ops
from .errors import DimensionError, DivergenceError, ParameterError
from .tape import GradientTape

# training halts once decay drives the rate below this
LR_FLOOR = 1e-5

_CONFIG_FIELDS = (
    "batch_size",
    "momentum",
    "initial_lr",
    "lr_decay_factor",
    "plateau_patience",
    "weight_decay",
    "dropout_final",
    "dropout_mid",
    "seed",
    "max_epochs",
)


@dataclass
class TrainConfig:
    batch_size: int = 256
    momentum: float = 0.9
    initial_lr: float = 0.1
    lr_decay_factor: float = 0.1
    plateau_patience: int = 3
    weight_decay: float = 1e-5
    dropout_final: float = 0.5
    dropout_mid: float = 0.2
    seed: int = 0
    max_epochs: int = 30

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be at least 1")
        if not 0 <= self.momentum < 1:
            raise ParameterError("momentum must lie in [0, 1)")
        if self.initial_lr < 0:
            raise ParameterError("initial_lr cannot be negative")
        if not 0 < self.lr_decay_factor <= 1:
            raise ParameterError("lr_decay_factor must lie in (0, 1]")
        if self.plateau_patience < 1:
            raise ParameterError("plateau_patience must be at least 1")
        if self.weight_decay < 0:
            raise ParameterError("weight_decay cannot be negative")
        for rate in (self.dropout_final, self.dropout_mid):
            if not 0 <= rate < 1:
                raise ParameterError("dropout rates must lie in [0, 1)")
        if self.max_epochs < 1:
            raise ParameterError("max_epochs must be at least 1")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(_CONFIG_FIELDS)
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class TrainStrategy(str, Enum):
    MULTITASK = "multitask"
    SEPARATE = "separate"


@dataclass
class OptimizerState:
    """Velocities plus the plateau-driven learning-rate schedule."""

    velocities: dict = field(default_factory=dict)
    lr: float = 0.1
    initial_lr: float = 0.1
    decay_factor: float = 0.1
    patience: int = 3
    min_improvement_pp: float = 0.1
    best_acc: float = None
    stale: int = 0
    decay_count: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def from_config(cls, config):
        return cls(
            lr=config.initial_lr,
            initial_lr=config.initial_lr,
            decay_factor=config.lr_decay_factor,
            patience=config.plateau_patience,
        )


def sgd_step(params, grads, state, config):
    """One momentum-SGD update over the supplied gradients, in place.

    v <- momentum*v - lr*(g + weight_decay*w); w <- w + v. Parameters
    without a gradient entry (frozen, or batch-norm running statistics)
    are untouched.
    """
    lr = np.float32(state.lr)
    mom = np.float32(config.momentum)
    wd = np.float32(config.weight_decay)
    for name in sorted(grads):
        g = grads[name]
        w = params[name]
        if g.shape != w.shape:
            raise DimensionError(
                f"gradient for {name} has shape {g.shape}, parameter {w.shape}"
            )
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(w)
        v = mom * v - lr * (g.astype(w.dtype) + wd * w)
        state.velocities[name] = v
        w += v
    return params, state


def _exact_lr(state):
    base = Fraction(str(state.initial_lr))
    factor = Fraction(str(state.decay_factor))
    return float(base * factor ** state.decay_count)


def lr_on_plateau(state, eval_accuracy):
    """Track accuracy; decay lr by the configured factor on a plateau.

    A plateau is `patience` consecutive evaluations none of which beats
    the best seen by more than 0.1 percentage points. The first
    evaluation only seeds the baseline. Returns the (possibly reduced)
    learning rate.
    """
    acc = float(eval_accuracy)
    state.history.append(acc)
    if state.best_acc is None:
        state.best_acc = acc
        return state.lr
    if (acc - state.best_acc) * 100.0 > state.min_improvement_pp:
        state.best_acc = acc
        state.stale = 0
        return state.lr
    state.stale += 1
    if state.stale >= state.patience:
        state.decay_count += 1
        state.lr = _exact_lr(state)
        state.stale = 0
    return state.lr


def _as_arrays(dataset):
    if isinstance(dataset, tuple):
        x, y = dataset
        return np.asarray(x, dtype=np.float32), np.asarray(y, dtype=np.int64)
    return data_mod.to_arrays(dataset)


def _check_labels(y, num_classes, what):
    if y.size == 0:
        raise ParameterError(f"{what} dataset is empty")
    if y.min() < 0 or y.max() >= num_classes:
        raise ParameterError(
            f"{what} labels must lie in [0, {num_classes}), found {y.max()}"
        )


def head_accuracies(network, x, y, heads, batch_size=256):
    """Fraction of argmax hits per head, computed in inference mode."""
    hits = {h: 0 for h in heads}
    for start in range(0, x.shape[0], batch_size):
        xb = x[start : start + batch_size]
        yb = y[start : start + batch_size]
        outs = network.forward(xb, heads=list(heads), mode="infer")
        for h in heads:
            hits[h] += int((outs[h].argmax(axis=-1) == yb).sum())
    return {h: hits[h] / x.shape[0] for h in heads}


def _run_phase(
    network,
    x,
    y,
    x_eval,
    y_eval,
    config,
    heads,
    monitor_heads,
    freeze_backbone,
    epoch_offset,
    metrics,
):
    params = network.params
    state = OptimizerState.from_config(config)
    rates = {h: config.dropout_mid for h in heads}
    if "final" in rates:
        rates["final"] = config.dropout_final
    epochs_run = 0
    for e in range(config.max_epochs):
        epoch = epoch_offset + e + 1
        epochs_run += 1
        rng = np.random.default_rng([config.seed, epoch])
        loss_sums = {h: 0.0 for h in heads}
        seen = 0
        for b, (xb, yb) in enumerate(
            data_mod.batches(x, y, config.batch_size, rng)
        ):
            tape = GradientTape()
            outs = network.forward(
                xb,
                heads=list(heads),
                mode="train",
                tape=tape,
                rng=rng,
                dropout_rates=rates,
                freeze_backbone=freeze_backbone,
            )
            roots = []
            for h in heads:
                logits = outs[h]
                nll, probs = ops.softmax_cross_entropy(logits, yb)
                if not np.isfinite(nll):
                    raise DivergenceError(
                        f"loss for head {h} became non-finite at "
                        f"epoch {epoch}, batch {b}"
                    )
                loss = np.asarray(nll)
                tape.record(
                    loss,
                    [logits],
                    lambda g, p=probs, lab=yb: (
                        ops.softmax_cross_entropy_backward(g, p, lab),
                    ),
                )
                roots.append(loss)
                loss_sums[h] += float(nll) * xb.shape[0]
            grads = tape.gradients(roots)
            grad_dict = {}
            for name in params.names():
                g = grads.of(params[name])
                if g is not None:
                    grad_dict[name] = g
            sgd_step(params, grad_dict, state, config)
            seen += xb.shape[0]
        accs = head_accuracies(
            network, x_eval, y_eval, heads, batch_size=config.batch_size
        )
        for h in heads:
            metrics.append(
                {
                    "epoch": epoch,
                    "head": h,
                    "loss": loss_sums[h] / seen,
                    "accuracy": accs[h],
                    "lr": state.lr,
                }
            )
        monitor = sum(accs[h] for h in monitor_heads) / len(monitor_heads)
        lr_on_plateau(state, monitor)
        if state.lr < LR_FLOOR:
            break
    return epochs_run


def write_metrics(metrics, path):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["epoch", "head", "loss", "accuracy", "lr"]
        )
        writer.writeheader()
        writer.writerows(metrics)


def train(network, dataset, config, strategy, eval_data=None, metrics_path=None):
    """Train a network; returns (parameters, per-epoch metric rows).

    dataset and eval_data are Sample lists or (images, labels) tuples;
    without eval_data the training set doubles as the plateau monitor.
    Metric rows carry epoch, head, loss, accuracy, lr and are also
    written as CSV when metrics_path is given. Deterministic for a fixed
    (seed, config, data) triple.
    """
    strategy = TrainStrategy(strategy)
    x, y = _as_arrays(dataset)
    num_classes = network.spec.num_classes
    _check_labels(y, num_classes, "train")
    if eval_data is not None:
        x_eval, y_eval = _as_arrays(eval_data)
        _check_labels(y_eval, num_classes, "eval")
    else:
        x_eval, y_eval = x, y
    mid_heads = [ex.name for ex in network.spec.exits]
    metrics = []
    if strategy is TrainStrategy.MULTITASK:
        heads = mid_heads + ["final"]
        _run_phase(
            network, x, y, x_eval, y_eval, config,
            heads=heads, monitor_heads=["final"],
            freeze_backbone=False, epoch_offset=0, metrics=metrics,
        )
    else:
        done = _run_phase(
            network, x, y, x_eval, y_eval, config,
            heads=["final"], monitor_heads=["final"],
            freeze_backbone=False, epoch_offset=0, metrics=metrics,
        )
        if mid_heads:
            _run_phase(
                network, x, y, x_eval, y_eval, config,
                heads=mid_heads, monitor_heads=mid_heads,
                freeze_backbone=True, epoch_offset=done, metrics=metrics,
            )
    network.trained = True
    if metrics_path is not None:
        write_metrics(metrics, metrics_path)
    return network.params, metrics
