"""Threshold-gated early-exit inference.

Stage 1 runs the shared backbone to the gate branch's attach point and
evaluates the gate head. Samples whose top softmax probability clears the
threshold (inclusive) stop there; the rest continue through the remaining
backbone and are predicted from the late output: the elementwise mean of
every downstream branch's probabilities and the final head's, or the
final head alone when fusion is off.

Costs are charged from the analytic model: the gate's exit total for
early samples, and every executed layer for late ones. With fusion off
the skipped downstream branch is neither run nor charged.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import cost as cost_mod
from . import data as data_mod
from . import ops
from .architecture import FINAL_NAME
from .errors import ParameterError, UsageError

LATE_EXIT = "late"


@dataclass
class CascadePolicy:
    """Gate threshold and late-path fusion switches.

    threshold is nominally a probability; values above 1 are legal and
    mean "never exit early", which is the cleanest way to ask for the
    late path unconditionally.
    """

    threshold: float = 0.98
    exit_head: str = "mid_a"
    fuse_late: bool = True

    def __post_init__(self):
        if self.threshold < 0:
            raise ParameterError("threshold cannot be negative")
        if not self.exit_head:
            raise ParameterError("exit_head must name an exit branch")


@dataclass
class CascadeResult:
    predicted_class: int
    exit_point: str
    confidence: float
    mac_cost: int


@dataclass
class CascadeStats:
    n: int
    accuracy: float
    early_exit_fraction: float
    mean_mac_cost: float
    total_mac_cost: int
    per_exit: dict = field(default_factory=dict)


def _branch_macs(report, name):
    return sum(
        lc.mac_count for lc in report.layers if lc.layer_name.startswith(f"{name}/")
    )


def _path_costs(spec, policy):
    """(early_cost, late_cost) for this policy's gate and fusion setting."""
    gate = spec.exit_by_name(policy.exit_head)
    report = cost_mod.network_cost(spec)
    backbone = sum(lc.mac_count for lc in report.layers if "/" not in lc.layer_name)
    late = backbone + _branch_macs(report, gate.name) + _branch_macs(report, FINAL_NAME)
    for ex in _downstream_exits(spec, gate, policy):
        late += _branch_macs(report, ex.name)
    return report.exit_totals[gate.name], late


def _downstream_exits(spec, gate, policy):
    if not policy.fuse_late:
        return []
    order = [layer.name for layer in spec.backbone]
    after_gate = order.index(gate.attach_after)
    return [ex for ex in spec.exits if order.index(ex.attach_after) > after_gate]


def _stage1(network, xb, gate):
    """Backbone to the gate's attach point plus the gate branch."""
    feats, _ = network.forward_backbone(xb, mode="infer", stop_after=gate.attach_after)
    logits = network.forward_branch(feats, gate, mode="infer")
    return ops.softmax(logits), feats


def _stage2(network, feats, gate, policy):
    """Resume the backbone from saved features; fuse the late heads."""
    spec = network.spec
    downstream = _downstream_exits(spec, gate, policy)
    out, collected = network.forward_backbone(
        feats,
        mode="infer",
        start_after=gate.attach_after,
        taps=[ex.attach_after for ex in downstream],
    )
    prob_sets = [
        ops.softmax(network.forward_branch(collected[ex.attach_after], ex, mode="infer"))
        for ex in downstream
    ]
    prob_sets.append(ops.softmax(network.forward_final(out, mode="infer")))
    fused = prob_sets[0]
    for p in prob_sets[1:]:
        fused = fused + p
    return fused / len(prob_sets)


def _require_trained(network):
    if not network.trained:
        raise UsageError(
            "cascaded inference needs a trained network; train it or load "
            "a model saved after training"
        )


def _dataset_arrays(dataset):
    if isinstance(dataset, tuple):
        x, y = dataset
        x = np.asarray(x, dtype=np.float32)
        y = np.asarray(y, dtype=np.int64)
        ids = [str(i) for i in range(x.shape[0])]
    else:
        x, y = data_mod.to_arrays(dataset)
        ids = [s.source_id for s in dataset]
    return x, y, ids


def cascade_infer(image, network, policy):
    """Classify one image through the cascade; see the module docstring."""
    _require_trained(network)
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3:
        raise ParameterError(f"expected one [1,H,W] image, got shape {img.shape}")
    gate = network.spec.exit_by_name(policy.exit_head)
    early_cost, late_cost = _path_costs(network.spec, policy)
    probs, feats = _stage1(network, img[None], gate)
    confidence = float(probs[0].max())
    if confidence >= policy.threshold:
        return CascadeResult(
            predicted_class=int(probs[0].argmax()),
            exit_point=gate.name,
            confidence=confidence,
            mac_cost=early_cost,
        )
    fused = _stage2(network, feats, gate, policy)
    return CascadeResult(
        predicted_class=int(fused[0].argmax()),
        exit_point=LATE_EXIT,
        confidence=float(fused[0].max()),
        mac_cost=late_cost,
    )


def cascade_eval(dataset, network, policy, batch_size=256, trace_path=None):
    """Run the cascade over a labeled dataset and aggregate statistics.

    mean_mac_cost is computed as the convex combination
    f*early + (1-f)*late with f the early-exit fraction, which is an
    identity with the per-sample average.
    """
    _require_trained(network)
    x, y, ids = _dataset_arrays(dataset)
    n = x.shape[0]
    if n == 0:
        raise ParameterError("cannot evaluate an empty dataset")
    gate = network.spec.exit_by_name(policy.exit_head)
    early_cost, late_cost = _path_costs(network.spec, policy)
    preds = np.empty(n, dtype=np.int64)
    confs = np.empty(n, dtype=np.float64)
    early = np.zeros(n, dtype=bool)
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        probs, feats = _stage1(network, x[sl], gate)
        conf_b = probs.max(axis=-1)
        take = conf_b >= policy.threshold
        preds[sl] = probs.argmax(axis=-1)
        confs[sl] = conf_b
        early[sl] = take
        if not take.all():
            stay = ~take
            fused = _stage2(network, feats[stay], gate, policy)
            idx = np.arange(sl.start, sl.stop)[stay]
            preds[idx] = fused.argmax(axis=-1)
            confs[idx] = fused.max(axis=-1)
    correct = preds == y
    n_early = int(early.sum())
    f = n_early / n
    mean_cost = f * early_cost + (1.0 - f) * late_cost
    per_exit = {}
    for name, mask in ((gate.name, early), (LATE_EXIT, ~early)):
        count = int(mask.sum())
        per_exit[name] = {
            "count": count,
            "accuracy": float(correct[mask].mean()) if count else None,
        }
    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "exit", "confidence", "correct"])
            for i in range(n):
                writer.writerow(
                    [
                        ids[i],
                        gate.name if early[i] else LATE_EXIT,
                        f"{confs[i]:.6f}",
                        int(correct[i]),
                    ]
                )
    return CascadeStats(
        n=n,
        accuracy=float(correct.mean()),
        early_exit_fraction=f,
        mean_mac_cost=mean_cost,
        total_mac_cost=n_early * early_cost + (n - n_early) * late_cost,
        per_exit=per_exit,
    )


def head_eval(dataset, network, head, batch_size=256):
    """Standalone accuracy of one head (softmax argmax, inference mode)."""
    if head not in network.spec.head_names():
        raise ParameterError(
            f"unknown head {head!r}; choose from {network.spec.head_names()}"
        )
    x, y, _ = _dataset_arrays(dataset)
    if x.shape[0] == 0:
        raise ParameterError("cannot evaluate an empty dataset")
    hits = 0
    for start in range(0, x.shape[0], batch_size):
        xb = x[start : start + batch_size]
        yb = y[start : start + batch_size]
        logits = network.forward(xb, heads=[head], mode="infer")[head]
        probs = ops.softmax(logits)
        hits += int((probs.argmax(axis=-1) == yb).sum())
    return hits / x.shape[0]
