"""Optimizers, learning-rate schedule, losses, and evaluation metrics."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError
from .tensor import bce_loss  # re-exported: the loss lives with the autodiff kernel

__all__ = [
    "OptimConfig", "MetricsReport", "lr_at", "bce_loss", "qrs_match",
    "seg_predictions", "macro_auc", "sgd_step", "adam_step", "SGD", "Adam",
    "evaluate_segmentation", "evaluate_classification", "RETRAIN_LR",
]

WARMUP_EPOCHS = 5
WARMUP_START_LR = 1e-6
HALVING_PERIOD = 30
RETRAIN_LR = 0.0005


@dataclass
class OptimConfig:
    optimizer: str = "adam"  # "adam" | "sgd"
    base_lr: float = 0.001
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 5

    def validate(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")


def lr_at(epoch, config):
    """Warm-up ramp over epochs 0-4, then halving every 30 epochs.

    The decay counter starts after the warm-up, so epoch 5 runs at the
    base rate and epoch 35 at half of it.
    """
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    base = config.base_lr
    if epoch < WARMUP_EPOCHS:
        return WARMUP_START_LR + (base - WARMUP_START_LR) * epoch / WARMUP_EPOCHS
    return base * 0.5 ** ((epoch - WARMUP_EPOCHS) // HALVING_PERIOD)


# ---------------------------------------------------------------------------
# optimizers

def sgd_step(params, lr, momentum=0.9, state=None):
    """In-place SGD with classical momentum; frozen scalars never move."""
    if state is None:
        state = {}
    for p in params:
        if p.grad is None:
            continue
        v = state.get(id(p))
        if v is None:
            v = np.zeros_like(p.data)
            state[id(p)] = v
        v *= momentum
        v += p.grad
        update = lr * v
        if p.trainable is not None:
            update = update * p.trainable
        p.data -= update
    return state


def adam_step(params, lr, step_index, beta1=0.9, beta2=0.999, eps=1e-8, state=None):
    """In-place Adam with bias correction; ``step_index`` starts at 1."""
    if step_index < 1:
        raise ConfigError(f"adam step_index must be >= 1, got {step_index}")
    if state is None:
        state = {}
    bc1 = 1.0 - beta1 ** step_index
    bc2 = 1.0 - beta2 ** step_index
    for p in params:
        if p.grad is None:
            continue
        ms = state.get(id(p))
        if ms is None:
            ms = (np.zeros_like(p.data), np.zeros_like(p.data))
            state[id(p)] = ms
        m, v = ms
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * p.grad ** 2
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if p.trainable is not None:
            update = update * p.trainable
        p.data -= update
    return state


class SGD:
    def __init__(self, params, momentum=0.9):
        self.params = list(params)
        self.momentum = momentum
        self.state = {}

    def step(self, lr):
        sgd_step(self.params, lr, self.momentum, self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999):
        self.params = list(params)
        self.beta1, self.beta2 = beta1, beta2
        self.state = {}
        self.t = 0

    def step(self, lr):
        self.t += 1
        adam_step(self.params, lr, self.t, self.beta1, self.beta2, state=self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def make_optimizer(params, config):
    if config.optimizer == "sgd":
        return SGD(params, momentum=config.momentum)
    return Adam(params, beta1=config.beta1, beta2=config.beta2)


# ---------------------------------------------------------------------------
# segmentation metrics

def qrs_match(pred_positions, true_positions, tol_samples):
    """One-to-one in-order matching of predictions to annotations.

    Both lists must be sorted. The sweep advances through predictions and
    truths together, pairing a prediction with the earliest unmatched
    truth within ``tol_samples``; this realizes the maximum possible
    number of pairings for interval matching on a line.
    """
    if tol_samples < 0:
        raise ConfigError(f"tol_samples must be >= 0, got {tol_samples}")
    preds = np.asarray(pred_positions)
    truth = np.asarray(true_positions)
    i = j = tp = 0
    while i < len(preds) and j < len(truth):
        d = preds[i] - truth[j]
        if abs(d) <= tol_samples:
            tp += 1
            i += 1
            j += 1
        elif d < 0:
            i += 1
        else:
            j += 1
    return tp, len(preds) - tp, len(truth) - tp


def seg_predictions(probabilities, fs=None):
    """Threshold at 0.5, find positive runs, map run centroids to sample indices.

    ``probabilities`` is one window's quarter-resolution output; returned
    indices are at the original sampling resolution (position * 4). Every
    run counts, including single positions. ``fs`` is accepted for
    signature symmetry with the matching tolerance helpers.
    """
    p = np.asarray(probabilities)
    mask = p > 0.5
    if not mask.any():
        return np.empty(0, dtype=np.int64)
    idx = np.flatnonzero(mask)
    breaks = np.flatnonzero(np.diff(idx) > 1)
    runs = np.split(idx, breaks + 1)
    return np.asarray([int(round(r.mean())) * 4 for r in runs], dtype=np.int64)


def seg_tolerance_samples(fs):
    """Default QRS matching tolerance: 75 ms at the given sampling rate."""
    return int(round(0.075 * fs))


def prf_from_counts(tp, fp, fn):
    sen = tp / (tp + fn) if tp + fn else 0.0
    pp = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * sen * pp / (sen + pp) if sen + pp else 0.0
    return sen, pp, f1


# ---------------------------------------------------------------------------
# classification metrics

def _auc_rank(scores, labels):
    """Mann-Whitney AUC with half credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    ranks = rankdata(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def macro_auc(scores, labels):
    """Per-class and macro-averaged ROC AUC for multi-label outputs.

    ``scores`` and ``labels`` are (n_samples, n_classes) arrays (or
    per-class lists of equal lengths). A class with a single label value
    is excluded from the macro average with a warning and reported as
    None.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ConfigError(f"scores shape {scores.shape} != labels shape {labels.shape}")
    if scores.ndim == 1:
        scores = scores[:, None]
        labels = labels[:, None]
    per_class = []
    included = []
    for c in range(scores.shape[1]):
        y = labels[:, c]
        if y.min() == y.max():
            warnings.warn(f"class {c} has a single label value; excluded from macro AUC")
            per_class.append(None)
            continue
        auc = _auc_rank(scores[:, c], y)
        per_class.append(auc)
        included.append(auc)
    macro = float(np.mean(included)) if included else float("nan")
    return per_class, macro


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricsReport:
    """Canonical result record for one task evaluation."""

    task: str = ""
    mode: str = ""
    tp: int = 0
    fp: int = 0
    fn: int = 0
    sen: float = 0.0
    pp: float = 0.0
    f1: float = 0.0
    per_class_auc: list = field(default_factory=list)
    macro_auc: float | None = None
    runtime_seconds: float = 0.0
    parameter_count: int = 0

    def to_dict(self):
        return {
            "task": self.task,
            "mode": self.mode,
            "segmentation": {
                "tp": self.tp, "fp": self.fp, "fn": self.fn,
                "sen": self.sen, "pp": self.pp, "f1": self.f1,
            },
            "classification": {
                "per_class_auc": self.per_class_auc,
                "macro_auc": self.macro_auc,
            },
            "runtime_seconds": self.runtime_seconds,
            "parameter_count": self.parameter_count,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    @property
    def headline(self):
        return self.f1 if self.mode == "seg" else (self.macro_auc or 0.0)


REPORT_SCHEMA = {
    "task": str,
    "mode": str,
    "segmentation": {"tp": int, "fp": int, "fn": int, "sen": float, "pp": float, "f1": float},
    "classification": {"per_class_auc": list, "macro_auc": (float, type(None))},
    "runtime_seconds": float,
    "parameter_count": int,
}


def validate_report(d, _schema=None, _path=""):
    """Strictly validate a report dict against the published schema."""
    schema = REPORT_SCHEMA if _schema is None else _schema
    if not isinstance(d, dict):
        raise ConfigError(f"report{_path}: expected object")
    unknown = set(d) - set(schema)
    if unknown:
        raise ConfigError(f"report{_path}: unknown keys {sorted(unknown)}")
    for key, expect in schema.items():
        if key not in d:
            raise ConfigError(f"report{_path}: missing key {key!r}")
        value = d[key]
        if isinstance(expect, dict):
            validate_report(value, expect, f"{_path}.{key}")
        elif expect is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"report{_path}.{key}: expected number")
        elif not isinstance(value, expect):
            raise ConfigError(f"report{_path}.{key}: expected {expect}")
    return True


# ---------------------------------------------------------------------------
# evaluation loops

def _batched_forward(network, x, mode, batch_size=32):
    from .tensor import Tensor

    outs = []
    for s in range(0, len(x), batch_size):
        xb = Tensor(np.ascontiguousarray(x[s:s + batch_size]))
        outs.append(network.forward_for_mode(xb, mode, train=False).data)
    return np.concatenate(outs, axis=0)


def evaluate_segmentation(network, x, qrs_lists, fs, batch_size=32):
    """Aggregate TP/FP/FN over windows and derive SEN/PP/F1."""
    probs = _batched_forward(network, x, "seg", batch_size)
    tol = seg_tolerance_samples(fs)
    tp = fp = fn = 0
    for w in range(len(x)):
        preds = seg_predictions(probs[w], fs)
        a, b, c = qrs_match(preds, qrs_lists[w], tol)
        tp += a
        fp += b
        fn += c
    sen, pp, f1 = prf_from_counts(tp, fp, fn)
    return {"tp": tp, "fp": fp, "fn": fn, "sen": sen, "pp": pp, "f1": f1}


def evaluate_classification(network, x, y, batch_size=32):
    scores = _batched_forward(network, x, "cls", batch_size)
    per_class, macro = macro_auc(scores, y)
    return {"per_class_auc": per_class, "macro_auc": macro}
