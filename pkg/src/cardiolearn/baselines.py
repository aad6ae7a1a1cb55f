"""Scratch and finetune baselines for comparison against isolation training.

Scratch trains an independent model per task. Finetune carries one set of
shared weights through the sequence without any ownership bookkeeping
(task-exclusive adapters/heads/affine terms are kept per task), so
earlier tasks degrade as later ones overwrite shared weights and batch
statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .continual import scope_families
from .network import Network
from .training import (
    MetricsReport, bce_loss, evaluate_classification, evaluate_segmentation,
    lr_at, make_optimizer,
)


@dataclass
class BaselineResult:
    mode: str
    reports: list = field(default_factory=list)        # final eval per task
    post_training: list = field(default_factory=list)  # right after each task
    storage_bytes: int = 0


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def _train_full(model, spec, data, shuffle_seed):
    """Plain supervised training of every live parameter."""
    x, y = data.fold("train")
    rng = np.random.Generator(np.random.PCG64(shuffle_seed))
    cfg = spec.optim
    opt = make_optimizer([p for _, p in model.named_parameters()], cfg)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for idx in _batches(len(x), cfg.batch_size, rng):
            out = model.forward_for_mode(T.Tensor(x[idx]), spec.mode, train=True)
            loss = bce_loss(out, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(lr)


def _evaluate(model, spec, data, fold="test"):
    report = MetricsReport(task=spec.name, mode=spec.mode)
    if spec.mode == "seg":
        m = evaluate_segmentation(model, data.x[fold], data.qrs[fold], data.fs)
        report.tp, report.fp, report.fn = m["tp"], m["fp"], m["fn"]
        report.sen, report.pp, report.f1 = m["sen"], m["pp"], m["f1"]
    else:
        m = evaluate_classification(model, data.x[fold], data.y[fold])
        report.per_class_auc = m["per_class_auc"]
        report.macro_auc = m["macro_auc"]
    report.parameter_count = model.count_parameters(spec.mode, spec.leads, spec.n_classes)
    return report


def run_scratch(encoder_config, tasks_with_data, seed=0):
    """Independent model per task; storage grows with the task count."""
    result = BaselineResult(mode="scratch")
    for i, (spec, data) in enumerate(tasks_with_data):
        ss = np.random.SeedSequence([seed, i, 0])
        init_ss, shuffle_ss = ss.spawn(2)
        model = Network(encoder_config, rng=np.random.Generator(np.random.PCG64(init_ss)))
        model.install_adapter(model.new_adapter(
            spec.leads, np.random.Generator(np.random.PCG64(init_ss.spawn(1)[0]))))
        if spec.mode == "cls":
            model.install_head(model.new_head(
                spec.n_classes, np.random.Generator(np.random.PCG64(init_ss.spawn(1)[0]))))
        _train_full(model, spec, data, shuffle_ss)
        report = _evaluate(model, spec, data)
        result.post_training.append(report)
        result.reports.append(report)
        result.storage_bytes += 4 * model.count_parameters(spec.mode, spec.leads, spec.n_classes)
    return result


def _exclusive_names(model, mode):
    fams = scope_families(mode)
    names = []
    for name, p in model.shared_parameters():
        if not p.prunable and name.split(".", 1)[0] in fams:
            names.append(name)
    return names


def run_finetune(encoder_config, tasks_with_data, seed=0):
    """One shared backbone finetuned task after task, no isolation.

    Per task, a fresh adapter/head and exclusive affine terms are trained
    together with all shared weights; the exclusive values are stored so
    each task can be re-evaluated later against the drifted shared
    weights and final batch statistics.
    """
    result = BaselineResult(mode="finetune")
    init_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7])))
    model = Network(encoder_config, rng=init_rng)
    stored = []
    for i, (spec, data) in enumerate(tasks_with_data):
        task_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, i, 1])))
        model.install_adapter(model.new_adapter(spec.leads, task_rng))
        if spec.mode == "cls":
            model.install_head(model.new_head(spec.n_classes, task_rng))
        else:
            model.head = None
        for name in _exclusive_names(model, spec.mode):
            p = _param(model, name)
            p.data = np.ones_like(p.data) if name.endswith(".gamma") else np.zeros_like(p.data)
        _train_full(model, spec, data, np.random.SeedSequence([seed, i, 2]))
        excl = {name: _param(model, name).data.copy() for name in _exclusive_names(model, spec.mode)}
        for name, p in model.adapter.named_parameters("adapter."):
            excl[name] = p.data.copy()
        if spec.mode == "cls":
            for name, p in model.head.named_parameters("head."):
                excl[name] = p.data.copy()
        stored.append(excl)
        result.post_training.append(_evaluate(model, spec, data))

    for (spec, data), excl in zip(tasks_with_data, stored):
        dummy = np.random.Generator(np.random.PCG64(0))
        model.install_adapter(model.new_adapter(spec.leads, dummy))
        if spec.mode == "cls":
            model.install_head(model.new_head(spec.n_classes, dummy))
        else:
            model.head = None
        for name, value in excl.items():
            _param(model, name).data = value.copy()
        result.reports.append(_evaluate(model, spec, data))
    result.storage_bytes = 4 * max(
        model.count_parameters(s.mode, s.leads, s.n_classes) for s, _ in tasks_with_data
    )
    return result


def _param(model, name):
    for n, p in model.named_parameters():
        if n == name:
            return p
    raise KeyError(name)
