"""Parameter-isolation continual learning engine.

Every prunable scalar in a shared layer carries an owner label (0 = free,
otherwise the 1-based task index that claimed it). A task trains the free
scalars together with read-only "picked" weights of earlier tasks, prunes
its freshly trained pool by magnitude (releasing the small ones for
future tasks), retrains the kept weights at a fixed low rate, and freezes
an immutable record: pick mask, task-exclusive weights, batch-norm
statistics, and a bit-exact output fingerprint on a probe batch.
"""

from __future__ import annotations

import hashlib
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError
from .network import Network
from .training import (
    RETRAIN_LR, MetricsReport, bce_loss, evaluate_classification,
    evaluate_segmentation, lr_at, make_optimizer, SGD,
)

FREE = 0
PROBE_BATCH = 4


def scope_families(mode):
    """Shared-parameter families a task of this mode can read or claim."""
    if mode == "seg":
        return ("encoder", "seg")
    if mode == "cls":
        return ("encoder", "cls")
    raise ConfigError(f"unknown task mode {mode!r}")


@dataclass
class TaskRecord:
    """Immutable outcome of one completed task."""

    task_id: int
    name: str
    mode: str
    leads: int
    n_classes: int | None
    window_len: int
    fs: float
    pick_masks: dict = field(default_factory=dict)   # param name -> bool array
    exclusives: dict = field(default_factory=dict)   # param name -> float32 array
    bn_stats: dict = field(default_factory=dict)     # bn module -> (mean, var)
    fingerprint: str | None = None
    probe_seed: int = 0
    log: dict = field(default_factory=dict)
    complete: bool = False


class SparsitySchedule:
    """Release fractions per task, proportional to how many future tasks
    can reuse each parameter family."""

    def __init__(self, planned_modes, mode="auto", fractions=None):
        self.planned_modes = list(planned_modes)
        self.mode = mode
        if mode == "fixed":
            if fractions is None or len(fractions) != len(self.planned_modes):
                raise ConfigError("fixed sparsity schedule needs one fraction per task")
            for f in fractions:
                if not 0.0 <= f < 1.0:
                    raise ConfigError(f"release fraction {f} outside [0, 1)")
            self.fractions = list(fractions)
        elif mode == "auto":
            self.fractions = None
        else:
            raise ConfigError(f"unknown sparsity mode {mode!r}")

    def release_fraction(self, task_id, family):
        """Fraction of the task's trainable pool to release for later tasks."""
        if self.mode == "fixed":
            return self.fractions[task_id - 1]
        remaining = 0
        for mode in self.planned_modes[task_id - 1:]:
            if family == "encoder" or family in scope_families(mode):
                remaining += 1
        return 1.0 - 1.0 / max(remaining, 1)


def effective_weights(model, record):
    """Masked value view for a completed task.

    A scalar participates iff its owner is the task itself, or an earlier
    task whose pick-mask bit is set; everything else (free, later-owned,
    out-of-family) reads as exactly zero.
    """
    fams = scope_families(record.mode)
    view = {}
    for name, p in model.prunable_parameters():
        if p.family not in fams:
            view[name] = np.zeros_like(p.data)
            continue
        mask = p.owner == record.task_id
        pick = record.pick_masks.get(name)
        if pick is not None:
            mask = mask | pick
        view[name] = p.data * mask.astype(p.data.dtype)
    return view


class ContinualEngine:
    """Drives the train -> prune -> retrain lifecycle over a task sequence."""

    def __init__(self, encoder_config, planned_tasks, *, seed=0, pick_mode="all",
                 sparsity=None, mask_warm_epochs=1, mask_lr=0.05,
                 deterministic=True, dtype=np.float32):
        if pick_mode not in ("all", "trained"):
            raise ConfigError(f"unknown pick mode {pick_mode!r}")
        self.seed = seed
        self.pick_mode = pick_mode
        self.mask_warm_epochs = mask_warm_epochs
        self.mask_lr = mask_lr
        self.deterministic = deterministic
        self.planned_modes = [t if isinstance(t, str) else t.mode for t in planned_tasks]
        self.encoder_config = encoder_config
        self.schedule = sparsity or SparsitySchedule(self.planned_modes)
        root = np.random.SeedSequence(seed)
        self._init_ss, self._task_ss = root.spawn(2)
        self.model = Network(encoder_config,
                             rng=np.random.Generator(np.random.PCG64(self._init_ss)),
                             dtype=dtype)
        self.records: list[TaskRecord] = []
        self._task_rngs = {}

    # -- bookkeeping ----------------------------------------------------------

    def _rngs_for_task(self, task_id):
        """Three deterministic streams per task: init, shuffle, probe."""
        if task_id not in self._task_rngs:
            ss = np.random.SeedSequence([self.seed, task_id])
            self._task_rngs[task_id] = ss.spawn(3)
        return self._task_rngs[task_id]

    def scoped_prunable(self, mode):
        fams = scope_families(mode)
        return [(n, p) for n, p in self.model.prunable_parameters() if p.family in fams]

    def scoped_exclusive(self, mode):
        fams = scope_families(mode)
        out = []
        for name, p in self.model.exclusive_shared_parameters():
            top = name.split(".", 1)[0]
            if top == "encoder" and "encoder" in fams:
                out.append((name, p))
            elif top == "seg" and "seg" in fams:
                out.append((name, p))
            elif top == "cls" and "cls" in fams:
                out.append((name, p))
        return out

    def scoped_batchnorms(self, mode):
        fams = scope_families(mode)
        return [(n, bn) for n, bn in self.model.batchnorms()
                if n.split(".", 1)[0] in fams]

    def occupancy(self):
        """Per-layer scalar counts by owner (0 = free)."""
        table = {}
        for name, p in self.model.prunable_parameters():
            owners, counts = np.unique(p.owner, return_counts=True)
            table[name] = {int(o): int(c) for o, c in zip(owners, counts)}
        return table

    def check_partition(self):
        """Owners must partition every prunable layer (always true by
        construction of uint8 labels; asserted after each prune)."""
        occ = self.occupancy()
        for name, p in self.model.prunable_parameters():
            if sum(occ[name].values()) != p.data.size:
                raise AssertionError(f"ownership partition broken for {name}")
            if p.owner.max(initial=0) > max(len(self.planned_modes), len(self.records) + 1):
                raise AssertionError(f"owner id out of range in {name}")

    # -- task lifecycle ---------------------------------------------------------

    def start_task(self, spec, data):
        """Initialize masks, exclusive weights, and stats for a new task."""
        task_id = len(self.records) + 1
        if spec.mode == "cls" and not spec.n_classes:
            raise ConfigError(f"classification task {spec.name!r} needs n_classes")
        if task_id <= len(self.planned_modes):
            planned = self.planned_modes[task_id - 1]
            if planned != spec.mode:
                raise ConfigError(
                    f"task {task_id} mode {spec.mode!r} does not match planned {planned!r}"
                )
        init_ss, _, probe_ss = self._rngs_for_task(task_id)
        init_rng = np.random.Generator(np.random.PCG64(init_ss))

        # capacity: every in-scope shared layer must still have free scalars
        exhausted = [n for n, p in self.scoped_prunable(spec.mode)
                     if not np.any(p.owner == FREE)]
        if exhausted:
            raise CapacityError(
                f"no free capacity left in layer(s): {', '.join(exhausted)}",
                occupancy=self.occupancy(),
            )

        model = self.model
        model.install_adapter(model.new_adapter(spec.leads, init_rng))
        if spec.mode == "cls":
            model.install_head(model.new_head(spec.n_classes, init_rng))
        else:
            model.head = None

        # fresh task-exclusive copies inside shared layers
        for name, p in self.scoped_exclusive(spec.mode):
            if name.endswith((".gamma",)):
                p.data = np.ones_like(p.data)
            else:
                p.data = np.zeros_like(p.data)
            p.trainable = None
        for _, bn in self.scoped_batchnorms(spec.mode):
            bn.reset_stats()

        # masks and trainability over shared prunable weights
        score_params = []
        for name, p in self.scoped_prunable(spec.mode):
            free = p.owner == FREE
            preserved = (p.owner != FREE) & (p.owner < task_id)
            p.trainable = free.copy()
            p.view_mask = free.astype(p.data.dtype)
            if preserved.any():
                if self.pick_mode == "trained":
                    scores = T.Parameter(
                        np.full(p.data.shape, 0.05, dtype=p.data.dtype),
                        name=name + ".pickscore",
                    )
                    scores.trainable = preserved.copy()
                    p.mask_scores = scores
                    p.mask_domain = preserved.astype(p.data.dtype)
                    score_params.append(scores)
                else:
                    p.view_mask = p.view_mask + preserved.astype(p.data.dtype)
                    p.mask_scores = None
            else:
                p.mask_scores = None

        record = TaskRecord(
            task_id=task_id, name=spec.name, mode=spec.mode, leads=spec.leads,
            n_classes=spec.n_classes, window_len=data.x["train"].shape[2],
            fs=data.fs, probe_seed=int(probe_ss.generate_state(1)[0]),
        )
        self._score_params = score_params
        return record

    def _trainable_params(self, spec):
        params = [p for _, p in self.scoped_prunable(spec.mode)]
        params += [p for _, p in self.scoped_exclusive(spec.mode)]
        params += [p for _, p in self.model.adapter.named_parameters()]
        if spec.mode == "cls":
            params += [p for _, p in self.model.head.named_parameters()]
        return params

    def _loss(self, spec, xb, yb):
        out = self.model.forward_for_mode(T.Tensor(xb), spec.mode, train=True)
        return bce_loss(out, yb)

    def _freeze_pick_masks(self, spec, record):
        """Convert trained scores (or the all-picked fallback) to hard bits."""
        for name, p in self.scoped_prunable(spec.mode):
            preserved = (p.owner != FREE) & (p.owner < record.task_id)
            if not preserved.any():
                continue
            if self.pick_mode == "trained" and p.mask_scores is not None:
                bits = (p.mask_scores.data > 0) & preserved
                p.mask_scores = None
                p.mask_domain = None
            else:
                bits = preserved
            record.pick_masks[name] = bits
            p.view_mask = ((p.owner == FREE) | bits).astype(p.data.dtype)

    def train_task(self, spec, data, record):
        """Main training phase: free + picked weights forward, free-only updates."""
        x, y = data.fold("train")
        _, shuffle_ss, _ = self._rngs_for_task(record.task_id)
        rng = np.random.Generator(np.random.PCG64(shuffle_ss))
        cfg = spec.optim
        cfg.validate()
        opt = make_optimizer(self._trainable_params(spec), cfg)
        score_opt = SGD(self._score_params, momentum=0.0) if self._score_params else None
        lrs = []
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            lrs.append(lr)
            for idx in _batches(len(x), cfg.batch_size, rng):
                loss = self._loss(spec, x[idx], y[idx])
                opt.zero_grad()
                if score_opt:
                    score_opt.zero_grad()
                loss.backward()
                opt.step(lr)
                if score_opt:
                    score_opt.step(self.mask_lr)
            if score_opt and epoch + 1 >= self.mask_warm_epochs:
                self._freeze_pick_masks(spec, record)
                score_opt = None
                self._score_params = []
        if self._score_params or (self.pick_mode == "all" and not record.pick_masks):
            self._freeze_pick_masks(spec, record)
            self._score_params = []
        record.log["train_lrs"] = lrs
        record.log["optimizer"] = cfg.optimizer
        record.log["base_lr"] = cfg.base_lr
        record.log["lr_epoch0"] = lr_at(0, cfg)
        record.log["lr_epoch5"] = lr_at(5, cfg)
        return record

    def train_pick_mask(self, spec, data, record):
        """Standalone warm phase: returns the trained (or fallback) mask."""
        if self.pick_mode == "trained" and self._score_params:
            x, y = data.fold("train")
            _, shuffle_ss, _ = self._rngs_for_task(record.task_id)
            rng = np.random.Generator(np.random.PCG64(shuffle_ss))
            cfg = spec.optim
            opt = make_optimizer(self._trainable_params(spec), cfg)
            score_opt = SGD(self._score_params, momentum=0.0)
            for epoch in range(self.mask_warm_epochs):
                lr = lr_at(epoch, cfg)
                for idx in _batches(len(x), cfg.batch_size, rng):
                    loss = self._loss(spec, x[idx], y[idx])
                    opt.zero_grad()
                    score_opt.zero_grad()
                    loss.backward()
                    opt.step(lr)
                    score_opt.step(self.mask_lr)
        self._freeze_pick_masks(spec, record)
        self._score_params = []
        return dict(record.pick_masks)

    def prune(self, task_id, mode, fraction_overrides=None):
        """Release the smallest trained weights per layer; claim the rest.

        Returns the post-prune occupancy table. Layers with fewer than two
        free scalars are skipped with a warning.
        """
        for name, p in self.scoped_prunable(mode):
            free_idx = np.flatnonzero(p.owner.reshape(-1) == FREE)
            if fraction_overrides is not None:
                fraction = fraction_overrides
            else:
                fraction = self.schedule.release_fraction(task_id, p.family)
            if not 0.0 <= fraction < 1.0:
                raise ConfigError(f"release fraction {fraction} outside [0, 1)")
            if free_idx.size < 2:
                warnings.warn(f"prune: skipping layer {name} with {free_idx.size} free scalars")
                continue
            flat = p.data.reshape(-1)
            k = int(round(fraction * free_idx.size))
            order = np.argsort(np.abs(flat[free_idx]), kind="stable")
            released = free_idx[order[:k]]
            kept = free_idx[order[k:]]
            flat[released] = 0.0
            p.owner.reshape(-1)[kept] = task_id
        self.check_partition()
        return self.occupancy()

    def retrain(self, spec, data, record, lr=RETRAIN_LR, epochs=2):
        """Fine-tune only the scalars this task owns, at a fixed low rate."""
        x, y = data.fold("train")
        for name, p in self.scoped_prunable(spec.mode):
            owned = p.owner == record.task_id
            p.trainable = owned.copy()
            pick = record.pick_masks.get(name)
            mask = owned | pick if pick is not None else owned
            p.view_mask = mask.astype(p.data.dtype)
            p.mask_scores = None
        _, shuffle_ss, _ = self._rngs_for_task(record.task_id)
        rng = np.random.Generator(np.random.PCG64(shuffle_ss.spawn(1)[0]))
        cfg = spec.optim
        opt = make_optimizer(self._trainable_params(spec), cfg)
        for _ in range(epochs):
            for idx in _batches(len(x), cfg.batch_size, rng):
                loss = self._loss(spec, x[idx], y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
        record.log["retrain_lr"] = lr
        record.log["retrain_epochs"] = epochs
        return record

    def complete_task(self, spec, record):
        """Snapshot exclusives, BN stats, and the output fingerprint."""
        for name, p in self.scoped_exclusive(spec.mode):
            record.exclusives[name] = p.data.copy()
        for name, p in self.model.adapter.named_parameters("adapter."):
            record.exclusives[name] = p.data.copy()
        if spec.mode == "cls":
            for name, p in self.model.head.named_parameters("head."):
                record.exclusives[name] = p.data.copy()
        for name, bn in self.scoped_batchnorms(spec.mode):
            record.bn_stats[name] = (bn.running_mean.copy(), bn.running_var.copy())
        record.fingerprint = self.fingerprint(record)
        record.complete = True
        self.records.append(record)
        return record

    # -- inference over completed tasks -----------------------------------------

    def record_for(self, task_id):
        for r in self.records:
            if r.task_id == task_id:
                return r
        raise KeyError(f"no completed task with id {task_id}")

    def activate_task(self, record):
        """Install a completed task's view: masks, exclusives, BN statistics."""
        if not record.complete:
            raise ConfigError(f"task {record.task_id} is not complete")
        model = self.model
        fams = scope_families(record.mode)
        for name, p in model.prunable_parameters():
            p.mask_scores = None
            p.trainable = np.zeros(p.data.shape, dtype=bool)
            if p.family in fams:
                mask = p.owner == record.task_id
                pick = record.pick_masks.get(name)
                if pick is not None:
                    mask = mask | pick
                p.view_mask = mask.astype(p.data.dtype)
            else:
                p.view_mask = np.zeros(p.data.shape, dtype=p.data.dtype)
        dummy = np.random.Generator(np.random.PCG64(0))
        adapter = model.new_adapter(record.leads, dummy)
        model.install_adapter(adapter)
        if record.mode == "cls":
            model.install_head(model.new_head(record.n_classes, dummy))
        else:
            model.head = None
        for name, value in record.exclusives.items():
            target = _param_by_name(model, name)
            target.data = value.copy()
        for name, (mean, var) in record.bn_stats.items():
            bn = _module_by_name(model, name)
            bn.running_mean = mean.copy()
            bn.running_var = var.copy()

    def probe_batch(self, record):
        rng = np.random.Generator(np.random.PCG64(record.probe_seed))
        return rng.standard_normal(
            (PROBE_BATCH, record.leads, record.window_len)
        ).astype(self.model.dtype)

    def fingerprint(self, record):
        """SHA-256 of the eval-mode outputs on the task's probe batch."""
        x = T.Tensor(self.probe_batch(record))
        out = self.model.forward_for_mode(x, record.mode, train=False)
        h = hashlib.sha256()
        h.update(np.asarray(out.data.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(out.data.astype(np.float32)).tobytes())
        return h.hexdigest()

    def verify_fingerprint(self, task_id):
        record = self.record_for(task_id)
        self.activate_task(record)
        return self.fingerprint(record) == record.fingerprint

    # -- full sequence ------------------------------------------------------------

    def run_task(self, spec, data):
        record = self.start_task(spec, data)
        self.train_task(spec, data, record)
        self.prune(record.task_id, spec.mode)
        self.retrain(spec, data, record, lr=RETRAIN_LR, epochs=spec.retrain_epochs)
        return self.complete_task(spec, record)

    def run_sequence(self, tasks_with_data):
        """Train every task in order, then evaluate each with its own record."""
        for spec, data in tasks_with_data:
            self.run_task(spec, data)
        reports = []
        for (spec, data), record in zip(tasks_with_data, self.records):
            reports.append(self.evaluate(record, data))
        return self.records, reports

    def evaluate(self, record, data, fold="test"):
        start = time.perf_counter()
        self.activate_task(record)
        report = MetricsReport(task=record.name, mode=record.mode)
        if record.mode == "seg":
            m = evaluate_segmentation(self.model, data.x[fold], data.qrs[fold], data.fs)
            report.tp, report.fp, report.fn = m["tp"], m["fp"], m["fn"]
            report.sen, report.pp, report.f1 = m["sen"], m["pp"], m["f1"]
        else:
            m = evaluate_classification(self.model, data.x[fold], data.y[fold])
            report.per_class_auc = m["per_class_auc"]
            report.macro_auc = m["macro_auc"]
        report.parameter_count = self.model.count_parameters(
            record.mode, record.leads, record.n_classes
        )
        report.runtime_seconds = 0.0 if self.deterministic else time.perf_counter() - start
        return report


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def _param_by_name(model, name):
    for n, p in model.named_parameters():
        if n == name:
            return p
    raise KeyError(f"no parameter named {name}")


def _module_by_name(model, name):
    for n, m in model.named_modules():
        if n == name:
            return m
    raise KeyError(f"no module named {name}")
