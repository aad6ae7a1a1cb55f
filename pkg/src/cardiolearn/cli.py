"""Command-line interface.

Verbs: ``generate`` (synthetic CSV datasets), ``train-sequence`` (the
continual-learning lifecycle over a task list), ``eval`` (one task from a
checkpoint), ``baselines`` (scratch/finetune comparisons), and
``export-masks`` (per-layer ownership histograms as CSV).

Exit codes: 0 success, 2 configuration error, 3 capacity exhaustion,
4 I/O error. Set ``CARDIOLEARN_THREADS`` before the first import to cap
BLAS thread counts.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .baselines import run_finetune, run_scratch
from .checkpoint import load_checkpoint, save_checkpoint
from .config import canonical_json, load_sequence_config, load_synth_config
from .continual import ContinualEngine, SparsitySchedule
from .data import SynthConfig, load_csv, save_csv, synth_ecg, task_data_from_config, task_data_from_records
from .errors import CapacityError, ConfigError
from .training import validate_report


def _write(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


def cmd_generate(config_path, out_dir, seed=None):
    cfg = load_synth_config(config_path)
    if seed is not None:
        cfg["seed"] = seed
    spec = cfg["synth"]
    records = []
    class_counts = {}
    for vi, var in enumerate(spec.variants):
        labels = frozenset([var.label]) if var.label is not None else None
        sc = SynthConfig(
            fs=spec.fs, duration=spec.duration, leads=cfg["leads"],
            heart_rate=tuple(spec.heart_rate), rhythm=var.rhythm,
            morphologies=tuple(var.morphologies), snr_db=spec.snr_db,
            seed=int(np.random.SeedSequence([cfg["seed"], vi]).generate_state(1)[0]),
            n_records=max(1, spec.n_records // len(spec.variants)),
            labels=labels, patient_prefix=f"v{vi}_",
        )
        recs = synth_ecg(sc)
        records.extend(recs)
        if var.label is not None:
            class_counts[str(var.label)] = class_counts.get(str(var.label), 0) + len(recs)
    files = save_csv(records, out_dir)
    manifest = {
        "schema_version": 1,
        "seed": cfg["seed"],
        "fs": spec.fs,
        "leads": cfg["leads"],
        "record_count": len(records),
        "file_count": len(files),
        "class_balance": class_counts,
    }
    _write(os.path.join(out_dir, "manifest.json"), canonical_json(manifest))
    print(f"generated {len(records)} records in {out_dir}")
    return 0


def _occupancy_lines(occupancy):
    lines = ["layer".ljust(44) + "total".rjust(8) + "free".rjust(8) + "  owned-by"]
    for name, counts in occupancy.items():
        total = sum(counts.values())
        free = counts.get(0, 0)
        owned = " ".join(f"t{o}:{c}" for o, c in sorted(counts.items()) if o != 0)
        lines.append(name.ljust(44) + str(total).rjust(8) + str(free).rjust(8) + "  " + owned)
    return lines


def cmd_train_sequence(config_path, out_dir, seed=None, deterministic=None):
    cfg = load_sequence_config(config_path)
    if seed is not None:
        cfg.seed = seed
    if deterministic is not None:
        cfg.deterministic = deterministic
    tasks_with_data = [
        (spec, task_data_from_config(spec, cfg.seed, i + 1))
        for i, spec in enumerate(cfg.tasks)
    ]
    engine = ContinualEngine(
        cfg.encoder, [t.mode for t in cfg.tasks], seed=cfg.seed,
        pick_mode=cfg.pick_mode,
        sparsity=SparsitySchedule([t.mode for t in cfg.tasks],
                                  cfg.sparsity.mode, cfg.sparsity.fractions),
        mask_warm_epochs=cfg.mask_warm_epochs, mask_lr=cfg.mask_lr,
        deterministic=cfg.deterministic,
    )
    records, reports = engine.run_sequence(tasks_with_data)
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(engine, os.path.join(out_dir, "checkpoint.bin"))
    for record, report in zip(records, reports):
        d = report.to_dict()
        validate_report(d)
        _write(os.path.join(out_dir, f"report_task{record.task_id}_{record.name}.json"),
               canonical_json(d))
    occupancy = engine.occupancy()
    _write(os.path.join(out_dir, "occupancy.json"), canonical_json(
        {name: {str(k): v for k, v in c.items()} for name, c in occupancy.items()}
    ))
    _write(os.path.join(out_dir, "train_log.json"), canonical_json(
        {f"task{r.task_id}": r.log for r in records}
    ))
    for line in _occupancy_lines(occupancy):
        print(line)
    for record, report in zip(records, reports):
        print(f"task {record.task_id} ({record.name}, {record.mode}): "
              f"headline={report.headline:.4f}")
    return 0


def cmd_eval(checkpoint_path, task_id, data_path, out_path=None):
    engine = load_checkpoint(checkpoint_path)
    try:
        record = engine.record_for(task_id)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    fingerprint_ok = engine.verify_fingerprint(task_id)
    print(f"task {task_id} fingerprint: {'match' if fingerprint_ok else 'MISMATCH'}")
    records = load_csv(data_path)
    data = task_data_from_records(record.mode, records, seed=0,
                                  fractions=(0.0, 0.0, 1.0), n_classes=record.n_classes)
    report = engine.evaluate(record, data, fold="test")
    d = report.to_dict()
    validate_report(d)
    text = canonical_json(d)
    if out_path:
        _write(out_path, text)
    print(text, end="")
    return 0


def cmd_baselines(config_path, mode, out_dir, seed=None):
    cfg = load_sequence_config(config_path)
    if seed is not None:
        cfg.seed = seed
    tasks_with_data = [
        (spec, task_data_from_config(spec, cfg.seed, i + 1))
        for i, spec in enumerate(cfg.tasks)
    ]
    runner = run_scratch if mode == "scratch" else run_finetune
    result = runner(cfg.encoder, tasks_with_data, seed=cfg.seed)
    os.makedirs(out_dir, exist_ok=True)
    for i, report in enumerate(result.reports):
        d = report.to_dict()
        validate_report(d)
        _write(os.path.join(out_dir, f"report_task{i + 1}_{report.task}.json"),
               canonical_json(d))
    summary = {
        "mode": result.mode,
        "storage_bytes": result.storage_bytes,
        "post_training_headline": [r.headline for r in result.post_training],
        "final_headline": [r.headline for r in result.reports],
    }
    _write(os.path.join(out_dir, "summary.json"), canonical_json(summary))
    for i, report in enumerate(result.reports):
        print(f"task {i + 1} ({report.task}): headline={report.headline:.4f}")
    print(f"storage bytes: {result.storage_bytes}")
    return 0


def cmd_export_masks(checkpoint_path, out_path):
    engine = load_checkpoint(checkpoint_path)
    occupancy = engine.occupancy()
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "owner", "count"])
        for name, counts in occupancy.items():
            for owner, count in sorted(counts.items()):
                writer.writerow([name, owner, count])
    print(f"wrote ownership histogram to {out_path}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="cardiolearn",
                                description="ECG continual-learning toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic CSV dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)

    t = sub.add_parser("train-sequence", help="run the continual-learning lifecycle")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--deterministic", action="store_true", default=None)

    e = sub.add_parser("eval", help="evaluate one task from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task-id", type=int, required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None)

    b = sub.add_parser("baselines", help="scratch or finetune comparison runs")
    b.add_argument("--config", required=True)
    b.add_argument("--mode", choices=("scratch", "finetune"), required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int, default=None)

    m = sub.add_parser("export-masks", help="per-layer ownership histogram CSV")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--out", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            return cmd_generate(args.config, args.out, args.seed)
        if args.command == "train-sequence":
            return cmd_train_sequence(args.config, args.out, args.seed, args.deterministic)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.task_id, args.data, args.out)
        if args.command == "baselines":
            return cmd_baselines(args.config, args.mode, args.out, args.seed)
        if args.command == "export-masks":
            return cmd_export_masks(args.checkpoint, args.out)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        if exc.occupancy:
            for line in _occupancy_lines(exc.occupancy):
                print(line, file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
