"""Binary checkpoint format for a trained continual-learning engine.

Layout: an 8-byte little-endian length prefix, a canonical-JSON header
(format version, encoder config, task list, sparsity schedule, and an
ordered array index), then the raw payload: parameter values as
little-endian float32, owner IDs as uint8, and pick masks as packed bits.
The round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import EncoderConfig
from .continual import ContinualEngine, SparsitySchedule, TaskRecord
from .errors import ConfigError

FORMAT_VERSION = 1


def _array_entries(engine):
    """Deterministic (name, kind, array) list covering the whole engine state."""
    entries = []
    for name, p in engine.model.prunable_parameters():
        entries.append((f"shared/{name}", "f32", p.data))
        entries.append((f"owner/{name}", "u8", p.owner))
    for rec in engine.records:
        t = rec.task_id
        for name in sorted(rec.pick_masks):
            entries.append((f"task{t}/mask/{name}", "bits", rec.pick_masks[name]))
        for name in sorted(rec.exclusives):
            entries.append((f"task{t}/excl/{name}", "f32", rec.exclusives[name]))
        for name in sorted(rec.bn_stats):
            mean, var = rec.bn_stats[name]
            entries.append((f"task{t}/bnmean/{name}", "f32", mean))
            entries.append((f"task{t}/bnvar/{name}", "f32", var))
    return entries


def _encode(kind, arr):
    if kind == "f32":
        return np.ascontiguousarray(arr, dtype="<f4").tobytes()
    if kind == "u8":
        return np.ascontiguousarray(arr, dtype=np.uint8).tobytes()
    if kind == "bits":
        return np.packbits(np.ascontiguousarray(arr, dtype=bool).reshape(-1)).tobytes()
    raise ConfigError(f"unknown array kind {kind!r}")


def _decode(kind, raw, shape):
    size = int(np.prod(shape)) if shape else 1
    if kind == "f32":
        return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if kind == "u8":
        return np.frombuffer(raw, dtype=np.uint8).reshape(shape).copy()
    if kind == "bits":
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=size)
        return bits.astype(bool).reshape(shape)
    raise ConfigError(f"unknown array kind {kind!r}")


def _byte_length(kind, shape):
    size = int(np.prod(shape)) if shape else 1
    if kind == "f32":
        return 4 * size
    if kind == "u8":
        return size
    return (size + 7) // 8


def save_checkpoint(engine, path):
    entries = _array_entries(engine)
    header = {
        "format_version": FORMAT_VERSION,
        "encoder": {
            "base_channels": engine.encoder_config.base_channels,
            "blocks_per_stage": engine.encoder_config.blocks_per_stage,
            "se_reduction": engine.encoder_config.se_reduction,
        },
        "seed": engine.seed,
        "pick_mode": engine.pick_mode,
        "mask_warm_epochs": engine.mask_warm_epochs,
        "mask_lr": engine.mask_lr,
        "deterministic": engine.deterministic,
        "planned_modes": engine.planned_modes,
        "sparsity": {"mode": engine.schedule.mode, "fractions": engine.schedule.fractions},
        "tasks": [
            {
                "task_id": r.task_id, "name": r.name, "mode": r.mode,
                "leads": r.leads, "n_classes": r.n_classes,
                "window_len": r.window_len, "fs": r.fs,
                "fingerprint": r.fingerprint, "probe_seed": r.probe_seed,
                "log": r.log,
            }
            for r in engine.records
        ],
        "arrays": [
            {"name": name, "kind": kind, "shape": list(arr.shape)}
            for name, kind, arr in entries
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, kind, arr in entries:
            f.write(_encode(kind, arr))


def load_checkpoint(path):
    with open(path, "rb") as f:
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode())
        if header.get("format_version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {header.get('format_version')}")
        arrays = {}
        for entry in header["arrays"]:
            raw = f.read(_byte_length(entry["kind"], entry["shape"]))
            arrays[entry["name"]] = _decode(entry["kind"], raw, tuple(entry["shape"]))

    enc = EncoderConfig(**header["encoder"]).validate()
    sp = header["sparsity"]
    engine = ContinualEngine(
        enc, header["planned_modes"], seed=header["seed"],
        pick_mode=header["pick_mode"],
        sparsity=SparsitySchedule(header["planned_modes"], sp["mode"], sp["fractions"]),
        mask_warm_epochs=header["mask_warm_epochs"], mask_lr=header["mask_lr"],
        deterministic=header["deterministic"],
    )
    for name, p in engine.model.prunable_parameters():
        p.data = arrays[f"shared/{name}"].astype(engine.model.dtype)
        p.owner[...] = arrays[f"owner/{name}"]
    for t in header["tasks"]:
        rec = TaskRecord(
            task_id=t["task_id"], name=t["name"], mode=t["mode"], leads=t["leads"],
            n_classes=t["n_classes"], window_len=t["window_len"], fs=t["fs"],
            fingerprint=t["fingerprint"], probe_seed=t["probe_seed"], log=t["log"],
            complete=True,
        )
        prefix = f"task{t['task_id']}/"
        for name, arr in arrays.items():
            if name.startswith(prefix + "mask/"):
                rec.pick_masks[name[len(prefix) + 5:]] = arr
            elif name.startswith(prefix + "excl/"):
                rec.exclusives[name[len(prefix) + 5:]] = arr
        bn_names = {
            name[len(prefix) + 7:] for name in arrays if name.startswith(prefix + "bnmean/")
        }
        for bn in sorted(bn_names):
            rec.bn_stats[bn] = (arrays[f"{prefix}bnmean/{bn}"], arrays[f"{prefix}bnvar/{bn}"])
        engine.records.append(rec)
    return engine
