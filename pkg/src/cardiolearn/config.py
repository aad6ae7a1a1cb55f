"""Typed configuration objects and strict JSON parsing.

Config files are canonical JSON; unknown keys are rejected so that a
typo cannot silently change an experiment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .training import OptimConfig

DEFAULT_CHANNEL_CHOICES = (4, 8, 12, 18)


@dataclass
class EncoderConfig:
    base_channels: int = 8
    blocks_per_stage: int = 4
    se_reduction: int = 4

    def validate(self):
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.blocks_per_stage < 1:
            raise ConfigError(f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}")
        if self.se_reduction < 1:
            raise ConfigError(f"se_reduction must be >= 1, got {self.se_reduction}")
        return self


@dataclass
class VariantSpec:
    """One generator variant; ``label`` marks class membership for cls tasks."""

    rhythm: str = "regular"
    morphologies: tuple = ("normal_qrs",)
    label: int | None = None


@dataclass
class SynthSpec:
    n_records: int = 40
    fs: float = 250.0
    duration: float = 10.0
    heart_rate: tuple = (55.0, 95.0)
    snr_db: float | None = None
    variants: list = field(default_factory=lambda: [VariantSpec()])


@dataclass
class TaskConfig:
    name: str
    mode: str  # "seg" | "cls"
    leads: int = 1
    n_classes: int | None = None
    optim: OptimConfig = field(default_factory=OptimConfig)
    retrain_epochs: int = 2
    synth: SynthSpec | None = None
    path: str | None = None
    fractions: tuple = (0.7, 0.15, 0.15)

    def validate(self):
        if self.mode not in ("seg", "cls"):
            raise ConfigError(f"task {self.name!r}: mode must be seg or cls, got {self.mode!r}")
        if self.leads < 1:
            raise ConfigError(f"task {self.name!r}: leads must be >= 1")
        if self.mode == "cls" and (self.n_classes is None or self.n_classes < 1):
            raise ConfigError(f"task {self.name!r}: classification needs a positive n_classes")
        if (self.synth is None) == (self.path is None):
            raise ConfigError(f"task {self.name!r}: exactly one of synth/path data sources required")
        self.optim.validate()
        return self


@dataclass
class SparsityConfig:
    mode: str = "auto"  # "auto" | "fixed"
    fractions: list | None = None


@dataclass
class SequenceConfig:
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    tasks: list = field(default_factory=list)
    pick_mode: str = "all"  # "all" | "trained"
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    mask_warm_epochs: int = 1
    mask_lr: float = 0.05
    deterministic: bool = True

    def validate(self):
        self.encoder.validate()
        if not self.tasks:
            raise ConfigError("sequence needs at least one task")
        if self.pick_mode not in ("all", "trained"):
            raise ConfigError(f"pick_mode must be all or trained, got {self.pick_mode!r}")
        for t in self.tasks:
            t.validate()
        if self.sparsity.mode == "fixed":
            if self.sparsity.fractions is None or len(self.sparsity.fractions) != len(self.tasks):
                raise ConfigError("fixed sparsity requires one fraction per task")
        return self


# ---------------------------------------------------------------------------
# strict dict -> dataclass parsing

def _strict(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def encoder_from_dict(d, where="encoder"):
    _strict(d, {"base_channels", "blocks_per_stage", "se_reduction"}, where)
    return EncoderConfig(**d).validate()


def optim_from_dict(d, where="optim"):
    _strict(d, {"optimizer", "base_lr", "momentum", "beta1", "beta2", "batch_size", "epochs"}, where)
    cfg = OptimConfig(**d)
    cfg.validate()
    return cfg


def variant_from_dict(d, where="variant"):
    _strict(d, {"rhythm", "morphologies", "label"}, where)
    out = VariantSpec(
        rhythm=d.get("rhythm", "regular"),
        morphologies=tuple(d.get("morphologies", ("normal_qrs",))),
        label=d.get("label"),
    )
    return out


def synth_from_dict(d, where="synth"):
    _strict(d, {"n_records", "fs", "duration", "heart_rate", "snr_db", "variants"}, where)
    variants = [variant_from_dict(v, f"{where}.variants[{i}]")
                for i, v in enumerate(d.get("variants", [{}]))]
    return SynthSpec(
        n_records=d.get("n_records", 40),
        fs=float(d.get("fs", 250.0)),
        duration=float(d.get("duration", 10.0)),
        heart_rate=tuple(d.get("heart_rate", (55.0, 95.0))),
        snr_db=d.get("snr_db"),
        variants=variants,
    )


def task_from_dict(d, where="task"):
    _strict(d, {"name", "mode", "leads", "n_classes", "optim", "retrain_epochs",
                "synth", "path", "fractions"}, where)
    if "name" not in d or "mode" not in d:
        raise ConfigError(f"{where}: name and mode are required")
    cfg = TaskConfig(
        name=d["name"],
        mode=d["mode"],
        leads=int(d.get("leads", 1)),
        n_classes=d.get("n_classes"),
        optim=optim_from_dict(d.get("optim", {}), f"{where}.optim"),
        retrain_epochs=int(d.get("retrain_epochs", 2)),
        synth=synth_from_dict(d["synth"], f"{where}.synth") if "synth" in d else None,
        path=d.get("path"),
        fractions=tuple(d.get("fractions", (0.7, 0.15, 0.15))),
    )
    return cfg.validate()


def sparsity_from_dict(d, where="sparsity"):
    _strict(d, {"mode", "fractions"}, where)
    return SparsityConfig(mode=d.get("mode", "auto"), fractions=d.get("fractions"))


def sequence_from_dict(d):
    _strict(d, {"seed", "encoder", "tasks", "pick_mode", "sparsity",
                "mask_warm_epochs", "mask_lr", "deterministic"}, "sequence")
    cfg = SequenceConfig(
        seed=int(d.get("seed", 0)),
        encoder=encoder_from_dict(d.get("encoder", {})),
        tasks=[task_from_dict(t, f"tasks[{i}]") for i, t in enumerate(d.get("tasks", []))],
        pick_mode=d.get("pick_mode", "all"),
        sparsity=sparsity_from_dict(d.get("sparsity", {})),
        mask_warm_epochs=int(d.get("mask_warm_epochs", 1)),
        mask_lr=float(d.get("mask_lr", 0.05)),
        deterministic=bool(d.get("deterministic", True)),
    )
    return cfg.validate()


def load_sequence_config(path):
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return sequence_from_dict(raw)


def load_synth_config(path):
    """Standalone dataset-generation config: a synth spec plus metadata."""
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    _strict(raw, {"seed", "leads", "synth"}, "generate")
    if "synth" not in raw:
        raise ConfigError("generate config needs a 'synth' object")
    return {
        "seed": int(raw.get("seed", 0)),
        "leads": int(raw.get("leads", 1)),
        "synth": synth_from_dict(raw["synth"]),
    }


def canonical_json(obj):
    """Stable serialization used for manifests and report files."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"
