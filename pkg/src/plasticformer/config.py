"""Run configuration: per-task defaults, layered YAML files, and dotted
``--set`` overrides.

A run is (task, rule, seed) plus the model/task/train config tree. Model
input and output widths are derived from the task encodings and cannot be
overridden directly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, asdict, fields

import yaml

from .diagnostics import config_hash  # noqa: F401  (re-export; records own it)
from .model import ConfigError, ModelConfig, RULES
from .meta_train import TrainConfig
from .tasks import (ClassificationConfig, CopyingConfig, CueRewardConfig,
                    RegressionConfig, TaskConfig, TASK_KINDS)

# compact configuration for the low-dimensional tasks, wider model for
# classification embeddings
_MODEL_DEFAULTS = {
    "copying": dict(d_model=128, d_ff=256, n_heads=4, n_layers=2),
    "cue_reward": dict(d_model=128, d_ff=256, n_heads=4, n_layers=2),
    "regression": dict(d_model=128, d_ff=256, n_heads=4, n_layers=2),
    "classification": dict(d_model=256, d_ff=512, n_heads=4, n_layers=2),
}

_TRAIN_DEFAULTS = {
    "copying": dict(epochs=2, episodes_per_epoch=50, weight_decay=1e-4,
                    val_every=None, val_episodes=20),
    "cue_reward": dict(epochs=4, episodes_per_epoch=100, weight_decay=1e-4,
                       val_every=None, val_episodes=20),
    "regression": dict(epochs=5, episodes_per_epoch=150, weight_decay=1e-4,
                       val_every=20, val_episodes=10),
    "classification": dict(epochs=5, episodes_per_epoch=80, weight_decay=5e-4,
                           val_every=50, val_episodes=50),
}


@dataclass
class RunConfig:
    task: str
    rule: str
    seed: int
    model: ModelConfig
    tasks: TaskConfig
    train: TrainConfig
    overrides: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = {
            "task": self.task,
            "rule": self.rule,
            "seed": self.seed,
            "model": asdict(self.model),
            "tasks": asdict(self.tasks),
            "train": asdict(self.train),
            "overrides": list(self.overrides),
        }
        d["model"]["plastic_layers"] = list(self.model.plastic_layers)
        return d


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config_files(paths) -> dict:
    merged: dict = {}
    for path in paths:
        with open(path) as fh:
            layer = yaml.safe_load(fh) or {}
        if not isinstance(layer, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        merged = _deep_merge(merged, layer)
    return merged


def apply_set_overrides(tree: dict, sets) -> dict:
    """Apply ``a.b.c=value`` overrides; the dotted path must already exist."""
    tree = copy.deepcopy(tree)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"--set path {key!r}: no section {part!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"--set path {key!r}: unknown key {parts[-1]!r}")
        node[parts[-1]] = value
    return tree


def _dataclass_from(cls, data: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {where} config keys: {sorted(unknown)}")
    return cls(**data)


def build_run_config(task: str, rule: str, seed: int,
                     file_tree: dict | None = None,
                     sets=()) -> RunConfig:
    """Defaults for the task, then config-file layers, then --set overrides."""
    if task not in TASK_KINDS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASK_KINDS}")
    if rule not in RULES:
        raise ConfigError(f"unknown rule {rule!r}; expected one of {RULES}")

    tree: dict = {
        "model": dict(_MODEL_DEFAULTS[task]),
        "train": dict(_TRAIN_DEFAULTS[task]),
        "tasks": {},
    }
    if file_tree:
        tree = _deep_merge(tree, file_tree)
    tree = apply_set_overrides(tree, sets)

    task_sections = tree.get("tasks", {})
    task_cfg = TaskConfig(
        copying=_dataclass_from(CopyingConfig,
                                task_sections.get("copying", {}), "copying"),
        cue_reward=_dataclass_from(CueRewardConfig,
                                   task_sections.get("cue_reward", {}),
                                   "cue_reward"),
        regression=_dataclass_from(RegressionConfig,
                                   task_sections.get("regression", {}),
                                   "regression"),
        classification=_dataclass_from(ClassificationConfig,
                                       task_sections.get("classification", {}),
                                       "classification"),
    )
    active = task_cfg.for_task(task)

    model_section = dict(tree.get("model", {}))
    for key in ("input_dim", "output_dim"):
        if key in model_section:
            raise ConfigError(
                f"model.{key} is derived from the task encoding and cannot "
                "be set directly")
    if "plastic_layers" in model_section and \
            model_section["plastic_layers"] is not None:
        model_section["plastic_layers"] = tuple(model_section["plastic_layers"])
    model_cfg = _dataclass_from(
        ModelConfig,
        dict(model_section, rule=rule,
             input_dim=active.input_dim, output_dim=active.output_dim),
        "model")

    train_cfg = _dataclass_from(TrainConfig, tree.get("train", {}), "train")
    train_cfg.validate()

    return RunConfig(task=task, rule=rule, seed=seed, model=model_cfg,
                     tasks=task_cfg, train=train_cfg,
                     overrides=tuple(sets))


# named presets for the two ablation studies
ABLATIONS = {
    "no_internal_target": {
        "task": "copying", "rule": "gradient",
        "sets": ("model.aux_dim=0",),
    },
    "frozen_hebbian": {
        "task": "classification", "rule": "hebbian",
        "sets": ("model.eta0=0.0",),
    },
}
