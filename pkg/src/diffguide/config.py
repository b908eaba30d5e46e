"""Run configuration: YAML task files, dotted-path overrides, task defaults.

Each task ships pinned defaults (step counts, two step sizes, scheduler,
clipping, augmentation) so runs are reproducible without a config file;
anything can be overridden from YAML or ``--set key=value`` flags.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .engine import OptimizerConfig
from .objectives import AugmentationConfig, DistanceWeights


class ConfigError(ValueError):
    pass


TASKS = ("disagreement", "neuron", "uvce")


@dataclass
class UVCEConfig:
    source_class: str = ""
    target_class: str = ""
    image_path: Optional[str] = None
    image_seed: int = 0
    inject_fraction: float = 0.8
    weights: DistanceWeights = field(default_factory=DistanceWeights)
    inversion_gate: float = 0.1
    inversion_inner_steps: int = 10
    inversion_tol: float = 1e-5
    inversion_lr: float = 1e-2
    inversion_w: float = 0.0  # conditional-only trajectory


@dataclass
class NeuronConfig:
    index: int = -1  # -1 = the toy stack's planted detector
    sign: str = "both"  # maximize | minimize | both
    classname: str = ""
    tracked_class: Optional[str] = None


@dataclass
class TaskConfig:
    task: str = "disagreement"
    adapters: str = "toy"
    stack_seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    classname: str = ""
    directions: str = "both"  # disagreement: both | f_up | g_up
    output_dir: str = "runs/out"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    uvce: UVCEConfig = field(default_factory=UVCEConfig)
    retrieval_endpoint: Optional[str] = None

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.adapters not in ("toy",):
            raise ConfigError(f"unknown adapter selection {self.adapters!r}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.task in ("disagreement",) and not self.classname:
            raise ConfigError("disagreement task needs a class name")
        if self.task == "neuron" and not self.neuron.classname:
            raise ConfigError("neuron task needs a prompt class name")
        if self.task == "neuron" and self.neuron.sign not in ("maximize", "minimize", "both"):
            raise ConfigError(f"bad neuron sign {self.neuron.sign!r}")
        if self.task == "uvce":
            if not self.uvce.source_class or not self.uvce.target_class:
                raise ConfigError("uvce task needs source and target class names")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def disagreement_defaults() -> OptimizerConfig:
    return OptimizerConfig(
        steps=15,
        lr_cond=0.025,
        lr_latent=0.00025,
        scheduler="cosine",
        grad_clip=0.05,
        ddim_steps=25,
        guidance_w=3.0,
        resolution=32,
        augmentation=AugmentationConfig(num_cutouts=16, noise_sigma=0.05),
        checkpointing=False,
    )


def neuron_defaults() -> OptimizerConfig:
    return OptimizerConfig(
        steps=20,
        lr_cond=0.005,
        lr_latent=0.0005,
        scheduler="none",
        grad_clip=None,
        ddim_steps=20,
        guidance_w=3.0,
        resolution=32,
        augmentation=AugmentationConfig(num_cutouts=16, noise_sigma=0.005),
        checkpointing=False,
    )


def uvce_defaults() -> OptimizerConfig:
    return OptimizerConfig(
        steps=20,
        lr_cond=0.01,
        lr_latent=0.001,
        scheduler="none",
        grad_clip=None,
        ddim_steps=20,
        guidance_w=3.0,
        resolution=32,
        augmentation=AugmentationConfig(num_cutouts=16, noise_sigma=0.005),
        checkpointing=False,
    )


_TASK_OPTIMIZER_DEFAULTS = {
    "disagreement": disagreement_defaults,
    "neuron": neuron_defaults,
    "uvce": uvce_defaults,
}


def default_config(task: str) -> TaskConfig:
    if task not in _TASK_OPTIMIZER_DEFAULTS:
        raise ConfigError(f"unknown task {task!r}")
    return TaskConfig(task=task, optimizer=_TASK_OPTIMIZER_DEFAULTS[task]())


def _update_dataclass(obj: Any, data: dict, path: str = "") -> None:
    for key, value in data.items():
        if not hasattr(obj, key):
            raise ConfigError(f"unknown config key {path + key!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _update_dataclass(current, value, path=f"{path}{key}.")
        else:
            if key == "augmentation" and isinstance(value, dict):
                _update_dataclass(current, value, path=f"{path}{key}.")
                continue
            if key == "weights" and isinstance(value, dict):
                _update_dataclass(current, value, path=f"{path}{key}.")
                continue
            setattr(obj, key, _coerce_like(current, value, path + key))


def _coerce_like(current: Any, value: Any, path: str) -> Any:
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(current, int) and not isinstance(current, bool) and value is not None:
        return int(value)
    if isinstance(current, float) and value is not None:
        return float(value)
    if isinstance(current, tuple) and isinstance(value, (list, tuple)):
        return tuple(type(c)(v) for c, v in zip(current, value))
    return value


def load_config(path: Optional[str] = None, task: Optional[str] = None,
                overrides: Optional[list[str]] = None) -> TaskConfig:
    """Build a task config from defaults, an optional YAML file, and overrides.

    Overrides are ``dotted.path=value`` strings; values parse as YAML scalars
    so numbers and booleans come through typed.
    """
    data: dict = {}
    if path:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
    picked_task = task or data.get("task")
    if not picked_task:
        raise ConfigError("no task given (flag or config file)")
    cfg = default_config(str(picked_task))
    _update_dataclass(cfg, data)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node: dict = {}
        leaf = node
        parts = key.split(".")
        for part in parts[:-1]:
            leaf[part] = {}
            leaf = leaf[part]
        leaf[parts[-1]] = value
        _update_dataclass(cfg, node)
    cfg.validate()
    return cfg
