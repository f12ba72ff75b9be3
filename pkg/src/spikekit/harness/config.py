"""Run configuration: one structured text file plus command-line overrides."""
from __future__ import annotations

import copy
import datetime as _dt
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

import yaml

from ..architecture import ModelConfig, config_from_name
from ..errors import ConfigError
from .data import DatasetSpec

TASKS = ("train", "pretrain", "finetune", "eval", "profile", "reconstruct", "sweep")

# desk-scale geometry used when a model is picked by name
DESK_MODEL = dict(img_size=32, patch_size=4, num_classes=3)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 12
    lr: float = 2e-3
    warmup_epochs: float = 2
    weight_decay: float = 0.05
    layer_decay: float | None = None
    target_acc: float | None = None


@dataclass
class RunConfig:
    task: str = "train"
    model: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    time_steps: list = field(default_factory=lambda: [4])
    seed: int = 0
    mask_ratio: float = 0.75
    out: str = "runs"
    checkpoint: str | None = None
    sweep_axis: str | None = None
    sweep_values: list = field(default_factory=list)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        # validate eagerly so malformed configs fail before any work starts
        self.model_config()
        self.dataset_spec()
        self.train_config()
        if not self.time_steps or any(int(t) < 1 for t in self.time_steps):
            raise ConfigError(f"time steps must be positive integers, got {self.time_steps}")
        self.time_steps = [int(t) for t in self.time_steps]

    def model_config(self) -> ModelConfig:
        m = dict(self.model)
        name = m.pop("name", None)
        try:
            if name:
                kw = dict(DESK_MODEL)
                kw.update(m)
                return config_from_name(name, **kw)
            return ModelConfig(**m)
        except TypeError as e:
            raise ConfigError(f"bad model config: {e}") from e

    def dataset_spec(self) -> DatasetSpec:
        try:
            return DatasetSpec(**self.data)
        except TypeError as e:
            raise ConfigError(f"bad data config: {e}") from e

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**self.train)
        except TypeError as e:
            raise ConfigError(f"bad train config: {e}") from e

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:8]

    def with_updates(self, **kw) -> "RunConfig":
        d = copy.deepcopy(self.to_dict())
        for k, v in kw.items():
            if k in ("model", "data", "train"):
                d[k].update(v)
            else:
                d[k] = v
        return RunConfig(**d)


def parse_config(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    names = {f.name for f in fields(RunConfig)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return RunConfig(**d)


def load_config(path) -> RunConfig:
    """Read YAML (or JSON, which YAML parses too)."""
    try:
        with open(path) as f:
            d = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed config {path}: {e}") from e
    return parse_config(d or {})


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)


def make_run_dir(cfg: RunConfig, now: _dt.datetime | None = None) -> str:
    """``<out>/<task>-<YYYYmmdd-HHMMSS>-<config hash>``, created with a config snapshot."""
    now = now or _dt.datetime.now()
    path = os.path.join(cfg.out, f"{cfg.task}-{now:%Y%m%d-%H%M%S}-{cfg.digest()}")
    os.makedirs(path, exist_ok=True)
    save_config(cfg, os.path.join(path, "config.yaml"))
    return path
