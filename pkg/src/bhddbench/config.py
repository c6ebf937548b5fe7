"""Run configuration: defaults, JSON config files and command-line overrides.

Precedence is command line > config file > defaults.  Unknown keys are
rejected wherever they appear, including inside per-model overrides.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import DATA_ROOT_ENV
from .models import ALL_KINDS, ModelKind, ModelSpec, default_spec


class ConfigError(ValueError):
    pass


SCHEDULES = ("onecycle", "exponential")
DTYPES = ("float32", "float64")
# keys accepted inside a per-model override block
OVERRIDE_KEYS = {"layers", "hidden_dims", "dropout", "activation_overrides", "options", "schedule"}


@dataclass
class RunConfig:
    model: str = "CNN"
    models: list[str] = field(default_factory=lambda: [k.value for k in ALL_KINDS])
    epochs: int = 5
    batch_size: int = 128
    eval_batch_size: int = 1000
    seed: int = 42
    dtype: str = "float32"
    # optimiser
    lr: float = 3e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    # schedule
    schedule: str = "onecycle"
    max_lr: float = 5e-4
    pct_start: float = 0.3
    div_initial: float = 25.0
    div_final: float = 1e4
    gamma: float = 0.96
    transformer_warmup_epochs: int = 5
    # early stopping
    patience: int = 10
    min_delta: float = 1e-4
    # data
    data_root: str | None = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_subset: int = 6000
    test_subset: int = 1000
    val_size: int = -1  # -1: one twelfth of the training file (5,000 of 60,000)
    val_subset: int = 1000  # 0 = keep the whole hold-out
    # output
    out_dir: str = "runs"
    overrides: dict[str, dict[str, Any]] = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        for name in [self.model, *self.models]:
            try:
                ModelKind.parse(name)
            except ValueError as e:
                raise ConfigError(str(e)) from None
        need(self.models, "models must not be empty")
        need(self.epochs >= 0, "epochs must be >= 0")
        need(self.batch_size >= 1 and self.eval_batch_size >= 1, "batch sizes must be >= 1")
        need(self.dtype in DTYPES, f"dtype must be one of {DTYPES}")
        need(self.lr > 0 and self.max_lr > 0, "learning rates must be positive")
        need(self.weight_decay >= 0, "weight_decay must be >= 0")
        need(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "betas must lie in [0, 1)")
        need(self.adam_eps > 0, "adam_eps must be positive")
        need(self.clip_norm > 0, "clip_norm must be positive")
        need(self.schedule in SCHEDULES, f"schedule must be one of {SCHEDULES}")
        need(0 < self.pct_start <= 1, "pct_start must lie in (0, 1]")
        need(self.div_initial > 0 and self.div_final > 0, "div factors must be positive")
        need(0 < self.gamma <= 1, "gamma must lie in (0, 1]")
        need(self.transformer_warmup_epochs >= 0, "transformer_warmup_epochs must be >= 0")
        need(self.patience >= 1 and self.min_delta >= 0, "patience >= 1 and min_delta >= 0 required")
        need(min(self.train_subset, self.val_subset, self.test_subset) >= 0, "subset sizes must be >= 0 (0 = full)")
        need(self.val_size >= -1, "val_size must be >= 0, or -1 for automatic")
        need(isinstance(self.overrides, dict), "overrides must map model names to objects")
        for name, block in self.overrides.items():
            try:
                ModelKind.parse(name)
            except ValueError as e:
                raise ConfigError(f"overrides: {e}") from None
            if not isinstance(block, dict):
                raise ConfigError(f"overrides[{name!r}] must be an object")
            extra = set(block) - OVERRIDE_KEYS
            need(not extra, f"overrides[{name!r}]: unknown keys {sorted(extra)}")
            if "schedule" in block:
                need(block["schedule"] in SCHEDULES, f"overrides[{name!r}].schedule must be one of {SCHEDULES}")
            try:
                self.model_spec(name).validate()
            except (TypeError, ValueError) as e:
                raise ConfigError(f"overrides[{name!r}]: {e}") from None
        return self

    # -- derived views

    def model_spec(self, kind: ModelKind | str) -> ModelSpec:
        kind = ModelKind.parse(kind) if isinstance(kind, str) else kind
        spec = default_spec(kind)
        block = self._override_block(kind)
        changes = {k: copy.deepcopy(v) for k, v in block.items() if k != "schedule"}
        return spec.with_overrides(**changes) if changes else spec

    def schedule_for(self, kind: ModelKind | str) -> str:
        kind = ModelKind.parse(kind) if isinstance(kind, str) else kind
        return self._override_block(kind).get("schedule", self.schedule)

    def _override_block(self, kind: ModelKind) -> dict:
        for name, block in self.overrides.items():
            if ModelKind.parse(name) is kind:
                return block
        return {}

    def resolve_data_root(self) -> str | None:
        return self.data_root or os.environ.get(DATA_ROOT_ENV) or None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


FULL_PROFILE = dict(epochs=50, train_subset=0, val_subset=0, test_subset=0, val_size=5000)
FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def merge(base: dict, updates: dict, source: str) -> dict:
    extra = set(updates) - set(FIELDS)
    if extra:
        raise ConfigError(f"{source}: unknown keys {sorted(extra)}")
    out = dict(base)
    out.update(updates)
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def build_config(file: str | None = None, cli: dict | None = None, full: bool = False) -> RunConfig:
    """Layer defaults, the ``--full`` profile, a config file and CLI values, then validate."""
    values = RunConfig().to_dict()
    if full:
        values = merge(values, FULL_PROFILE, "full profile")
    if file:
        values = merge(values, load_config_file(file), str(file))
    if cli:
        values = merge(values, {k: v for k, v in cli.items() if v is not None}, "command line")
    try:
        cfg = RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    return cfg.validate()
