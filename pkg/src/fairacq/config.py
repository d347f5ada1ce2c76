"""Experiment configuration: YAML schema, defaults and validation.

Schema (``schema_version: 1``)::

    schema_version: 1
    dataset:
      name: synthetic | adult | cached
      path: <file or directory>        # required for adult and cached
      synthetic: {n, d_noise, leak_strength, proxy_strengths}
    gamma_grid: [0.0, 0.5, 0.9]        # each in [0, 1]
    reward_kinds: [CE, GNL1]
    folds: [0, 1]                      # subset of range(n_folds)
    n_folds: 8
    seed: 0
    learning_rate: 0.001
    pretrain: {iterations, batch_size, half_full_half_missing, eval_every, val_size}
    joint: {iterations, n_step, n_agents, epsilon_start, epsilon_end,
            epsilon_anneal_iters, target_sync_every, buffer_size,
            clf_batch_size, checkpoint_every, eval_every, val_size}
    output_dir: out
    workers: 1

Every key is optional except ``dataset.name`` (and ``dataset.path`` where
required). Unknown keys are errors.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .env import LOSS_KINDS
from .trainer import JointConfig, PretrainConfig

SCHEMA_VERSION = 1
DEFAULT_GAMMA_GRID = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99]


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class SyntheticSpec:
    n: int = 5000
    d_noise: int = 8
    leak_strength: float = 1.0
    proxy_strengths: list = field(default_factory=list)


@dataclass
class DatasetSpec:
    name: str = "synthetic"
    path: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    gamma_grid: list = field(default_factory=lambda: list(DEFAULT_GAMMA_GRID))
    reward_kinds: list = field(default_factory=lambda: ["CE", "GNL1"])
    folds: list = field(default_factory=lambda: list(range(8)))
    n_folds: int = 8
    seed: int = 0
    learning_rate: float = 1e-3
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    joint: JointConfig = field(default_factory=JointConfig)
    output_dir: str = "out"
    workers: int = 1
    schema_version: int = SCHEMA_VERSION

    def to_dict(self):
        return asdict(self)


def _check_keys(section, data, allowed, errors):
    for k in data:
        if k not in allowed:
            errors.append(f"{section}{k}: unknown key")


def _sub(cls, section, data, errors):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        errors.append(f"{section.rstrip('.')}: expected a mapping")
        return cls()
    names = {f.name for f in fields(cls)}
    _check_keys(section, data, names, errors)
    kwargs = {k: v for k, v in data.items() if k in names}
    defaults = cls.__dataclass_fields__
    for k, v in list(kwargs.items()):
        default = defaults[k].default
        if isinstance(default, bool) and not isinstance(v, bool):
            errors.append(f"{section}{k}: expected a boolean")
        elif isinstance(default, int) and not isinstance(default, bool) and (isinstance(v, bool) or not isinstance(v, int)):
            errors.append(f"{section}{k}: expected an integer")
        elif isinstance(default, float) and (isinstance(v, bool) or not isinstance(v, (int, float))):
            errors.append(f"{section}{k}: expected a number")
        else:
            continue
        del kwargs[k]  # reported once; keep the default for further checks
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append(f"{section.rstrip('.')}: {exc}")
        return cls()


def parse_config(data, base_dir=None):
    """Build an :class:`ExperimentConfig` from a mapping, collecting every error."""
    errors = []
    if not isinstance(data, dict):
        raise ConfigError(["top level: expected a mapping"])
    top = {f.name for f in fields(ExperimentConfig)}
    _check_keys("", data, top, errors)
    cfg = ExperimentConfig()
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        errors.append(f"schema_version: unsupported version {version!r}")

    ds = data.get("dataset")
    if not isinstance(ds, dict):
        errors.append("dataset: required mapping with at least 'name'")
        ds = {}
    _check_keys("dataset.", ds, {"name", "path", "synthetic"}, errors)
    name = ds.get("name")
    if name not in ("synthetic", "adult", "cached"):
        errors.append(f"dataset.name: expected synthetic, adult or cached, got {name!r}")
    path = ds.get("path")
    if name in ("adult", "cached"):
        if not path:
            errors.append(f"dataset.path: required for dataset {name!r}")
        else:
            p = Path(path)
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            if not p.exists():
                errors.append(f"dataset.path: {path} does not exist")
            path = str(p)
    syn = _sub(SyntheticSpec, "dataset.synthetic.", ds.get("synthetic"), errors)
    if not isinstance(syn.proxy_strengths, list):
        errors.append("dataset.synthetic.proxy_strengths: expected a list")
    cfg.dataset = DatasetSpec(name or "synthetic", path, syn)

    grid = data.get("gamma_grid", cfg.gamma_grid)
    if not isinstance(grid, list) or not grid:
        errors.append("gamma_grid: expected a nonempty list")
    else:
        for k, g in enumerate(grid):
            if isinstance(g, bool) or not isinstance(g, (int, float)) or not 0.0 <= g <= 1.0:
                errors.append(f"gamma_grid[{k}]: {g!r} is not in [0, 1]")
        cfg.gamma_grid = [float(g) for g in grid if isinstance(g, (int, float))]
    kinds = data.get("reward_kinds", cfg.reward_kinds)
    if not isinstance(kinds, list) or not kinds:
        errors.append("reward_kinds: expected a nonempty list")
    else:
        for k in kinds:
            if k not in LOSS_KINDS:
                errors.append(f"reward_kinds: unknown kind {k!r}")
        cfg.reward_kinds = list(kinds)

    for key in ("n_folds", "seed", "workers"):
        if key in data:
            v = data[key]
            if isinstance(v, bool) or not isinstance(v, int):
                errors.append(f"{key}: expected an integer")
            else:
                setattr(cfg, key, v)
    if cfg.n_folds < 2:
        errors.append("n_folds: must be at least 2")
    if cfg.workers < 1:
        errors.append("workers: must be at least 1")
    folds = data.get("folds", list(range(cfg.n_folds)))
    if not isinstance(folds, list) or not folds or not all(isinstance(f, int) and 0 <= f < cfg.n_folds for f in folds):
        errors.append(f"folds: expected a nonempty list of fold ids in [0, {cfg.n_folds})")
    else:
        cfg.folds = list(folds)
    if "learning_rate" in data:
        lr = data["learning_rate"]
        if isinstance(lr, bool) or not isinstance(lr, (int, float)) or lr <= 0:
            errors.append("learning_rate: expected a positive number")
        else:
            cfg.learning_rate = float(lr)
    if "output_dir" in data:
        if not isinstance(data["output_dir"], str):
            errors.append("output_dir: expected a string")
        else:
            cfg.output_dir = data["output_dir"]
    cfg.pretrain = _sub(PretrainConfig, "pretrain.", data.get("pretrain"), errors)
    cfg.joint = _sub(JointConfig, "joint.", data.get("joint"), errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def validate_config(path):
    """Load and validate a YAML config. Raises :class:`ConfigError` listing all problems."""
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file {path} does not exist"])
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"config file is not valid YAML: {exc}"]) from None
    return parse_config(data, base_dir=path.parent)
