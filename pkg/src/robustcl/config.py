"""Run configuration: JSON schema, validation, and construction helpers.

A run config fully determines an experiment: data generation, model size,
training and attack settings, selection settings, and the seed list. Every
validation error names the offending field so CLI failures are actionable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig
from .continual import CORESET_METHODS, CilConfig
from .coreset import SelectionConfig
from .datasets import Dataset, TaskDataset, gen_blobs, split_tasks


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field {field_name!r}: {message}")
        self.field = field_name


def _get(doc: dict, key: str, path: str, typ, required: bool = True, default=None):
    if key not in doc:
        if required:
            raise ConfigError(f"{path}{key}", "missing required field")
        return default
    value = doc[key]
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, typ):
        raise ConfigError(
            f"{path}{key}", f"expected {getattr(typ, '__name__', typ)}, got {type(value).__name__}"
        )
    return value


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 10
    dim: int = 12
    per_class: int = 100
    spread: float = 1.0
    center_scale: float = 6.0
    seed: int = 7
    classes_per_task: int = 2
    test_fraction: float = 0.2


@dataclass(frozen=True)
class RunConfig:
    seeds: tuple[int, ...]
    data: DataConfig
    hidden_dims: tuple[int, ...]
    gamma: float
    epochs_per_task: int
    lr: float
    momentum: float
    batch_size: int
    coreset_method: str
    per_class_capacity: int
    attack: AttackConfig
    selection: SelectionConfig
    out_dir: str | None = None
    sweep_methods: tuple[str, ...] = ("blo", "random")


def runconfig_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    seeds = _get(doc, "seeds", "", list)
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds", "must be a non-empty list of integers")

    d = _get(doc, "data", "", dict)
    data = DataConfig(
        num_classes=_get(d, "num_classes", "data.", int),
        dim=_get(d, "dim", "data.", int),
        per_class=_get(d, "per_class", "data.", int),
        spread=_get(d, "spread", "data.", float),
        center_scale=_get(d, "center_scale", "data.", float, required=False, default=6.0),
        seed=_get(d, "seed", "data.", int),
        classes_per_task=_get(d, "classes_per_task", "data.", int),
        test_fraction=_get(d, "test_fraction", "data.", float),
    )

    m = _get(doc, "model", "", dict)
    hidden = _get(m, "hidden_dims", "model.", list)
    if not all(isinstance(h, int) and h > 0 for h in hidden):
        raise ConfigError("model.hidden_dims", "must be a list of positive integers")

    c = _get(doc, "cil", "", dict)
    a = _get(c, "attack", "cil.", dict)
    try:
        attack = AttackConfig(
            epsilon=_get(a, "epsilon", "cil.attack.", float),
            steps=_get(a, "steps", "cil.attack.", int, required=False, default=10),
            step_size=_get(a, "step_size", "cil.attack.", float, required=False),
            random_start=_get(a, "random_start", "cil.attack.", bool, required=False, default=True),
            input_bounds=tuple(
                _get(a, "input_bounds", "cil.attack.", list, required=False, default=[0.0, 1.0])
            ),
        )
    except ValueError as exc:
        raise ConfigError("cil.attack", str(exc)) from exc

    s = _get(c, "selection", "cil.", dict, required=False, default={})
    try:
        selection = SelectionConfig(
            n=_get(s, "n", "cil.selection.", int, required=False, default=1),
            outer_steps=_get(s, "outer_steps", "cil.selection.", int, required=False, default=15),
            outer_lr=_get(s, "outer_lr", "cil.selection.", float, required=False, default=20.0),
            inner_unroll_T=_get(s, "inner_unroll_T", "cil.selection.", int, required=False, default=10),
            inner_lr=_get(s, "inner_lr", "cil.selection.", float, required=False, default=2.0),
            adversarial_inner=_get(s, "adversarial_inner", "cil.selection.", bool, required=False, default=False),
            inner_l2=_get(s, "inner_l2", "cil.selection.", float, required=False, default=0.0),
            damping=_get(s, "damping", "cil.selection.", float, required=False, default=0.01),
            influence_train_steps=_get(s, "influence_train_steps", "cil.selection.", int, required=False, default=300),
            influence_lr=_get(s, "influence_lr", "cil.selection.", float, required=False, default=1.0),
            attack=attack if _get(s, "adversarial_inner", "cil.selection.", bool, required=False, default=False) else None,
        )
    except ValueError as exc:
        raise ConfigError("cil.selection", str(exc)) from exc

    gamma = _get(c, "gamma", "cil.", float)
    method = _get(c, "coreset_method", "cil.", str)
    if method not in CORESET_METHODS:
        raise ConfigError("cil.coreset_method", f"must be one of {CORESET_METHODS}")
    sweep_methods = tuple(
        _get(doc, "sweep_methods", "", list, required=False, default=["blo", "random"])
    )
    for sm in sweep_methods:
        if sm not in CORESET_METHODS:
            raise ConfigError("sweep_methods", f"{sm!r} is not one of {CORESET_METHODS}")

    cfg = RunConfig(
        seeds=tuple(seeds),
        data=data,
        hidden_dims=tuple(hidden),
        gamma=gamma,
        epochs_per_task=_get(c, "epochs_per_task", "cil.", int),
        lr=_get(c, "lr", "cil.", float),
        momentum=_get(c, "momentum", "cil.", float),
        batch_size=_get(c, "batch_size", "cil.", int, required=False, default=32),
        coreset_method=method,
        per_class_capacity=_get(c, "per_class_capacity", "cil.", int),
        attack=attack,
        selection=selection,
        out_dir=_get(doc, "out_dir", "", str, required=False),
        sweep_methods=sweep_methods,
    )
    try:
        cil_config_for(cfg, seed=int(cfg.seeds[0]))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("cil", str(exc)) from exc
    return cfg


def runconfig_to_dict(cfg: RunConfig) -> dict:
    return {
        "seeds": list(cfg.seeds),
        "data": {
            "num_classes": cfg.data.num_classes,
            "dim": cfg.data.dim,
            "per_class": cfg.data.per_class,
            "spread": cfg.data.spread,
            "center_scale": cfg.data.center_scale,
            "seed": cfg.data.seed,
            "classes_per_task": cfg.data.classes_per_task,
            "test_fraction": cfg.data.test_fraction,
        },
        "model": {"hidden_dims": list(cfg.hidden_dims)},
        "cil": {
            "gamma": cfg.gamma,
            "epochs_per_task": cfg.epochs_per_task,
            "lr": cfg.lr,
            "momentum": cfg.momentum,
            "batch_size": cfg.batch_size,
            "coreset_method": cfg.coreset_method,
            "per_class_capacity": cfg.per_class_capacity,
            "attack": {
                "epsilon": cfg.attack.epsilon,
                "steps": cfg.attack.steps,
                "step_size": cfg.attack.step_size,
                "random_start": cfg.attack.random_start,
                "input_bounds": list(cfg.attack.input_bounds),
            },
            "selection": {
                "n": cfg.selection.n,
                "outer_steps": cfg.selection.outer_steps,
                "outer_lr": cfg.selection.outer_lr,
                "inner_unroll_T": cfg.selection.inner_unroll_T,
                "inner_lr": cfg.selection.inner_lr,
                "adversarial_inner": cfg.selection.adversarial_inner,
                "inner_l2": cfg.selection.inner_l2,
                "damping": cfg.selection.damping,
                "influence_train_steps": cfg.selection.influence_train_steps,
                "influence_lr": cfg.selection.influence_lr,
            },
        },
        "out_dir": cfg.out_dir,
        "sweep_methods": list(cfg.sweep_methods),
    }


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("<path>", f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<json>", f"invalid JSON: {exc}") from exc
    return runconfig_from_dict(doc)


def stream_for(cfg: RunConfig, seed: int) -> list[TaskDataset]:
    """Deterministic task stream for one trial; paired across methods by seed."""
    data_seed = int(np.random.default_rng([cfg.data.seed, seed]).integers(2**63))
    ds = gen_blobs(
        num_classes=cfg.data.num_classes,
        dim=cfg.data.dim,
        per_class=cfg.data.per_class,
        spread=cfg.data.spread,
        seed=data_seed,
        center_scale=cfg.data.center_scale,
    )
    return split_tasks(ds, cfg.data.classes_per_task, cfg.data.test_fraction, seed=data_seed)


def cil_config_for(
    cfg: RunConfig,
    seed: int,
    method: str | None = None,
    capacity: int | None = None,
) -> CilConfig:
    cap = capacity if capacity is not None else cfg.per_class_capacity
    return CilConfig(
        gamma=cfg.gamma,
        attack=cfg.attack,
        epochs_per_task=cfg.epochs_per_task,
        lr=cfg.lr,
        momentum=cfg.momentum,
        coreset_method=method if method is not None else cfg.coreset_method,
        selection=cfg.selection,
        per_class_capacity=cap,
        seed=seed,
        batch_size=cfg.batch_size,
        hidden_dims=cfg.hidden_dims,
    )
