"""YAML run configuration shared by every command.

A config file has up to five sections, all optional::

    data:          # TaskSpec fields plus the dataset directory
      path: data/blobs
      kind: blobs
      image_size: [32, 32]
      count: 100
      noise_std: 0.03
      boundary_blur: 1.0
      seed: 0
    model:         # ModelSpec fields; input_shape defaults to [1, H, W] of the data
      kind: tiny-unet
      channels: [8, 16, 16]
      dropout_sites: null
    train:         # TrainConfig fields
      schedule: desk        # desk = 20/40/10, full = 100/200/50; explicit epochs win
      lr: 1.0e-4
      lambda: 0.5
      seeds: {init: 0, data: 1, sampling: 2}
    preference:
      strategy: dropout
      grid: 2d              # 2d, 3d or an explicit list of rates
      tau: 0.3
      workers: 1
    output:
      dir: runs/blobs       # defaults to $MAPO_OUTPUT_DIR, then runs/

Unknown keys are rejected with their dotted path.
"""

from __future__ import annotations

import io
import os
import types
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Literal, Union, get_args, get_origin, get_type_hints

import yaml
from beartype import beartype
from loguru import logger
from ruamel.yaml import YAML
from ruamel.yaml.comments import CommentedMap

from mapo_tools.constants import DESK_SCHEDULE, FULL_SCHEDULE
from mapo_tools.errors import ConfigError, ContractViolation
from mapo_tools.preference import DropoutGrid
from mapo_tools.segnet import ModelSpec
from mapo_tools.synth import TaskSpec
from mapo_tools.trainer import Seeds, TrainConfig

OUTPUT_ENV = "MAPO_OUTPUT_DIR"
DEFAULT_OUTPUT = "runs"
DEFAULT_DATA = "data"
RESOLVED_NAME = "resolved_config.yaml"

_SCHEDULES = {"desk": DESK_SCHEDULE, "full": FULL_SCHEDULE}
_SECTIONS = ("data", "model", "train", "preference", "output")
_PREFERENCE_KEYS = ("strategy", "grid", "tau", "workers")
_ALIASES = {"lambda": "lam"}


@dataclass(frozen=True)
class RunConfig:
    data: TaskSpec
    model: ModelSpec
    train: TrainConfig
    data_path: Path = Path(DEFAULT_DATA)
    output_dir: Path = field(default_factory=lambda: Path(DEFAULT_OUTPUT))

    def to_dict(self) -> dict[str, Any]:
        t = self.train
        return {
            "data": {
                "path": str(self.data_path),
                "kind": self.data.kind,
                "image_size": list(self.data.image_size),
                "count": self.data.count,
                "noise_std": self.data.noise_std,
                "boundary_blur": self.data.boundary_blur,
                "seed": self.data.seed,
            },
            "model": self.model.to_dict(),
            "train": {
                "lr": t.lr,
                "beta": t.beta,
                "lambda": t.lam,
                "warmup_epochs": t.warmup_epochs,
                "dpo_epochs": t.dpo_epochs,
                "refresh_interval": t.refresh_interval,
                "warmup_dropout": t.warmup_dropout,
                "batch_size": t.batch_size,
                "optimizer": t.optimizer,
                "weight_decay": t.weight_decay,
                "grad_clip": t.grad_clip,
                "supervised_loss": t.supervised_loss,
                "refresh_reference": t.refresh_reference,
                "seeds": {"init": t.seeds.init, "data": t.seeds.data, "sampling": t.seeds.sampling},
            },
            "preference": {
                "strategy": t.strategy,
                "grid": list(t.grid.rates),
                "tau": t.tau,
                "workers": t.workers,
            },
            "output": {"dir": str(self.output_dir)},
        }


def _fail(path: str, message: str) -> ConfigError:
    return ConfigError(f"{path}: {message}")


def _coerce(value: Any, hint: Any, path: str) -> Any:
    """Convert a parsed YAML value to *hint*, the annotated type of a dataclass field."""
    origin, args = get_origin(hint), get_args(hint)
    if origin in (Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin is Literal:
        if value not in args:
            raise _fail(path, f"expected one of {list(args)}, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise _fail(path, f"expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise _fail(path, f"expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if hint is bool:
        if not isinstance(value, bool):
            raise _fail(path, f"expected true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise _fail(path, f"expected an integer, got {value!r}")
        try:
            return int(value)
        except ValueError:
            raise _fail(path, f"expected an integer, got {value!r}") from None
    if hint is float:
        # YAML 1.1 reads 1e-4 (no dot) as a string.
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise _fail(path, f"expected a number, got {value!r}")
        try:
            return float(value)
        except ValueError:
            raise _fail(path, f"expected a number, got {value!r}") from None
    if hint is str:
        if not isinstance(value, str):
            raise _fail(path, f"expected a string, got {value!r}")
        return value
    raise _fail(path, f"unsupported field type {hint!r}")


def _section(raw: Any, path: str) -> dict[str, Any]:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise _fail(path, f"expected a mapping, got {type(raw).__name__}")
    return {_ALIASES.get(k, k): v for k, v in raw.items()}


def _check_keys(section: dict[str, Any], allowed: set[str], path: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"Unknown config key {path}.{unknown[0]}")


def _build(cls: type, values: dict[str, Any], path: str, skip: tuple[str, ...] = ()) -> dict[str, Any]:
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)} - set(skip)
    _check_keys(values, names | set(skip), path)
    return {k: _coerce(v, hints[k], f"{path}.{k}") for k, v in values.items() if k in names}


def _grid(value: Any, path: str) -> DropoutGrid:
    if value in ("2d", "3d"):
        return DropoutGrid.preset(value)
    rates = _coerce(value, tuple[float, ...], path)
    try:
        return DropoutGrid(rates)
    except ContractViolation as e:
        raise _fail(path, str(e)) from e


@beartype
def parse_config(document: Any) -> RunConfig:
    """Validate a parsed YAML document into a ``RunConfig``."""
    document = document or {}
    if not isinstance(document, dict):
        raise ConfigError("A run config must be a mapping")
    for key in document:
        if key not in _SECTIONS:
            raise ConfigError(f"Unknown config key {key}")
    data = _section(document.get("data"), "data")
    model = _section(document.get("model"), "model")
    train = _section(document.get("train"), "train")
    pref = _section(document.get("preference"), "preference")
    output = _section(document.get("output"), "output")

    try:
        data_path = Path(_coerce(data.pop("path", DEFAULT_DATA), str, "data.path"))
        task = TaskSpec(**_build(TaskSpec, data, "data"))

        model_kwargs = _build(ModelSpec, model, "model")
        model_kwargs.setdefault("input_shape", (1, *task.image_size))
        if tuple(model_kwargs["input_shape"][1:]) != task.image_size:
            raise ConfigError(
                f"model.input_shape {model_kwargs['input_shape']} does not match data.image_size"
            )
        model_spec = ModelSpec(**model_kwargs)

        _check_keys(pref, set(_PREFERENCE_KEYS), "preference")
        schedule = train.pop("schedule", "desk")
        if schedule not in _SCHEDULES:
            raise _fail("train.schedule", f"expected desk or full, got {schedule!r}")
        warmup, dpo, refresh = _SCHEDULES[schedule]
        seeds_raw = _section(train.pop("seeds", None), "train.seeds")
        seeds = Seeds(**_build(Seeds, seeds_raw, "train.seeds"))
        for key in ("strategy", "grid", "tau", "workers"):
            if key in train:
                raise ConfigError(f"Unknown config key train.{key} (it belongs in preference)")
        train_kwargs = {
            "warmup_epochs": warmup,
            "dpo_epochs": dpo,
            "refresh_interval": refresh,
            **_build(TrainConfig, train, "train", skip=("grid", "seeds")),
            **_build(TrainConfig, {k: v for k, v in pref.items() if k != "grid"}, "preference"),
            "seeds": seeds,
        }
        if "grid" in pref:
            train_kwargs["grid"] = _grid(pref["grid"], "preference.grid")
        train_cfg = TrainConfig(**train_kwargs)
    except ContractViolation as e:
        raise ConfigError(f"Invalid config: {e}") from e

    _check_keys(output, {"dir"}, "output")
    default_out = os.getenv(OUTPUT_ENV) or DEFAULT_OUTPUT
    output_dir = Path(_coerce(output.get("dir", default_out), str, "output.dir"))
    return RunConfig(task, model_spec, train_cfg, data_path=data_path, output_dir=output_dir)


@beartype
def load_config(path: Path) -> RunConfig:
    try:
        document = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in {path}: {e}") from e
    cfg = parse_config(document)
    logger.debug(f"Loaded config {path}")
    return cfg


def _commented(value: Any) -> Any:
    if isinstance(value, dict):
        node = CommentedMap()
        for k, v in value.items():
            node[k] = _commented(v)
        return node
    return value


@beartype
def echo_config(
    out_dir: Path, command: str, cfg: RunConfig | None = None, extra: dict[str, Any] | None = None
) -> Path:
    """Write the fully resolved config and command-level values into *out_dir*."""
    resolved = cfg.to_dict() if cfg is not None else {}
    document = _commented({**resolved, "command": {"name": command, **(extra or {})}})
    document.yaml_set_start_comment(f"Resolved configuration for `mapo {command}`")
    dumper = YAML()
    dumper.indent(mapping=2, sequence=4, offset=2)
    stream = io.StringIO()
    dumper.dump(document, stream)
    path = out_dir / RESOLVED_NAME
    path.write_text(stream.getvalue(), encoding="utf-8")
    logger.info(f"Resolved config written to {path}")
    return path
