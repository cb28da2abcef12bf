"""JSON run configs: ``{"model": {..., "attn": {...}}, "train": {...}, "task": {...}}``.

Keys mirror the dataclass field names. An optional ``"variants"`` section holds
per-variant overrides, e.g. ``{"eeit": {"attn": {"M_H": 32}}}``, applied when
that variant is selected. ``attn.d`` may be omitted; it defaults to ``model.d``.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from .attention import AttnConfig, Variant
from .errors import ConfigError
from .model import ModelConfig
from .tasks import TaskSpec
from .training import TrainConfig

SHIPPED = ("toy-tag", "toy-lm", "toy-grad", "base-ende", "deep-ende", "big-ende")
_TOP = {"model", "train", "task", "variants", "description"}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    task: TaskSpec | None
    source: str = ""


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls) if f.init}


def _strict(cls, raw: dict, where: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(raw) - _fields(cls)
    if unknown:
        raise ConfigError(f"unknown {where} field(s): {', '.join(sorted(unknown))}")
    return raw


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def attn_from_dict(raw: dict, d: int) -> AttnConfig:
    raw = dict(_strict(AttnConfig, raw, "attn"))
    raw.setdefault("d", d)
    if "kernels" in raw:
        raw["kernels"] = tuple(raw["kernels"])
    try:
        return AttnConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"attn: {exc}") from exc


def model_from_dict(raw: dict) -> ModelConfig:
    raw = dict(_strict(ModelConfig, raw, "model"))
    if "attn" not in raw or "d" not in raw:
        raise ConfigError("model needs 'd' and 'attn'")
    raw["attn"] = attn_from_dict(raw["attn"], raw["d"])
    try:
        return ModelConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc


def train_from_dict(raw: dict) -> TrainConfig:
    raw = dict(_strict(TrainConfig, raw or {}, "train"))
    try:
        return TrainConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc


def task_from_dict(raw: dict | None) -> TaskSpec | None:
    if raw is None:
        return None
    raw = dict(_strict(TaskSpec, raw, "task"))
    raw.pop("entropy", None)
    if raw.get("transition") is not None:
        raw["transition"] = tuple(tuple(row) for row in raw["transition"])
    try:
        return TaskSpec(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"task: {exc}") from exc


def _plain(obj):
    if isinstance(obj, Enum):
        return obj.value
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def model_to_dict(config: ModelConfig) -> dict:
    return _plain(config)


def run_to_dict(run: RunConfig) -> dict:
    out = {"model": _plain(run.model), "train": _plain(run.train)}
    if run.task is not None:
        task = _plain(run.task)
        task.pop("entropy", None)
        out["task"] = task
    return out


def resolve_path(name: str) -> Path | None:
    """Path of a user file, or ``None`` when ``name`` refers to a shipped config."""
    p = Path(name)
    if p.exists():
        return p
    return None


def read_raw(name: str) -> dict:
    p = resolve_path(name)
    if p is not None:
        text = p.read_text(encoding="utf-8")
    else:
        stem = Path(name).name
        if stem.endswith(".json"):
            stem = stem[:-5]
        if stem not in SHIPPED:
            raise ConfigError(f"config {name!r} not found (shipped: {', '.join(SHIPPED)})")
        text = resources.files("emha").joinpath("configs", f"{stem}.json").read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{name}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: top level must be an object")
    return raw


def from_dict(raw: dict, variant: str | Variant | None = None, seed: int | None = None,
              source: str = "") -> RunConfig:
    unknown = set(raw) - _TOP
    if unknown:
        raise ConfigError(f"unknown top-level field(s): {', '.join(sorted(unknown))}")
    raw = copy.deepcopy(raw)
    variants = raw.pop("variants", {}) or {}
    raw.pop("description", None)
    if "model" not in raw:
        raise ConfigError("config needs a 'model' section")
    if variant is not None:
        v = Variant(variant)
        raw["model"].setdefault("attn", {})["variant"] = v.value
        for key, over in variants.items():
            if Variant(key) is v:
                raw["model"] = _merge(raw["model"], over)
    for key in variants:
        try:
            Variant(key)
        except ValueError:
            raise ConfigError(f"unknown variant override {key!r}") from None
    train = raw.get("train") or {}
    if seed is not None:
        train = {**train, "seed": int(seed)}
    return RunConfig(model_from_dict(raw["model"]), train_from_dict(train), task_from_dict(raw.get("task")),
                     source)


def load_config(name: str, variant=None, seed: int | None = None) -> RunConfig:
    """Load a JSON config by path or shipped name (``toy-tag``, ``base-ende``, ...)."""
    return from_dict(read_raw(name), variant, seed, source=name)
