"""Run configuration: defaults, JSON loading, validation, overrides.

One JSON file is the source of truth for a run; CLI flags override file
values, and the fully resolved tree (every default filled in) is written
next to each command's outputs.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "length": 5,
        "grid": 4,
        "n_backgrounds": 4,
        "n_characters": 4,
        "n_actions": 4,
        "p_omit": 0.8,
        "caption_len": 12,
        "image_size": 16,
        "image_channels": 3,
    },
    "model": {
        "channels": 24,
        "n_blocks": 2,
        "d_model": 64,
        "n_cond_heads": 2,
        "b_tok": 8,
        "vocab_size": 64,
        "patch": 4,
        "adapter_enabled": True,
        "adapter_bottleneck": 8,
    },
    "schedule": {
        "timesteps": 100,
        "offset": 0.008,
        "variance": "beta",
    },
    "train": {
        "lr": 1e-3,
        "steps": 500,
        "batch_size": 8,
        "p_uncond": 0.1,
        "mode": "full",
        "window_train": None,
    },
    "sample": {
        "guidance": 2.0,
        "window": 4,
        "mode": "visualization",
    },
    "eval": {
        "n_stories": 64,
    },
}


@dataclass(frozen=True)
class DataConfig:
    length: int = 5
    grid: int = 4
    n_backgrounds: int = 4
    n_characters: int = 4
    n_actions: int = 4
    p_omit: float = 0.8
    caption_len: int = 12
    image_size: int = 16
    image_channels: int = 3

    @property
    def image_shape(self):
        return (self.image_channels, self.image_size, self.image_size)

    @property
    def cell(self) -> int:
        return self.image_size // self.grid


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 24
    n_blocks: int = 2
    d_model: int = 64
    n_cond_heads: int = 2
    b_tok: int = 8
    vocab_size: int = 64
    patch: int = 4
    adapter_enabled: bool = True
    adapter_bottleneck: int = 8
    # derived from the data section at resolve time
    image_shape: tuple = (3, 16, 16)
    caption_len: int = 12

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_cond_heads

    @property
    def n_patches(self) -> int:
        return (self.image_shape[1] // self.patch) * (self.image_shape[2] // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.image_shape[0] * self.patch * self.patch


@dataclass(frozen=True)
class ScheduleConfig:
    timesteps: int = 100
    offset: float = 0.008
    variance: str = "beta"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    steps: int = 500
    batch_size: int = 8
    p_uncond: float = 0.1
    mode: str = "full"
    window_train: int | None = None


@dataclass(frozen=True)
class SampleConfig:
    guidance: float = 2.0
    window: int = 4
    mode: str = "visualization"


@dataclass(frozen=True)
class EvalConfig:
    n_stories: int = 64


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _merge(base: dict, override: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here}: expected an object")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def _check_type(value, default, path: str):
    if default is None or value is None:
        return
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")


def _check_types(tree: dict, defaults: dict, path: str = ""):
    for key, value in tree.items():
        here = f"{path}.{key}" if path else key
        if isinstance(defaults[key], dict):
            _check_types(value, defaults[key], here)
        else:
            _check_type(value, defaults[key], here)


def load_config_tree(config_path=None) -> dict:
    """Defaults deep-merged with an optional JSON file; unknown keys rejected."""
    tree = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config file {path}: top level must be an object")
        tree = _merge(tree, user, "")
    _check_types(tree, DEFAULTS)
    return tree


def apply_overrides(tree: dict, overrides: dict) -> dict:
    """Apply {'sample.window': 2, ...} style overrides; None values are skipped."""
    out = copy.deepcopy(tree)
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = out
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[parts[-1]] = value
    _check_types(out, DEFAULTS)
    return out


def _require(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


def resolve(tree: dict) -> RunConfig:
    """Validate the merged tree and build typed config objects."""
    d = tree["data"]
    m = tree["model"]
    s = tree["schedule"]
    t = tree["train"]
    sa = tree["sample"]
    ev = tree["eval"]

    _require(d["length"] >= 1, "data.length must be >= 1")
    _require(d["grid"] >= 1, "data.grid must be >= 1")
    _require(d["image_size"] % d["grid"] == 0, "data.image_size must be divisible by data.grid")
    _require(1 <= d["n_backgrounds"] <= 4, "data.n_backgrounds must be in [1, 4]")
    _require(1 <= d["n_characters"] <= 4, "data.n_characters must be in [1, 4]")
    _require(1 <= d["n_actions"] <= 4, "data.n_actions must be in [1, 4]")
    _require(0.0 <= d["p_omit"] <= 1.0, "data.p_omit must be in [0, 1]")
    _require(d["caption_len"] >= 4, "data.caption_len must be >= 4")
    _require(d["image_channels"] == 3, "data.image_channels must be 3")
    data = DataConfig(**d)

    _require(m["d_model"] % m["n_cond_heads"] == 0,
             "model.d_model must be divisible by model.n_cond_heads")
    _require(d["image_size"] % m["patch"] == 0,
             "data.image_size must be divisible by model.patch")
    _require(m["channels"] >= 1 and m["n_blocks"] >= 1, "model sizes must be positive")
    _require(m["b_tok"] >= 1, "model.b_tok must be >= 1")
    _require(m["adapter_bottleneck"] >= 1, "model.adapter_bottleneck must be >= 1")
    _require(m["vocab_size"] >= 2, "model.vocab_size must be >= 2")
    model = ModelConfig(
        **m, image_shape=data.image_shape, caption_len=data.caption_len
    )

    _require(s["timesteps"] >= 2, "schedule.timesteps must be >= 2")
    _require(s["offset"] > 0, "schedule.offset must be > 0")
    _require(s["variance"] in ("beta", "posterior"),
             "schedule.variance must be beta|posterior")
    schedule = ScheduleConfig(**s)

    _require(t["lr"] > 0, "train.lr must be > 0")
    _require(t["steps"] >= 1, "train.steps must be >= 1")
    _require(t["batch_size"] >= 1, "train.batch_size must be >= 1")
    _require(0.0 <= t["p_uncond"] < 1.0, "train.p_uncond must be in [0, 1)")
    _require(t["mode"] in ("full", "adapter_only"), "train.mode must be full|adapter_only")
    _require(t["window_train"] is None or t["window_train"] >= 0,
             "train.window_train must be null or >= 0")
    train = TrainConfig(**t)

    _require(sa["guidance"] >= 0, "sample.guidance must be >= 0")
    _require(sa["window"] >= 0, "sample.window must be >= 0")
    _require(sa["mode"] in ("visualization", "continuation"),
             "sample.mode must be visualization|continuation")
    sample = SampleConfig(**sa)

    _require(ev["n_stories"] >= 1, "eval.n_stories must be >= 1")
    eval_cfg = EvalConfig(**ev)

    return RunConfig(
        seed=int(tree["seed"]),
        data=data, model=model, schedule=schedule,
        train=train, sample=sample, eval=eval_cfg,
    )


def dump_resolved(tree: dict, path) -> None:
    """Write the fully resolved tree (reproducibility record)."""
    Path(path).write_text(json.dumps(tree, indent=2, sort_keys=True) + "\n")
