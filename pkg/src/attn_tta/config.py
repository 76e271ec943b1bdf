"""Flat ``key = value`` experiment config.

One setting per line, ``#`` starts a comment, lists are comma separated.
Every key is a field of ``ExperimentConfig``; unknown keys are rejected.
Command-line overrides use the same ``key=value`` syntax.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

from .data import CORRUPTIONS
from .engine import AdaptationPolicy
from .optim import OptimizerConfig
from .vit import VitConfig


class ConfigFileError(ValueError):
    pass


def _floats(*xs):
    return field(default_factory=lambda: list(xs))


@dataclass
class ExperimentConfig:
    # model
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 32
    num_heads: int = 4
    num_layers: int = 2
    num_register_tokens: int = 4
    num_classes: int = 10
    layernorm_eps: float = 1e-5
    model_seed: int = 0

    # data
    train_per_class: int = 150
    test_per_class: int = 60
    data_seed: int = 1
    test_seed: int = 2
    corruption_seed: int = 0
    corruptions: list[str] = field(default_factory=lambda: list(CORRUPTIONS))
    severities: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    order_seed: int = 0

    # clean training
    epochs: int = 20
    train_lr: float = 3e-3
    batch_size: int = 32
    train_seed: int = 0

    # adaptation policy (Adam values from the reference setup)
    optimizer: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.99
    beta2: float = 0.999
    adam_eps: float = 1e-8
    reset_model_params: bool = True
    reset_optimizer_state: str = "never"
    steps_per_sample: int = 1
    param_filter: str = "all"
    layer: int = -1
    pooled: bool = False
    carry_across_corruptions: bool = True
    policy_source: str = "config"  # or "search": take the best adam/never policy from search

    # hyperparameter search
    search_adam_lrs: list[float] = _floats(1e-4, 3e-4, 1e-3, 3e-3)
    search_sgd_lrs: list[float] = _floats(1e-4, 1e-3, 1e-2)
    search_adam_resets: list[str] = field(default_factory=lambda: ["never", "per-sample"])

    # analysis
    entropy_bins: int = 20
    entropy_source: str = "before"
    tail_fraction: float = 0.1
    tail_min_weight: float = 1e-6
    tail_bins_per_decade: int = 4
    tail_corruption: str = "clean"

    # paths
    out_dir: str = "runs/default"
    checkpoint: str = ""
    episodes: str = ""

    def vit_config(self) -> VitConfig:
        return VitConfig(image_size=self.image_size, patch_size=self.patch_size,
                         channels=self.channels, embed_dim=self.embed_dim,
                         num_heads=self.num_heads, num_layers=self.num_layers,
                         num_register_tokens=self.num_register_tokens,
                         num_classes=self.num_classes, layernorm_eps=self.layernorm_eps,
                         seed=self.model_seed)

    def policy(self) -> AdaptationPolicy:
        opt = OptimizerConfig(self.optimizer, self.lr, self.beta1, self.beta2, self.adam_eps)
        return AdaptationPolicy(opt, self.reset_model_params, self.reset_optimizer_state,
                                self.steps_per_sample, self.param_filter, self.layer, self.pooled)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "checkpoint.json"

    @property
    def episodes_path(self) -> Path:
        return Path(self.episodes) if self.episodes else Path(self.out_dir) / "episodes.jsonl"

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, kind: str, raw: str):
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("list"):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            inner = kind[5:-1]
            if name == "corruptions" and items == ["all"]:
                return list(CORRUPTIONS)
            return [_coerce(name, inner, x) for x in items]
        return raw
    except ValueError:
        raise ConfigFileError(f"{name}: cannot parse {raw!r} as {kind}") from None


_KINDS = {f.name: str(f.type) for f in fields(ExperimentConfig)}


def parse_pairs(pairs: Iterable[tuple[str, str]], base: ExperimentConfig | None = None
                ) -> ExperimentConfig:
    cfg = dataclasses.replace(base) if base is not None else ExperimentConfig()
    for key, raw in pairs:
        key = key.strip().replace("-", "_")
        if key not in _KINDS:
            raise ConfigFileError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, _KINDS[key], raw))
    return cfg


def split_line(line: str, where: str) -> tuple[str, str] | None:
    line = line.split("#", 1)[0].strip()
    if not line:
        return None
    if "=" not in line:
        raise ConfigFileError(f"{where}: expected 'key = value', got {line!r}")
    k, v = line.split("=", 1)
    return k.strip(), v.strip()


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    pairs = []
    if path is not None:
        for i, line in enumerate(Path(path).read_text().splitlines(), 1):
            kv = split_line(line, f"{path}:{i}")
            if kv:
                pairs.append(kv)
    for o in overrides:
        kv = split_line(o, "override")
        if kv:
            pairs.append(kv)
    cfg = parse_pairs(pairs)
    unknown = set(cfg.corruptions) - set(CORRUPTIONS)
    if unknown:
        raise ConfigFileError(f"unknown corruptions {sorted(unknown)}; registry: {list(CORRUPTIONS)}")
    cfg.vit_config().validate()
    cfg.policy()
    return cfg
