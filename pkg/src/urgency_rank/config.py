"""RunConfig: one JSON file combining simulation, encoding, model and training settings.

Unknown keys anywhere are rejected. A minimal file can be ``{}``; everything
has a default.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .features import EncodingConfig
from .model import ModelConfig
from .simulate import SimConfig
from .train import TrainConfig


class RunConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AblationConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    max_steps: int | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    attention_hidden: int = 32
    mlp_hidden: tuple[int, ...] = (200, 80)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    data_dir: str | None = None

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(encoding=self.encoding, attention_hidden=self.attention_hidden, mlp_hidden=self.mlp_hidden)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, sim=replace(self.sim, seed=seed), train=replace(self.train, seed=seed))

    def with_shards(self, shards: int) -> "RunConfig":
        return replace(self, train=replace(self.train, shards=shards))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise RunConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise RunConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in data.items():
        sub = {"sim": SimConfig, "encoding": EncodingConfig, "train": TrainConfig, "ablation": AblationConfig}
        if cls is RunConfig and k in sub:
            kwargs[k] = _build(sub[k], v, f"{where}.{k}")
        else:
            kwargs[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise RunConfigError(f"{where}: {e}") from None


def parse_run_config(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "config")
    # the top-level seed drives simulation and training unless they set their own
    sim_seed = data.get("sim", {}).get("seed", cfg.seed)
    train_seed = data.get("train", {}).get("seed", cfg.seed)
    return replace(cfg, sim=replace(cfg.sim, seed=sim_seed), train=replace(cfg.train, seed=train_seed))


def load_run_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise RunConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise RunConfigError(f"{p}: invalid JSON ({e.msg})") from None
    return parse_run_config(data)
