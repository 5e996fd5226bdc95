"""Run configuration.

Config files are flat ``key = value`` lines; a dotted prefix selects the
section (``diffusion.T = 100``). Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .energy import LangevinConfig


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a directory of trajectory files
    held_out: str = ""
    column_order: str = "frame,id,x,y"
    t_past: int = 8
    t_future: int = 12
    stride: int = 1
    train_fraction: float = 0.9
    synthetic_train_episodes: int = 100
    synthetic_test_episodes: int = 25
    synthetic_noise: float = 0.02
    synthetic_separation: float = 0.2


@dataclass
class ModelConfig:
    td_hidden: int = 64
    td_head_hidden: int = 128
    td_use_neighbors: bool = True
    gg_hidden: int = 128
    gg_feature_dim: int = 128
    gg_heads: int = 1
    gg_share_recurrent: bool = True
    energy_hidden: int = 256
    encoder_hidden: int = 256
    buffer_capacity: int = 1000


@dataclass
class DiffusionConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.2
    truncation: int = 5
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    ffn: int = 128
    time_dim: int = 64


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    epochs_td: int = 150
    epochs_sc: int = 150
    epochs_pd: int = 300
    epochs_ft: int = 150
    lr_td: float = 2e-3
    lr_sc: float = 1e-3
    lr_pd: float = 1e-3
    lr_ft: float = 1e-3
    clip_norm: float = 10.0
    lr_schedule: str = "cosine"  # "cosine" (decay to 0 over the stage) or "constant"
    contrastive_weight: float = 1.0
    energy_reg: float = 0.1
    gg_in_stage3: bool = False
    gg_in_stage4: bool = True
    ft_through_chain: bool = True
    stages: str = "1,2,3,4"

    def stage_list(self) -> list[int]:
        return [int(s) for s in str(self.stages).split(",") if s.strip()]


@dataclass
class EvalConfig:
    k: int = 20
    seed: int = 0
    joint_min: bool = False


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    langevin: LangevinConfig = field(default_factory=LangevinConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        t = self.train
        for name in ("batch_size", "epochs_td", "epochs_sc", "epochs_pd", "epochs_ft"):
            v = getattr(t, name)
            if v < (1 if name == "batch_size" else 0):
                raise ValueError(f"train.{name} must be positive, got {v}")
        d = self.diffusion
        if d.T < 2 or not 0 < d.beta_start < d.beta_end < 1:
            raise ValueError("invalid diffusion schedule")
        if not 0 <= d.truncation <= d.T:
            raise ValueError("diffusion.truncation must lie in [0, T]")
        if self.langevin.steps < 1 or self.langevin.step_size <= 0:
            raise ValueError("invalid langevin settings")
        if not 0 <= self.langevin.fresh_prob <= 1:
            raise ValueError("langevin.fresh_prob must lie in [0, 1]")
        if self.model.buffer_capacity < 1:
            raise ValueError("model.buffer_capacity must be >= 1")
        if t.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"train.lr_schedule must be 'cosine' or 'constant', got {t.lr_schedule!r}")
        if set(t.stage_list()) - {1, 2, 3, 4}:
            raise ValueError(f"unknown stages in {t.stages!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def flat(self) -> dict[str, object]:
        return {f"{sec}.{k}": v for sec, vals in self.to_dict().items() for k, v in vals.items()}

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def dumps(self) -> str:
        return "".join(f"{k} = {v!r}\n" if isinstance(v, str) else f"{k} = {v}\n" for k, v in self.flat().items())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    def updated(self, overrides: dict[str, object]) -> "Config":
        cfg = from_dict(self.to_dict())
        for key, value in overrides.items():
            _assign(cfg, key, value)
        cfg.validate()
        return cfg


def _coerce(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    try:
        value = ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        value = raw
    if isinstance(current, float) and isinstance(value, int):
        value = float(value)
    if isinstance(current, str) and not isinstance(value, str):
        value = raw
    if type(value) is not type(current):
        raise ValueError(f"expected {type(current).__name__}, got {raw!r}")
    return value


def _assign(cfg: Config, key: str, value) -> None:
    if "." not in key:
        raise KeyError(f"config key {key!r} has no section prefix")
    section, name = key.split(".", 1)
    if not hasattr(cfg, section) or not dataclasses.is_dataclass(getattr(cfg, section)):
        raise KeyError(f"unknown config section {section!r}")
    sec = getattr(cfg, section)
    if not hasattr(sec, name):
        raise KeyError(f"unknown config key {key!r}")
    current = getattr(sec, name)
    setattr(sec, name, _coerce(value, current) if isinstance(value, str) else value)


def loads(text: str) -> Config:
    cfg = Config()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            _assign(cfg, key, value)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    cfg.validate()
    return cfg


def load(path) -> Config:
    return loads(Path(path).read_text())


def from_dict(d: dict) -> Config:
    cfg = Config()
    for section, vals in d.items():
        for k, v in vals.items():
            _assign(cfg, f"{section}.{k}", v)
    return cfg
