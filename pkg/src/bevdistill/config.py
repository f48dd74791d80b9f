"""Run configuration: a single JSON document, validated on load."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .compress import MODES, Z_CONV
from .losses import LossWeights
from .voxelizer import GridSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LwdConfig:
    k_rho: int = 4
    k_theta: int = 6
    m: int = 2
    enabled: bool = True


@dataclass(frozen=True)
class AblationFlags:
    logit_kd: bool = True
    vpd: bool = True
    compression_mode: str = Z_CONV
    domain_transfer: bool = True
    cross_attention: bool = True


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    train_scenes: int = 64
    val_scenes: int = 16
    class_counts: tuple | None = None  # per-class points per synthetic scene
    train: tuple = ()  # file source: ({"scan": path, "label": path}, ...)
    val: tuple = ()
    remap: str | None = None


@dataclass(frozen=True)
class TrainConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    c_v: int = 16
    c_b: int = 16
    num_layers: int = 3
    vpd_layers: tuple = (2, 3)
    lwd: LwdConfig = field(default_factory=LwdConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    temperature: float = 2.0
    lr: float = 0.001
    batch_size: int = 2
    epochs: int = 10
    teacher_epochs: int = 10
    optimizer: str = "sgd"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    @property
    def lwd_active(self) -> bool:
        return self.lwd.enabled

    def validate(self) -> "TrainConfig":
        if self.c_v < 1 or self.c_b < 1:
            raise ConfigError("c_v and c_b must be positive")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.ablation.vpd and not self.vpd_layers:
            raise ConfigError("vpd is enabled but vpd_layers is empty")
        for layer in self.vpd_layers:
            if not 1 <= layer <= self.num_layers:
                raise ConfigError(f"vpd layer {layer} outside 1..{self.num_layers}")
        if len(set(self.vpd_layers)) != len(self.vpd_layers):
            raise ConfigError("vpd_layers contains duplicates")
        if self.ablation.compression_mode not in MODES:
            raise ConfigError(f"compression_mode must be one of {MODES}")
        if self.ablation.compression_mode == "scatter_max" and self.c_v != self.c_b:
            raise ConfigError("scatter_max compression needs c_v == c_b")
        if self.lwd.m < 1:
            raise ConfigError("lwd.m must be >= 1")
        if self.lwd.m > self.lwd.k_rho * self.lwd.k_theta:
            raise ConfigError("lwd.m exceeds the number of regions")
        if not (1 <= self.lwd.k_rho <= self.grid.rho_bins and 1 <= self.lwd.k_theta <= self.grid.theta_bins):
            raise ConfigError("region tiling does not fit the grid")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.teacher_epochs < 0:
            raise ConfigError("lr must be positive, batch_size >= 1, epoch counts >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        if self.data.source not in ("synthetic", "files"):
            raise ConfigError("data.source must be 'synthetic' or 'files'")
        if self.data.source == "files" and (not self.data.train or not self.data.remap):
            raise ConfigError("file data needs data.train and data.remap")
        if self.data.source == "synthetic" and self.data.train_scenes < 1:
            raise ConfigError("data.train_scenes must be >= 1")
        return self

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["grid"] = self.grid.to_json()
        doc["vpd_layers"] = list(self.vpd_layers)
        data = doc["data"]
        data["train"] = [dict(d) for d in self.data.train]
        data["val"] = [dict(d) for d in self.data.val]
        data["class_counts"] = list(self.data.class_counts) if self.data.class_counts is not None else None
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def _section(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {unknown}")
    return dict(doc)


_NESTED = {"lwd": LwdConfig, "loss_weights": LossWeights, "data": DataConfig, "ablation": AblationFlags}


def config_from_json(doc: dict) -> TrainConfig:
    top = _section(TrainConfig, doc, "config")
    kwargs = {}
    try:
        for key, value in top.items():
            if key == "grid":
                kwargs[key] = GridSpec.from_json(value)
            elif key in _NESTED:
                sub = _section(_NESTED[key], value, key)
                if key == "data":
                    for k in ("train", "val"):
                        if k in sub:
                            sub[k] = tuple(dict(item) for item in sub[k])
                    if sub.get("class_counts") is not None:
                        sub["class_counts"] = tuple(int(c) for c in sub["class_counts"])
                kwargs[key] = _NESTED[key](**sub)
            elif key == "vpd_layers":
                kwargs[key] = tuple(int(v) for v in value)
            else:
                kwargs[key] = value
        cfg = TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def load_config(path=None, seed: int | None = None) -> TrainConfig:
    cfg = TrainConfig() if path is None else config_from_json(json.loads(open(path).read()))
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    return cfg.validate()
