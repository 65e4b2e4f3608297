"""Run configuration: typed TOML sections, dotted overrides, and a stable hash."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .data import SceneConfig
from .grounder import LossWeights
from .image import NORMS
from .training import LRSchedule, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    image_size: int = 64
    grid_size: int = 8
    embed_dim: int = 32
    hidden: int = 32
    widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    extra_convs: int = 1
    coords: bool = True
    cell_coords: bool = True
    norm: str = "batch"
    context_convs: int = 0
    isolate_conf: bool = True
    att_hidden: int = 32
    attr_hidden: int = 64
    t_max: int = 8
    n_attr: int = 50


@dataclass
class DataSection:
    flavor: str = "loc"
    n_train: int = 2000
    n_val: int = 300
    n_test: int = 300
    expressions_per_referent: int = 1
    referents_per_scene: int = 0
    min_objects: int = 1
    max_objects: int = 5
    # existing manifest to use instead of generating one
    manifest: str = ""
    image_root: str = ""


@dataclass
class TrainSection:
    lr: float = 1e-3
    lr_decay: float = 0.8
    lr_every: int = 5
    momentum: float = 0.9
    lambda_loc: float = 20.0
    lambda_conf: float = 5.0
    lambda_att: float = 1.0
    lambda_attr: float = 5.0
    patience: int = 10
    max_epochs: int = 100
    time_budget: float = 1080.0
    freeze_backbone: bool = False
    eta: float = 0.5


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 1
    deterministic: bool = True


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> "RunConfig":
        m, d, t, r = self.model, self.data, self.train, self.run
        stride = 2 ** len(m.widths)
        if m.image_size % stride or m.image_size // stride != m.grid_size:
            raise ConfigError(
                f"model.image_size {m.image_size} with {len(m.widths)} stride-2 blocks gives grid "
                f"{m.image_size / stride:g}, not model.grid_size {m.grid_size}"
            )
        if m.norm not in NORMS:
            raise ConfigError(f"model.norm must be one of {NORMS}, got {m.norm!r}")
        if m.extra_convs < 0 or m.context_convs < 0:
            raise ConfigError("model.extra_convs and model.context_convs must be >= 0")
        if d.expressions_per_referent < 1 or d.referents_per_scene < 0:
            raise ConfigError("data.expressions_per_referent must be >= 1 and data.referents_per_scene >= 0")
        if d.flavor not in ("loc", "app"):
            raise ConfigError(f"data.flavor must be 'loc' or 'app', got {d.flavor!r}")
        if min(t.lambda_loc, t.lambda_conf, t.lambda_att, t.lambda_attr) < 0:
            raise ConfigError("loss weights must be non-negative")
        if t.patience < 1 or t.max_epochs < 1:
            raise ConfigError("train.patience and train.max_epochs must be >= 1")
        if not 0 < t.eta < 1:
            raise ConfigError("train.eta must be in (0, 1)")
        if m.t_max < 1 or m.n_attr < 1:
            raise ConfigError("model.t_max and model.n_attr must be >= 1")
        if r.threads < 1:
            raise ConfigError("run.threads must be >= 1")
        return self

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """sha256 over the canonical JSON of every setting."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    # -- views used by the pipeline --

    @property
    def loss_weights(self) -> LossWeights:
        t = self.train
        return LossWeights(t.lambda_loc, t.lambda_conf, t.lambda_att, t.lambda_attr)

    def train_config(self, weights: LossWeights | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            weights=weights or self.loss_weights,
            schedule=LRSchedule(t.lr, t.lr_decay, t.lr_every),
            momentum=t.momentum,
            patience=t.patience,
            max_epochs=t.max_epochs,
            time_budget=t.time_budget,
            seed=self.run.seed,
            freeze_backbone=t.freeze_backbone,
            eta=t.eta,
        )

    def scene_config(self) -> SceneConfig:
        d = self.data
        return SceneConfig(
            canvas=self.model.image_size,
            min_objects=d.min_objects,
            max_objects=d.max_objects,
            flavor=d.flavor,
            expressions_per_referent=d.expressions_per_referent,
            referents_per_scene=d.referents_per_scene,
        )

    def model_kwargs(self) -> dict[str, Any]:
        m = self.model
        return dict(
            image_size=m.image_size,
            embed_dim=m.embed_dim,
            hidden=m.hidden,
            widths=tuple(m.widths),
            extra_convs=m.extra_convs,
            coords=m.coords,
            cell_coords=m.cell_coords,
            norm=m.norm,
            context_convs=m.context_convs,
            isolate_conf=m.isolate_conf,
            att_hidden=m.att_hidden,
            attr_hidden=m.attr_hidden,
        )


SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _section_types() -> dict[str, type]:
    return {"model": ModelSection, "data": DataSection, "train": TrainSection, "run": RunSection}


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where} must be a list of integers, got {value!r}")
        return list(value)
    raise ConfigError(f"unsupported type for {where}")


def from_dict(raw: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    types = _section_types()
    for section, values in raw.items():
        if section not in types:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a table")
        target = getattr(cfg, section)
        known = {f.name for f in dataclasses.fields(target)}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {section}.{key}")
            setattr(target, key, _coerce(section, key, value, getattr(target, key)))
    return cfg


PROFILES = ("desk", "paper")


def profile_path(name: str) -> Path:
    """Path of a config profile shipped inside the package."""
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {PROFILES}")
    return Path(__file__).with_name("configs") / f"{name}.toml"


def load(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read a TOML config (defaults if ``path`` is None) and apply dotted overrides.

    ``path`` may also name a shipped profile, ``"desk"`` or ``"paper"``.
    """
    cfg = RunConfig()
    if path is not None:
        if str(path) in PROFILES:
            path = profile_path(str(path))
        try:
            raw = tomli.loads(Path(path).read_text())
        except tomli.TOMLDecodeError as err:
            raise ConfigError(f"{path}: {err}") from None
        cfg = from_dict(raw, cfg)
    for dotted, text in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        from_dict({section: {key: parse_value(text, section, key, cfg)}}, cfg)
    return cfg.validate()


def parse_value(text: str, section: str, key: str, cfg: RunConfig) -> Any:
    """Interpret a command-line string as a TOML literal, falling back to a bare string."""
    target = getattr(cfg, section, None)
    if target is None:
        raise ConfigError(f"unknown config section {section!r}")
    if isinstance(getattr(target, key, None), str):
        return text
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        if text.lower() in ("true", "false"):
            return text.lower() == "true"
        return text
