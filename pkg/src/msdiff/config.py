"""Strict run configuration: every field defaulted, unknown keys rejected.

The JSON layout mirrors the dataclass tree: top-level "seed" plus "data",
"model", "train", and "sample" sections.  Knobs that belong to the training
recipe (grounding drop probability, training-time image weight) live in the
train section and are applied onto the model config when the model is built,
so they cannot be set in two places.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .diffusion import PseudoLayoutConfig, SamplerConfig
from .errors import ConfigError, ParseError
from .model import Model, ModelConfig
from .rng import Rng

# set through train.grounding_drop / train.gamma_train, not the model section
_MODEL_RESERVED = ("grounding_drop_prob", "train_gamma")


@dataclass(frozen=True)
class DataConfig:
    num_samples: int = 500
    canvas: int = 32
    jitter: float = 1.0

    def __post_init__(self):
        if self.num_samples < 0:
            raise ConfigError(f"data.num_samples must be >= 0, got {self.num_samples}")
        if self.canvas < 8:
            raise ConfigError(f"data.canvas must be >= 8, got {self.canvas}")
        if not 0.0 <= self.jitter <= 1.0:
            raise ConfigError(f"data.jitter must be in [0, 1], got {self.jitter}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    base_steps: int = 500
    batch: int = 8
    lr: float = 1e-3
    text_drop: float = 0.05
    image_drop: float = 0.05
    grounding_drop: float = 0.1
    attention_loss_weight: float = 0.0
    gamma_train: float = 1.0
    freeze_base: bool = True
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.steps < 0 or self.base_steps < 0:
            raise ConfigError("train.steps and train.base_steps must be >= 0")
        if self.batch < 1:
            raise ConfigError(f"train.batch must be >= 1, got {self.batch}")
        if self.lr <= 0.0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        for name in ("text_drop", "image_drop", "grounding_drop"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"train.{name} must be a probability, got {v}")
        if self.attention_loss_weight not in (0.0, 0.01):
            raise ConfigError("train.attention_loss_weight must be 0 or 0.01, "
                              f"got {self.attention_loss_weight}")
        if self.checkpoint_every < 1:
            raise ConfigError("train.checkpoint_every must be >= 1, "
                              f"got {self.checkpoint_every}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    sample: SamplerConfig = SamplerConfig()

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")

    def to_dict(self) -> dict:
        model = dataclasses.asdict(self.model)
        for key in _MODEL_RESERVED:
            del model[key]
        model["attn_resolutions"] = list(self.model.attn_resolutions)
        pseudo = self.sample.pseudo_layout
        return {
            "seed": self.seed,
            "data": dataclasses.asdict(self.data),
            "model": model,
            "train": dataclasses.asdict(self.train),
            "sample": {
                "guidance_scale": self.sample.guidance_scale,
                "gamma": self.sample.gamma,
                "num_steps": self.sample.num_steps,
                "pseudo_layout": (None if pseudo is None else
                                  dataclasses.asdict(pseudo)),
            },
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        known = {"seed", "data", "model", "train", "sample"}
        for key in raw:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        seed = raw.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        return cls(
            seed=seed,
            data=_parse_section("data", DataConfig, raw.get("data", {})),
            model=_parse_section("model", ModelConfig, raw.get("model", {}),
                                 reserved=_MODEL_RESERVED),
            train=_parse_section("train", TrainConfig, raw.get("train", {})),
            sample=_parse_sampler(raw.get("sample", {})),
        )


def _coerce(section: str, key: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key} must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{section}.{key} must be a list, got {value!r}")
        return tuple(value)
    raise ConfigError(f"{section}.{key} is not configurable")


def _parse_section(section: str, cls, raw, reserved: tuple = ()):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key in reserved:
            raise ConfigError(f"{section}.{key} is set through the train section")
        if key not in defaults:
            raise ConfigError(f"unknown config key {section}.{key}")
        kwargs[key] = _coerce(section, key, defaults[key], value)
    return cls(**kwargs)


def _parse_sampler(raw) -> SamplerConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config section 'sample' must be an object")
    known = {"guidance_scale", "gamma", "num_steps", "pseudo_layout"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key sample.{key}")
    kwargs = {}
    for key in ("guidance_scale", "gamma"):
        if key in raw:
            kwargs[key] = _coerce("sample", key, 0.0, raw[key])
    if "num_steps" in raw:
        kwargs["num_steps"] = _coerce("sample", "num_steps", 0, raw["num_steps"])
    pseudo = raw.get("pseudo_layout")
    if pseudo is not None:
        if not isinstance(pseudo, dict):
            raise ConfigError("sample.pseudo_layout must be null or an object")
        for key in pseudo:
            if key not in ("threshold", "switch_step"):
                raise ConfigError(f"unknown config key sample.pseudo_layout.{key}")
        if "threshold" not in pseudo or "switch_step" not in pseudo:
            raise ConfigError("sample.pseudo_layout needs threshold and switch_step")
        kwargs["pseudo_layout"] = PseudoLayoutConfig(
            threshold=_coerce("sample.pseudo_layout", "threshold", 0.0,
                              pseudo["threshold"]),
            switch_step=_coerce("sample.pseudo_layout", "switch_step", 0,
                                pseudo["switch_step"]))
    return SamplerConfig(**kwargs)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return RunConfig.from_dict(raw)


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def build_model(cfg: RunConfig) -> Model:
    """Instantiate the model with the train-section knobs applied."""
    model_cfg = dataclasses.replace(cfg.model,
                                    grounding_drop_prob=cfg.train.grounding_drop,
                                    train_gamma=cfg.train.gamma_train)
    return Model.build(model_cfg, Rng(cfg.seed).child("init"))
