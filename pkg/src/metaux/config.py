"""Run configuration: JSON files with exhaustive defaults, merged with CLI
overrides and echoed back out as a resolved snapshot so every run is
reproducible from its artifacts alone."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .episodes import SyntheticGenConfig
from .errors import ConfigError
from .losses import KernelConfig, LossWeights
from .meta import EpisodeShape, TrainConfig
from .model import ModelConfig


@dataclass(frozen=True)
class EvalConfig:
    rounds: int = 5
    episodes: int = 40
    adapt_steps: int = 3

    def validate(self) -> None:
        if self.rounds < 1 or self.episodes < 1 or self.adapt_steps < 1:
            raise ConfigError("eval rounds, episodes, adapt_steps must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    out_dir: str = "runs/default"
    data: SyntheticGenConfig = field(default_factory=SyntheticGenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    episode: EpisodeShape = field(default_factory=EpisodeShape)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        self.data.validate()
        self.model.validate()
        self.episode.validate()
        self.train.validate()
        self.eval.validate()
        if self.model.frames != self.data.frames:
            raise ConfigError(f"model.frames={self.model.frames} must equal data.frames={self.data.frames}")
        if (self.model.height, self.model.width) != (self.data.height, self.data.width):
            raise ConfigError("model height/width must match the data config")
        if self.model.in_channels != self.data.channels:
            raise ConfigError("model.in_channels must match data.channels")
        if self.model.num_classes != self.episode.way:
            raise ConfigError(f"model.num_classes={self.model.num_classes} must equal "
                              f"episode.way={self.episode.way}")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["train"]["weights"] = {"lambda1": self.train.weights.lambda1,
                                 "lambda2": self.train.weights.lambda2}
        d["train"]["kernel"] = {"sigma": self.train.kernel.sigma}
        return d


def _build(cls, data: Mapping[str, Any], path: str):
    fields = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown {path} fields: {sorted(unknown)}")
    return cls(**data)


def run_config_from_dict(raw: Mapping[str, Any]) -> RunConfig:
    raw = dict(raw)
    top_unknown = set(raw) - {"seed", "threads", "out_dir", "data", "model", "episode",
                              "train", "eval"}
    if top_unknown:
        raise ConfigError(f"unknown config sections: {sorted(top_unknown)}")

    data = _build(SyntheticGenConfig, raw.get("data", {}), "data")
    episode = _build(EpisodeShape, raw.get("episode", {}), "episode")

    model_raw = dict(raw.get("model", {}))
    # the model inherits frame geometry and way from data/episode unless pinned
    model_raw.setdefault("frames", data.frames)
    model_raw.setdefault("height", data.height)
    model_raw.setdefault("width", data.width)
    model_raw.setdefault("in_channels", data.channels)
    model_raw.setdefault("num_classes", episode.way)
    if "conv_widths" in model_raw:
        model_raw["conv_widths"] = tuple(model_raw["conv_widths"])
    model = _build(ModelConfig, model_raw, "model")

    train_raw = dict(raw.get("train", {}))
    lam1 = train_raw.pop("lambda1", None)
    lam2 = train_raw.pop("lambda2", None)
    weights_raw = train_raw.pop("weights", None)
    if weights_raw is not None:
        weights = LossWeights(**weights_raw)
    elif lam1 is not None:
        weights = LossWeights(lambda1=float(lam1),
                              lambda2=float(1.0 - lam1 if lam2 is None else lam2))
    else:
        weights = LossWeights()
    sigma = train_raw.pop("sigma", None)
    kernel_raw = train_raw.pop("kernel", None)
    if kernel_raw is not None:
        kernel = KernelConfig(**kernel_raw)
    elif sigma is not None:
        kernel = KernelConfig(sigma=sigma)
    else:
        kernel = KernelConfig()
    train = _build(TrainConfig, {**train_raw, "weights": weights, "kernel": kernel,
                                 "seed": train_raw.get("seed", raw.get("seed", 0))}, "train")

    cfg = RunConfig(
        seed=int(raw.get("seed", 0)),
        threads=int(raw.get("threads", 1)),
        out_dir=str(raw.get("out_dir", "runs/default")),
        data=data, model=model, episode=episode, train=train,
        eval=_build(EvalConfig, raw.get("eval", {}), "eval"),
    )
    cfg.validate()
    return cfg


def load_run_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {p} must hold a JSON object")
    if overrides:
        for dotted, value in overrides.items():
            if value is None:
                continue
            section = raw
            keys = dotted.split(".")
            for k in keys[:-1]:
                section = section.setdefault(k, {})
            section[keys[-1]] = value
    return run_config_from_dict(raw)


def write_snapshot(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.as_dict(), indent=1, sort_keys=True),
                          encoding="utf-8")
