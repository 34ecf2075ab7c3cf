"""Layered run configuration: defaults <- JSON file <- command-line overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .model import ModelConfig
from .pipeline import DetectorConfig
from .scene_synth import SynthConfig
from .trainer import TrainConfig


def desk_train_config() -> TrainConfig:
    # desk-scale budget: two-scene micro-batches, raised learning rate
    return TrainConfig(lr=3e-3, epochs=30, batch_size=2, accumulation=4)


def overfit_model_config() -> ModelConfig:
    return ModelConfig()


def overfit_train_config() -> TrainConfig:
    """Budget for fitting 200 training scenes in 30 epochs."""
    return desk_train_config()


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=desk_train_config)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    num_scenes: int = 250
    seed: int = 0
    eps: float = 1e-5
    iou_thresh: float = 0.5
    ks: tuple[int, ...] = (20, 50, 100)
    k_grid: tuple[int, int, int] = (0, 150, 5)  # start, stop (inclusive), stride
    dcs_metric: str = "F1@100"
    dcs_smooth: bool = False
    proposals: int = 100
    expand_predicates: bool = False
    ablate_epochs: int = 3
    ablate_scenes: int = 60
    dataset_dir: str | None = None
    checkpoint: str | None = None

    def grid(self) -> list[int]:
        start, stop, step = self.k_grid
        return list(range(start, stop + 1, step))

    def to_dict(self) -> dict:
        return asdict(self)

    def seeded(self, seed: int) -> "RunConfig":
        """Propagate the global seed into every component that draws random numbers."""
        return replace(
            self,
            seed=seed,
            train=replace(self.train, seed=seed),
            detector=replace(self.detector, seed=seed * 7 + 11, render_seed=seed * 13 + 5),
        )


_SECTIONS = {"synth": SynthConfig, "model": ModelConfig, "train": TrainConfig, "detector": DetectorConfig}


def _build(cls, values: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    if hasattr(cls, "from_dict"):
        return cls.from_dict(values)
    return cls(**values)


def merge(base: RunConfig, overrides: dict) -> RunConfig:
    updates = {}
    for key, val in overrides.items():
        if key in _SECTIONS:
            current = asdict(getattr(base, key))
            current.update(val)
            updates[key] = _build(_SECTIONS[key], current)
        elif key in {f.name for f in fields(RunConfig)}:
            updates[key] = tuple(val) if isinstance(val, list) else val
        else:
            raise ValueError(f"unknown config key {key!r}")
    return replace(base, **updates)


def load_config(path: str | Path | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    with open(path) as fh:
        return merge(cfg, json.load(fh))
