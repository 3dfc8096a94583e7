"""Run configuration: one JSON document drives the whole pipeline.

Every field has a default; unknown keys are rejected with the offending
key path so typos fail loudly. Flag overrides are applied by the CLI after
parsing (flags win).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, PathError
from .synth import SynthConfig


@dataclass
class StoreSection:
    index: str = "flat"  # flat | ivf
    partitions: int = 0  # 0 -> round(sqrt(N))
    nprobe: int = 0      # 0 -> ceil(partitions / 4)
    iterations: int = 10

    def __post_init__(self):
        if self.index not in ("flat", "ivf"):
            raise ConfigError(f"store.index must be flat or ivf, got {self.index!r}")


@dataclass
class ModelSection:
    dim: int = 64
    bkp_layers: int = 3
    heads: int = 4
    composer_blocks: int = 2
    composer_heads: int = 4
    composer_gain: float = 0.5
    vocab_size: int = 1024
    max_len: int = 32


@dataclass
class TrainSection:
    lr: float = 2e-3
    weight_decay: float = 0.1
    warmup_steps: int = 200
    epochs: int = 30
    batch_size: int = 64
    steps: int = 2000
    tau: float = 100.0
    beta: float = 1.0
    k: int = 16
    alternate_streams: bool = False
    prompt_only_templates: bool = False
    log_every: int = 1
    checkpoint_every: int = 0


@dataclass
class EvalSection:
    alpha: float = 0.5
    k: int = 16
    streams: str = "both"


@dataclass
class RunConfig:
    seed: int = 7
    synth: SynthConfig = field(default_factory=SynthConfig)
    store: StoreSection = field(default_factory=StoreSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build_section(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path}: unknown key {sorted(unknown)[0]!r}")
    return cls(**data)


def parse_config(document: dict) -> RunConfig:
    if not isinstance(document, dict):
        raise ConfigError("config root must be an object")
    sections = {"synth": SynthConfig, "store": StoreSection, "model": ModelSection,
                "train": TrainSection, "eval": EvalSection}
    unknown = set(document) - set(sections) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level key {sorted(unknown)[0]!r}")
    kwargs: dict = {}
    if "seed" in document:
        if not isinstance(document["seed"], int):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = document["seed"]
    for name, cls in sections.items():
        if name in document:
            kwargs[name] = _build_section(cls, document[name], name)
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise PathError(f"config file not found: {path}")
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse failure at line {exc.lineno}: {exc.msg}") from exc
    return parse_config(document)
