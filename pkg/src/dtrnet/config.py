"""Run configuration documents: ``model``, ``train``, ``data``, ``analyze`` and ``output_dir``."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import CorpusDataset, SyntheticTask, load_corpus
from .errors import ConfigError
from .model import ModelConfig
from .objective import TrainConfig
from .routing import RoutingConfig

SECTIONS = ("model", "train", "data", "analyze", "output_dir")


@dataclass
class DataConfig:
    task: str = "copy"  # "copy" or "induction"; ignored when corpus is set
    alphabet: int = 16
    corpus: str | None = None
    eval_corpus: str | None = None
    eval_examples: int = 256
    eval_seed: int = 999

    def __post_init__(self):
        if self.corpus is None:
            SyntheticTask(self.task, 33, self.alphabet)  # validates kind and alphabet
        if self.eval_examples <= 0:
            raise ConfigError("data.eval_examples must be positive")


@dataclass
class AnalyzeConfig:
    lengths: list[int] = field(default_factory=lambda: [512 * 2**k for k in range(7)])
    k: float = 0.1
    pattern: str | None = None
    bytes_per_element: int = 2

    def __post_init__(self):
        if not self.lengths or any(n <= 0 for n in self.lengths):
            raise ConfigError("analyze.lengths must be positive integers")
        if not 0.0 <= self.k <= 1.0:
            raise ConfigError("analyze.k must lie in [0, 1]")


def _check_keys(data: Any, cls, path: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key: {path}.{key}")


def _build(cls, data: dict, path: str):
    _check_keys(data, cls, path)
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    analyze: AnalyzeConfig = field(default_factory=AnalyzeConfig)
    output_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        for key in doc:
            if key not in SECTIONS:
                raise ConfigError(f"unknown config key: {key}")
        model = dict(doc.get("model", {}))
        _check_keys(model, ModelConfig, "model")
        if "routing" in model:
            model["routing"] = _build(RoutingConfig, model["routing"], "model.routing")
        return cls(
            model=_build(ModelConfig, model, "model"),
            train=_build(TrainConfig, doc.get("train", {}), "train"),
            data=_build(DataConfig, doc.get("data", {}), "data"),
            analyze=_build(AnalyzeConfig, doc.get("analyze", {}), "analyze"),
            output_dir=str(doc.get("output_dir", "runs/default")),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text(encoding="utf-8")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write_resolved(self, directory) -> Path:
        path = Path(directory) / "resolved-config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self, model=dataclasses.replace(self.model, seed=seed), train=dataclasses.replace(self.train, seed=seed)
        )

    # -- datasets

    def train_dataset(self):
        if self.data.corpus:
            return CorpusDataset(load_corpus(self.data.corpus, self.train.seq_len))
        return SyntheticTask(self.data.task, self.train.seq_len, self.data.alphabet)

    def eval_examples(self, corpus: str | None = None) -> list:
        path = corpus or self.data.eval_corpus or self.data.corpus
        if path:
            examples = load_corpus(path, self.train.seq_len)
            if not examples:
                raise ConfigError(f"{path} yields no complete window of {self.train.seq_len} bytes")
            return examples[: self.data.eval_examples]
        task = SyntheticTask(self.data.task, self.train.seq_len, self.data.alphabet)
        return task.fixed(self.data.eval_examples, self.data.eval_seed)
