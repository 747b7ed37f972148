"""Run configuration: nested sections, lossless JSON round-trip, hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import synthdata
from .errors import ConfigError


@dataclass
class ScheduleSection:
    t_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class CorpusSection:
    seeds_per_tuple: int = 10
    reference: list[str] = field(default_factory=lambda: ["star", "red_blue", "hstripes"])
    reference_seeds: int = 5
    # Optional subsets (null = full vocabulary); used by scaled-down runs.
    shapes: list[str] | None = None
    colors: list[str] | None = None
    patterns: list[str] | None = None


@dataclass
class BaseSection:
    steps: int = 3000
    lr: float = 2e-3
    batch_size: int = 12
    p_uncond: float = 0.1
    p_drop_attr: float = 0.15


@dataclass
class PrelearnSection:
    identifier: str = "sks"
    alpha: float = 1.0
    steps: int = 500
    lr: float = 5e-6
    lr_multiplier: float = 100.0
    n_prior: int = 32
    batch_size: int = 4


@dataclass
class AugmentSection:
    target_axis: str = "color"
    n_each: int = 5
    per_prompt: int = 40
    fraction: float = 0.10
    source: str = "template"
    external_url: str = ""


@dataclass
class DualSection:
    steps: int = 1000
    lr: float = 5e-6
    lr_multiplier: float = 100.0
    mode: str = "full"
    m: int = 6
    batch_size: int = 4
    interleave: list[int] = field(default_factory=lambda: [1, 1])


@dataclass
class InferenceSection:
    steps: int = 50
    guidance: float = 7.5
    lam: float = 0.3


@dataclass
class EvalSection:
    seeds_per_condition: int = 64
    lambda_grid: list[float] = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    m_grid: list[int] = field(default_factory=lambda: [4, 8])


@dataclass
class RunConfig:
    seed: int = 0
    image_size: int = 32
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    base: BaseSection = field(default_factory=BaseSection)
    prelearn: PrelearnSection = field(default_factory=PrelearnSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    dual: DualSection = field(default_factory=DualSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        if not (0.0 < self.augment.fraction <= 1.0):
            raise ConfigError("augment.fraction must lie in (0, 1]")
        if self.augment.target_axis not in ("shape", "color", "pattern"):
            raise ConfigError(f"unknown target axis {self.augment.target_axis!r}")
        if self.dual.m < 1:
            raise ConfigError("dual.m must be >= 1")
        if not (0.0 <= self.base.p_uncond < 1.0):
            raise ConfigError("base.p_uncond must lie in [0, 1)")
        if len(self.corpus.reference) != 3:
            raise ConfigError("corpus.reference must be [shape, color, pattern]")
        synthdata.AttributeTuple(*self.corpus.reference)
        if self.dual.mode not in ("full", "embedding-only"):
            raise ConfigError(f"unknown dual.mode {self.dual.mode!r}")
        if self.eval.seeds_per_condition < 2:
            raise ConfigError("eval.seeds_per_condition must be >= 2")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        sections = {
            "schedule": ScheduleSection, "corpus": CorpusSection,
            "base": BaseSection, "prelearn": PrelearnSection,
            "augment": AugmentSection, "dual": DualSection,
            "inference": InferenceSection, "eval": EvalSection,
        }
        kwargs: dict = {}
        for k, v in d.items():
            if k in sections:
                kwargs[k] = sections[k](**v)
            else:
                kwargs[k] = v
        cfg = RunConfig(**kwargs)
        cfg.validate()
        return cfg

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2))

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        return RunConfig.from_dict(json.loads(Path(path).read_text()))

    def section_hash(self, sections: tuple[str, ...]) -> str:
        d = self.to_dict()
        subset = {k: d[k] for k in sections}
        blob = json.dumps(subset, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]
