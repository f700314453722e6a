"""Run configuration: one JSON file with optional sections, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .numerics import ConfigError


def _from_dict(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    obj = cls(**raw)
    obj.validate()
    return obj


@dataclass
class SynthConfig:
    n_users: int = 200
    n_items: int = 2000
    n_categories: int = 20
    seq_len: int = 100
    interests_per_user: int = 3
    persistence: float = 0.8
    seed: int = 0
    # zipf exponent of item popularity inside a category
    popularity_alpha: float = 1.0
    # interest weights follow 1 / rank**interest_skew; 0 means uniform
    interest_skew: float = 0.0
    # events per session; each session draws one active interest
    session_len: int = 1
    # latent item styles; a user's preferred style drifts every style_period events
    n_styles: int = 1
    style_fidelity: float = 0.0
    style_period: int = 0
    # assign styles by popularity tier (head items first) instead of at random
    style_by_popularity: bool = False
    # latent item brands; each user keeps one fixed preferred brand per category
    n_brands: int = 1
    brand_fidelity: float = 0.0

    def validate(self):
        if min(self.n_users, self.n_items, self.n_categories, self.seq_len) < 1:
            raise ConfigError("n_users, n_items, n_categories and seq_len must be positive")
        if self.n_items < self.n_categories:
            raise ConfigError("n_items must be at least n_categories")
        if not 1 <= self.interests_per_user <= self.n_categories:
            raise ConfigError(
                f"interests_per_user={self.interests_per_user} must lie in [1, n_categories={self.n_categories}]")
        if not 0.0 <= self.persistence <= 1.0:
            raise ConfigError(f"persistence must lie in [0, 1], got {self.persistence}")
        if self.persistence < 1.0 and self.interests_per_user == self.n_categories:
            raise ConfigError("persistence < 1 needs at least one non-interest category")
        if self.session_len < 1 or self.n_styles < 1 or self.style_period < 0:
            raise ConfigError("session_len and n_styles must be >= 1, style_period >= 0")
        if not 0.0 <= self.style_fidelity <= 1.0:
            raise ConfigError("style_fidelity must lie in [0, 1]")
        if self.n_brands < 1 or not 0.0 <= self.brand_fidelity <= 1.0:
            raise ConfigError("n_brands must be >= 1 and brand_fidelity must lie in [0, 1]")


@dataclass
class SequenceConfig:
    max_long: int = 2000
    short_len: int = 100
    # the most recent short_len events also belong to the long sequence
    short_in_long: bool = True

    def validate(self):
        if self.max_long < 1 or self.short_len < 1:
            raise ConfigError("max_long and short_len must be >= 1")


@dataclass
class ModelConfig:
    d: int = 32
    heads: int = 2
    tower_hidden: int = 64
    positional: bool = False
    # "target" (query = pooled short-term vector) or "self" (MHSA + pooling, no query)
    long_encoder: str = "target"

    def validate(self):
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.long_encoder not in ("target", "self"):
            raise ConfigError(f"long_encoder must be 'target' or 'self', got {self.long_encoder!r}")


@dataclass
class TrainingConfig:
    alpha: float = 0.5
    beta: float = 0.5
    lr: float = 0.005
    batch_size: int = 64
    n_negatives: int = 64
    epochs: int = 10
    seed: int = 0
    short_global_negatives: bool = False
    max_samples_per_user: int = 0
    # train only on clicks whose item is new to the user, like the held-out clicks
    novel_positives: bool = True

    def validate(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ConfigError(f"need alpha, beta >= 0 and alpha + beta > 0, got {self.alpha}, {self.beta}")
        if self.lr < 0 or self.batch_size < 1 or self.n_negatives < 1 or self.epochs < 0:
            raise ConfigError("lr >= 0, batch_size >= 1, n_negatives >= 1, epochs >= 0 required")


@dataclass
class PginConfig:
    d: int = 32
    heads: int = 2
    hidden: int = 64
    rank_buckets: int = 16
    freq_buckets: int = 8
    lr: float = 0.005
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    max_samples_per_user: int = 0

    def validate(self):
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr >= 0, batch_size >= 1, epochs >= 0 required")


@dataclass
class RetrievalConfig:
    k: int = 4
    n_total: int = 200
    mode: str = "exact"
    nprobe: int = 0  # 0 probes every list
    quota: bool = True
    workers: int = 1

    def validate(self):
        if self.k < 0 or self.n_total < 1:
            raise ConfigError("k >= 0 and n_total >= 1 required")
        if self.mode not in ("exact", "ivf"):
            raise ConfigError(f"mode must be 'exact' or 'ivf', got {self.mode!r}")
        if self.nprobe < 0 or self.workers < 1:
            raise ConfigError("nprobe >= 0 and workers >= 1 required")


@dataclass
class EvalConfig:
    cutoffs: list = field(default_factory=lambda: [50, 100, 200])
    variants: list = field(default_factory=lambda: ["ulim", "ulim-half-sequence", "ulim-self-attention",
                                                    "short-only-baseline"])
    k_values: list = field(default_factory=lambda: [1, 2, 4, 8])
    seeds: list = field(default_factory=lambda: [0])

    def validate(self):
        if not self.cutoffs or min(self.cutoffs) < 1:
            raise ConfigError("cutoffs must be a non-empty list of positive integers")
        from .evalharness import VARIANTS

        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variants {bad}; choose from {list(VARIANTS)}")


SECTIONS = {
    "data": SynthConfig,
    "sequence": SequenceConfig,
    "model": ModelConfig,
    "train": TrainingConfig,
    "pgin": PginConfig,
    "retrieval": RetrievalConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    sequence: SequenceConfig = field(default_factory=SequenceConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainingConfig = field(default_factory=TrainingConfig)
    pgin: PginConfig = field(default_factory=PginConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        unknown = sorted(set(raw) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections {unknown}; allowed: {sorted(SECTIONS)}")
        return cls(**{name: _from_dict(SECTIONS[name], raw[name], name) for name in raw})

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def section_from_dict(cls, raw: dict):
    return _from_dict(cls, raw, cls.__name__)
