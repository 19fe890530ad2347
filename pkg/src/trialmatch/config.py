"""Single JSON configuration governing every tunable of the engine."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Union

from .clients import LLM_URL_ENV
from .index.embed import DEFAULT_DIMENSION, EMBED_URL_ENV
from .index.hnsw import DEFAULT_EF_CONSTRUCTION, DEFAULT_EF_SEARCH, DEFAULT_M
from .rank import (
    DEFAULT_BETA,
    DEFAULT_CONTEXT_TOKENS,
    DEFAULT_CRITERIA_PER_TRIAL,
    DEFAULT_TOP_R,
    DEFAULT_TRIAL_CAP,
    AggregationStrategy,
)
from .retrieve import RetrievalConfig
from .transport import DEFAULT_RETRIES, DEFAULT_TIMEOUT


@dataclass(frozen=True)
class Paths:
    corpus_dir: Optional[str] = None
    dictionary: Optional[str] = None
    mock_rules: Optional[str] = None
    index_dir: Optional[str] = None
    output_dir: Optional[str] = None


@dataclass(frozen=True)
class Backends:
    mock_llm: bool = True
    mock_embed: bool = True
    llm_url: Optional[str] = None
    judge_url: Optional[str] = None
    reasoner_url: Optional[str] = None
    augmenter_url: Optional[str] = None
    embed_url: Optional[str] = None
    timeout: float = DEFAULT_TIMEOUT
    llm_retries: int = DEFAULT_RETRIES
    embed_retries: int = DEFAULT_RETRIES
    reasoner_retries: int = DEFAULT_RETRIES
    parallelism: int = 1

    def url_for(self, role: str) -> Optional[str]:
        return getattr(self, f"{role}_url", None) or self.llm_url


@dataclass(frozen=True)
class VectorParams:
    dimension: int = DEFAULT_DIMENSION
    m: int = DEFAULT_M
    ef_construction: int = DEFAULT_EF_CONSTRUCTION
    ef_search: int = DEFAULT_EF_SEARCH
    seed: int = 0


@dataclass(frozen=True)
class EngineConfig:
    paths: Paths = field(default_factory=Paths)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    vectors: VectorParams = field(default_factory=VectorParams)
    backends: Backends = field(default_factory=Backends)
    strategy: AggregationStrategy = AggregationStrategy.WEIGHTED
    beta: float = DEFAULT_BETA
    top_r: int = DEFAULT_TOP_R
    criteria_per_trial: int = DEFAULT_CRITERIA_PER_TRIAL
    criteria_trial_cap: int = DEFAULT_TRIAL_CAP
    context_tokens: int = DEFAULT_CONTEXT_TOKENS
    eval_ks: tuple[int, ...] = (5, 10, 20)
    literal_half_precision: bool = False

    def __post_init__(self):
        object.__setattr__(self, "strategy", AggregationStrategy(self.strategy))
        object.__setattr__(self, "eval_ks", tuple(self.eval_ks))
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.top_r < 1:
            raise ValueError("top_r must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["retrieval"] = self.retrieval.to_dict()
        d["strategy"] = self.strategy.value
        d["eval_ks"] = list(self.eval_ks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key, sub in (("paths", Paths), ("vectors", VectorParams), ("backends", Backends)):
            if key in d:
                d[key] = sub(**d[key])
        if "retrieval" in d:
            d["retrieval"] = RetrievalConfig.from_dict(d["retrieval"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EngineConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def with_environment(self) -> "EngineConfig":
        """Backend URLs from the environment override the file and flags."""
        b = self.backends
        llm = os.environ.get(LLM_URL_ENV) or b.llm_url
        embed = os.environ.get(EMBED_URL_ENV) or b.embed_url
        return replace(self, backends=replace(b, llm_url=llm, embed_url=embed))
