"""Hard-constraint prefiltering and hybrid BM25 + kNN trial retrieval."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .corpus import Sex, Trial, TrialStatus
from .errors import EmptyBundle
from .index.hnsw import HNSWIndex
from .index.lexical import LexicalIndex, lexical_topk
from .patient import PatientProfile, PatientSex, QueryBundle


class FusionMode(str, Enum):
    MINMAX = "minmax"
    RRF = "rrf"


@dataclass(frozen=True)
class RetrievalConfig:
    k_candidates: int = 500
    alpha: float = 0.5  # weight of the lexical arm
    k_arm: int = 1000
    filter_age: bool = True
    filter_sex: bool = True
    filter_status: bool = True
    filter_location: bool = False
    fusion: FusionMode = FusionMode.MINMAX
    rrf_k: int = 60
    use_lexical: bool = True
    use_semantic: bool = True

    def __post_init__(self):
        if not 1 <= self.k_candidates <= self.k_arm:
            raise ValueError("need 1 <= k_candidates <= k_arm")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        object.__setattr__(self, "fusion", FusionMode(self.fusion))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion"] = self.fusion.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RetrievalConfig":
        return cls(**d)


@dataclass(frozen=True)
class RetrievalHit:
    trial_id: str
    lexical_score: float
    semantic_score: float
    fused_score: float
    from_lexical: bool
    from_semantic: bool

    def __post_init__(self):
        if not 0.0 <= self.fused_score <= 1.0:
            raise ValueError(f"fused score {self.fused_score} outside [0, 1]")
        if not (self.from_lexical or self.from_semantic):
            raise ValueError("hit must come from at least one arm")


# ---------------------------------------------------------------------------
# prefilter


def passes_filters(trial: Trial, profile: PatientProfile, config: RetrievalConfig) -> bool:
    if config.filter_age and profile.age_years is not None:
        if trial.min_age_years is not None and profile.age_years < trial.min_age_years:
            return False
        if trial.max_age_years is not None and profile.age_years > trial.max_age_years:
            return False
    if config.filter_sex and profile.sex is not PatientSex.UNKNOWN and trial.sex_eligibility is not Sex.ALL:
        if trial.sex_eligibility.value != profile.sex.value:
            return False
    if config.filter_status and trial.overall_status is not TrialStatus.RECRUITING:
        return False
    if config.filter_location:
        country = profile.location[0].strip().lower() if profile.location else ""
        if country and not any(c.strip().lower() == country for c, _ in trial.locations):
            return False
    return True


def prefilter(trials: Iterable[Trial], profile: PatientProfile, config: RetrievalConfig) -> set[str]:
    """Ids of trials whose demographic and status constraints admit the patient.

    Unknown patient attributes never exclude a trial.
    """
    return {t.nct_id for t in trials if passes_filters(t, profile, config)}


# ---------------------------------------------------------------------------
# arms and fusion


def semantic_arm(
    vectors: np.ndarray, index: HNSWIndex, k: int, allowed: Optional[set[str]] = None
) -> list[tuple[str, float]]:
    """Per-vector kNN, keeping each document's best similarity."""
    best: dict[str, float] = {}
    for v in vectors:
        for doc_id, sim in index.search(v, k, ef=max(index.ef_search, k), allowed=allowed):
            if sim > best.get(doc_id, -np.inf):
                best[doc_id] = sim
    ranked = sorted(best.items(), key=lambda h: (-h[1], h[0]))
    return ranked[:k]


def minmax(hits: Sequence[tuple[str, float]]) -> dict[str, float]:
    if not hits:
        return {}
    scores = [s for _, s in hits]
    lo, hi = min(scores), max(scores)
    if hi == lo:
        return {d: 1.0 for d, _ in hits}
    return {d: (s - lo) / (hi - lo) for d, s in hits}


def fuse(
    lexical: Sequence[tuple[str, float]],
    semantic: Sequence[tuple[str, float]],
    config: RetrievalConfig,
) -> list[RetrievalHit]:
    """Combine two ranked arms; the result is sorted but not truncated."""
    lex_raw = dict(lexical)
    sem_raw = dict(semantic)
    a = config.alpha
    if config.fusion is FusionMode.MINMAX:
        lex_n, sem_n = minmax(lexical), minmax(semantic)
        fused = {d: a * lex_n.get(d, 0.0) + (1 - a) * sem_n.get(d, 0.0) for d in lex_n.keys() | sem_n.keys()}
    else:
        k = config.rrf_k
        lex_rank = {d: i + 1 for i, (d, _) in enumerate(lexical)}
        sem_rank = {d: i + 1 for i, (d, _) in enumerate(semantic)}
        fused = {}
        for d in lex_rank.keys() | sem_rank.keys():
            s = a / (k + lex_rank[d]) if d in lex_rank else 0.0
            s += (1 - a) / (k + sem_rank[d]) if d in sem_rank else 0.0
            fused[d] = min(1.0, (k + 1) * s)
    hits = [
        RetrievalHit(
            trial_id=d,
            lexical_score=lex_raw.get(d, 0.0),
            semantic_score=sem_raw.get(d, 0.0),
            fused_score=min(1.0, max(0.0, f)),
            from_lexical=d in lex_raw,
            from_semantic=d in sem_raw,
        )
        for d, f in fused.items()
    ]
    hits.sort(key=lambda h: (-h.fused_score, h.trial_id))
    return hits


def hybrid_search(
    bundle: QueryBundle,
    lexical_index: LexicalIndex,
    vector_index: Optional[HNSWIndex],
    allowed_ids: Optional[set[str]],
    config: RetrievalConfig = RetrievalConfig(),
) -> list[RetrievalHit]:
    """Fused top ``k_candidates`` trials restricted to ``allowed_ids``."""
    terms = bundle.query_terms()
    vectors = bundle.query_vectors
    if not terms and len(vectors) == 0:
        raise EmptyBundle(f"bundle for {bundle.patient_id} has no query terms and no vectors")
    if allowed_ids is not None and not allowed_ids:
        return []
    lexical: list[tuple[str, float]] = []
    semantic: list[tuple[str, float]] = []
    if config.use_lexical and terms:
        lexical = lexical_topk(lexical_index, terms, config.k_arm, allowed=allowed_ids)
    if config.use_semantic and vector_index is not None and len(vector_index) and len(vectors):
        semantic = semantic_arm(vectors, vector_index, config.k_arm, allowed_ids)
    return fuse(lexical, semantic, config)[: config.k_candidates]


def candidates_jsonl(patient_id: str, hits: Sequence[RetrievalHit]) -> str:
    lines = []
    for rank, h in enumerate(hits, start=1):
        lines.append(
            json.dumps(
                {
                    "patient_id": patient_id,
                    "trial_id": h.trial_id,
                    "lexical_score": h.lexical_score,
                    "semantic_score": h.semantic_score,
                    "fused_score": h.fused_score,
                    "rank": rank,
                },
                sort_keys=True,
            )
        )
    return "".join(line + "\n" for line in lines)
