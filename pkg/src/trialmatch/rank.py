"""Criterion-level re-ranking, eligibility assessment and composite scoring."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Optional, Protocol, Sequence, TypeVar

from .clients import Judgement, extract_json_object
from .corpus import Criterion, CriterionKind, Trial, clean_text
from .errors import BackendUnavailable, ReasonerMalformedOutput, ReasonerUnavailable
from .index.hnsw import HNSWIndex
from .index.lexical import LexicalIndex, lexical_topk
from .index.tokenize import tokenize
from .patient import PatientProfile, QueryBundle
from .retrieve import RetrievalConfig, RetrievalHit, fuse, semantic_arm

logger = logging.getLogger(__name__)

W_SQRT = 0.7
W_MAX = 0.3
DEFAULT_BETA = 0.7
DEFAULT_TOP_R = 30
DEFAULT_CRITERIA_PER_TRIAL = 30
DEFAULT_TRIAL_CAP = 10
MATCH_THRESHOLD = 0.8
DEFAULT_CONTEXT_TOKENS = 2048


class AggregationStrategy(str, Enum):
    MAX = "MAX"
    MEAN = "MEAN"
    SQRT_NORM = "SQRT_NORM"
    LOG_NORM = "LOG_NORM"
    WEIGHTED = "WEIGHTED"


def aggregate(scores: Sequence[float], strategy: AggregationStrategy) -> float:
    """Combine one trial's criterion relevances; no scores aggregate to 0."""
    n = len(scores)
    if n == 0:
        return 0.0
    total = math.fsum(scores)
    strategy = AggregationStrategy(strategy)
    if strategy is AggregationStrategy.MAX:
        return max(scores)
    if strategy is AggregationStrategy.MEAN:
        return total / n
    if strategy is AggregationStrategy.SQRT_NORM:
        return total / math.sqrt(n)
    if strategy is AggregationStrategy.LOG_NORM:
        return total / math.log1p(n)
    return W_SQRT * (total / math.sqrt(n)) + W_MAX * max(scores)


# ---------------------------------------------------------------------------
# relevance judging


@dataclass(frozen=True)
class CriterionRelevance:
    criterion_id: str
    trial_id: str
    relevance: float
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.relevance <= 1.0:
            raise ValueError(f"relevance {self.relevance} outside [0, 1]")


class Judge(Protocol):
    def judge(self, statement: str, criterion: Criterion, statement_concepts: Iterable[str] = ()) -> Judgement: ...


def judge_relevance(
    patient_statement: str, criterion: Criterion, judge: Judge, statement_concepts: Iterable[str] = ()
) -> CriterionRelevance:
    j = judge.judge(patient_statement, criterion, statement_concepts)
    return CriterionRelevance(criterion.criterion_id, criterion.trial_id, float(j.relevance), j.flags)


T = TypeVar("T")
R = TypeVar("R")


def _map(fn: Callable[[T], R], items: Sequence[T], parallelism: int) -> list[R]:
    # results keep input order whatever the completion order
    if parallelism <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class RerankedTrial:
    trial_id: str
    rerank_score: float
    aggregate: float
    fused_score: float
    judged: tuple[CriterionRelevance, ...] = ()


def retrieve_criteria(
    bundle: QueryBundle,
    candidate_ids: Iterable[str],
    criteria: Mapping[str, Criterion],
    criterion_lexical_index: LexicalIndex,
    criterion_vector_index: Optional[HNSWIndex],
    retrieval: RetrievalConfig = RetrievalConfig(),
    per_trial: int = DEFAULT_CRITERIA_PER_TRIAL,
    trial_cap: int = DEFAULT_TRIAL_CAP,
) -> list[Criterion]:
    """Hybrid search over the candidates' criteria, at most ``trial_cap`` per trial."""
    candidate_ids = set(candidate_ids)
    allowed = {cid for cid, c in criteria.items() if c.trial_id in candidate_ids}
    if not allowed:
        return []
    depth = max(1, per_trial * len(candidate_ids))
    terms = bundle.query_terms()
    lexical = lexical_topk(criterion_lexical_index, terms, depth, allowed=allowed) if terms else []
    semantic = []
    if criterion_vector_index is not None and len(criterion_vector_index) and len(bundle.query_vectors):
        semantic = semantic_arm(bundle.query_vectors, criterion_vector_index, depth, allowed)
    counts: dict[str, int] = {}
    picked: list[Criterion] = []
    for hit in fuse(lexical, semantic, retrieval)[:depth]:
        c = criteria[hit.trial_id]  # fuse() labels documents "trial_id"; here they are criterion ids
        if counts.get(c.trial_id, 0) >= trial_cap:
            continue
        counts[c.trial_id] = counts.get(c.trial_id, 0) + 1
        picked.append(c)
    return picked


def rerank_candidates(
    bundle: QueryBundle,
    candidates: Sequence[RetrievalHit],
    criteria: Mapping[str, Criterion],
    criterion_lexical_index: LexicalIndex,
    criterion_vector_index: Optional[HNSWIndex],
    judge: Judge,
    strategy: AggregationStrategy = AggregationStrategy.WEIGHTED,
    beta: float = DEFAULT_BETA,
    retrieval: RetrievalConfig = RetrievalConfig(),
    per_trial: int = DEFAULT_CRITERIA_PER_TRIAL,
    trial_cap: int = DEFAULT_TRIAL_CAP,
    parallelism: int = 1,
) -> list[RerankedTrial]:
    """Blend aggregated criterion relevance with the first-stage fused score.

    ``rerank = beta * minmax(aggregate) + (1 - beta) * fused``, sorted
    descending with ties by trial id.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if not candidates:
        return []
    retrieved = retrieve_criteria(
        bundle, (h.trial_id for h in candidates), criteria,
        criterion_lexical_index, criterion_vector_index, retrieval, per_trial, trial_cap,
    )
    concepts = tuple(bundle.concept_ids)
    judged = _map(lambda c: judge_relevance(bundle.narrative, c, judge, concepts), retrieved, parallelism)

    by_trial: dict[str, list[CriterionRelevance]] = {}
    for j in judged:
        by_trial.setdefault(j.trial_id, []).append(j)
    aggregates = {h.trial_id: aggregate([j.relevance for j in by_trial.get(h.trial_id, [])], strategy) for h in candidates}
    lo, hi = min(aggregates.values()), max(aggregates.values())
    out = []
    for h in candidates:
        agg = aggregates[h.trial_id]
        norm = 1.0 if hi == lo else (agg - lo) / (hi - lo)
        out.append(
            RerankedTrial(
                trial_id=h.trial_id,
                rerank_score=beta * norm + (1 - beta) * h.fused_score,
                aggregate=agg,
                fused_score=h.fused_score,
                judged=tuple(by_trial.get(h.trial_id, [])),
            )
        )
    out.sort(key=lambda r: (-r.rerank_score, r.trial_id))
    return out


# ---------------------------------------------------------------------------
# eligibility


class Classification(str, Enum):
    MET = "Met"
    NOT_MET = "Not Met"
    VIOLATED = "Violated"
    NOT_VIOLATED = "Not Violated"
    UNCLEAR = "Unclear"
    IRRELEVANT = "Irrelevant"


INCLUSION_LABELS = frozenset({Classification.MET, Classification.NOT_MET, Classification.UNCLEAR, Classification.IRRELEVANT})
EXCLUSION_LABELS = frozenset(
    {Classification.VIOLATED, Classification.NOT_VIOLATED, Classification.UNCLEAR, Classification.IRRELEVANT}
)
DECISIVE = frozenset({Classification.MET, Classification.NOT_MET, Classification.VIOLATED, Classification.NOT_VIOLATED})
_WEIGHT = {
    Classification.MET: 1,
    Classification.NOT_MET: -1,
    Classification.NOT_VIOLATED: 1,
    Classification.VIOLATED: -1,
}


class FinalDecision(str, Enum):
    ELIGIBLE = "Eligible"
    LIKELY_ELIGIBLE = "Likely Eligible"
    LIKELY_INELIGIBLE = "Likely Ineligible"
    INELIGIBLE = "Ineligible"


@dataclass(frozen=True)
class CriterionVerdict:
    criterion_id: str
    kind: CriterionKind
    classification: Classification
    justification: str = ""

    def __post_init__(self):
        allowed = INCLUSION_LABELS if self.kind is CriterionKind.INCLUSION else EXCLUSION_LABELS
        if self.classification not in allowed:
            raise ValueError(f"{self.classification.value} is not valid for {self.kind.value}")
        if self.classification in DECISIVE and not self.justification.strip():
            raise ValueError(f"{self.classification.value} verdict needs a justification")

    def to_dict(self) -> dict:
        return {
            "criterion_id": self.criterion_id,
            "kind": self.kind.value,
            "classification": self.classification.value,
            "justification": self.justification,
        }


def compute_composite(verdicts: Iterable[CriterionVerdict]) -> tuple[Fraction, Fraction, Fraction]:
    """(S_inc, S_exc, S) with unit weights; Unclear/Irrelevant verdicts are ignored.

    A side with no decisive verdicts drops out of S; with none on either
    side every score is 0.
    """
    verdicts = list(verdicts)
    inc = [_WEIGHT[v.classification] for v in verdicts if v.kind is CriterionKind.INCLUSION and v.classification in _WEIGHT]
    exc = [_WEIGHT[v.classification] for v in verdicts if v.kind is CriterionKind.EXCLUSION and v.classification in _WEIGHT]
    s_inc = Fraction(sum(inc), len(inc)) if inc else Fraction(0)
    s_exc = Fraction(sum(exc), len(exc)) if exc else Fraction(0)
    if inc and exc:
        s = (s_inc + s_exc) / 2
    elif inc:
        s = s_inc
    elif exc:
        s = s_exc
    else:
        s = Fraction(0)
    return s_inc, s_exc, s


@dataclass
class EligibilityAssessment:
    trial_id: str
    patient_id: str
    verdicts: list[CriterionVerdict]
    recap: str = ""
    final_decision: Optional[FinalDecision] = None
    s_inc: Fraction = Fraction(0)
    s_exc: Fraction = Fraction(0)
    s_composite: Fraction = Fraction(0)
    rerank_score: float = 0.0
    degraded: bool = False
    diagnostics: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "patient_id": self.patient_id,
            "s_inc": str(self.s_inc),
            "s_exc": str(self.s_exc),
            "s_composite": str(self.s_composite),
            "s_composite_value": float(self.s_composite),
            "rerank_score": self.rerank_score,
            "final_decision": self.final_decision.value if self.final_decision else None,
            "recap": self.recap,
            "degraded": self.degraded,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "diagnostics": self.diagnostics,
        }


_LABEL_KEYS = {c.value.lower(): c for c in Classification}


def _classification(raw) -> Optional[Classification]:
    if not isinstance(raw, str):
        return None
    key = " ".join(raw.replace("*", "").replace("_", " ").split()).lower()
    return _LABEL_KEYS.get(key)


def _decision(raw) -> Optional[FinalDecision]:
    if not isinstance(raw, str):
        return None
    key = " ".join(raw.replace("*", "").split()).lower()
    for d in FinalDecision:
        if d.value.lower() == key:
            return d
    return None


def token_overlap(a: str, b: str) -> float:
    """Shared distinct tokens over the larger token set."""
    ta, tb = set(tokenize(a)), set(tokenize(b))
    if not ta or not tb:
        return 0.0
    return len(ta & tb) / max(len(ta), len(tb))


def match_criterion(text: str, pool: Sequence[Criterion]) -> Optional[Criterion]:
    """Exact (cleaned) text match, else best token overlap at or above the threshold."""
    cleaned = clean_text(text)
    for c in pool:
        if c.text == cleaned:
            return c
    best, best_score = None, 0.0
    for c in pool:
        score = token_overlap(cleaned, c.text)
        if score > best_score:
            best, best_score = c, score
    return best if best_score >= MATCH_THRESHOLD else None


@dataclass
class ParsedResponse:
    verdicts: dict[str, CriterionVerdict]
    recap: str
    final_decision: Optional[FinalDecision]
    diagnostics: list[dict]


_SECTIONS = (
    ("Inclusion_Criteria_Evaluation", CriterionKind.INCLUSION),
    ("Exclusion_Criteria_Evaluation", CriterionKind.EXCLUSION),
)


def parse_eligibility_response(text: str, trial: Trial) -> Optional[ParsedResponse]:
    """Parse the reasoner JSON against ``trial``; ``None`` if the shape is unusable."""
    obj = extract_json_object(text)
    if obj is None:
        return None
    sections = {key: obj.get(key) for key, _ in _SECTIONS}
    if all(v is None for v in sections.values()) or any(v is not None and not isinstance(v, list) for v in sections.values()):
        return None

    diagnostics: list[dict] = []
    verdicts: dict[str, CriterionVerdict] = {}
    for key, kind in _SECTIONS:
        pool = [c for c in trial.criteria if c.kind is kind]
        allowed = INCLUSION_LABELS if kind is CriterionKind.INCLUSION else EXCLUSION_LABELS
        for item in sections[key] or []:
            if not isinstance(item, dict) or not isinstance(item.get("Criterion"), str):
                diagnostics.append({"flag": "malformed_item", "section": key})
                continue
            criterion = match_criterion(item["Criterion"], pool)
            if criterion is None:
                diagnostics.append({"flag": "unmatched_criterion", "text": item["Criterion"]})
                continue
            if criterion.criterion_id in verdicts:
                diagnostics.append({"flag": "duplicate_verdict", "criterion_id": criterion.criterion_id})
                continue
            label = _classification(item.get("Classification"))
            if label not in allowed:
                diagnostics.append(
                    {"flag": "invalid_classification", "criterion_id": criterion.criterion_id, "value": item.get("Classification")}
                )
                label = Classification.UNCLEAR
            justification = item.get("Justification") if isinstance(item.get("Justification"), str) else ""
            if label in DECISIVE and not justification.strip():
                diagnostics.append({"flag": "missing_justification", "criterion_id": criterion.criterion_id})
                label = Classification.UNCLEAR
            verdicts[criterion.criterion_id] = CriterionVerdict(criterion.criterion_id, kind, label, justification)

    recap = obj.get("Recap") if isinstance(obj.get("Recap"), str) else ""
    decision = _decision(obj.get("Final Decision"))
    if decision is None:
        diagnostics.append({"flag": "invalid_final_decision", "value": obj.get("Final Decision")})
    return ParsedResponse(verdicts, recap, decision, diagnostics)


class Reasoner(Protocol):
    def reason(self, profile: PatientProfile, trial: Trial, patient_block: str) -> str: ...


def patient_block(
    profile: PatientProfile,
    bundle: Optional[QueryBundle] = None,
    relevant: Sequence[Criterion] = (),
    max_tokens: int = DEFAULT_CONTEXT_TOKENS,
) -> str:
    """Narrative followed by expanded sentences and judged-relevant criteria, within a token budget."""
    parts = [profile.narrative]
    if bundle is not None:
        narrative_lines = set(profile.narrative.splitlines())
        extra = [s for s in bundle.expanded_sentences if s not in narrative_lines]
        if extra:
            parts.append("Additional statements:\n" + "\n".join(extra))
    if relevant:
        parts.append("Relevant trial criteria:\n" + "\n".join(c.text for c in relevant))
    words = "\n\n".join(p for p in parts if p).split(" ")
    if len(words) > max_tokens:
        words = words[:max_tokens]
    return " ".join(words)


def assess_eligibility(
    profile: PatientProfile,
    bundle: Optional[QueryBundle],
    trial: Trial,
    reasoner: Reasoner,
    retries: int = 2,
    relevant: Sequence[Criterion] = (),
    rerank_score: float = 0.0,
    context_tokens: int = DEFAULT_CONTEXT_TOKENS,
    strict: bool = False,
) -> EligibilityAssessment:
    """Classify every criterion of ``trial`` through ``reasoner`` and score it.

    Unparseable output is retried; after ``retries + 1`` failures every
    criterion is Unclear and the assessment is marked degraded (or, with
    ``strict``, :class:`ReasonerMalformedOutput` is raised).
    """
    if not trial.criteria:
        raise ValueError(f"{trial.nct_id} has no criteria to assess")
    block = patient_block(profile, bundle, relevant, context_tokens)
    parsed = None
    for attempt in range(retries + 1):
        try:
            text = reasoner.reason(profile, trial, block)
        except BackendUnavailable as exc:
            raise ReasonerUnavailable(str(exc)) from exc
        parsed = parse_eligibility_response(text, trial)
        if parsed is not None:
            break
        logger.warning("reasoner output for %s unparseable (attempt %d)", trial.nct_id, attempt + 1)

    if parsed is None:
        if strict:
            raise ReasonerMalformedOutput(f"{trial.nct_id}: no valid response after {retries + 1} attempts")
        verdicts = [CriterionVerdict(c.criterion_id, c.kind, Classification.UNCLEAR) for c in trial.criteria]
        return EligibilityAssessment(
            trial.nct_id, profile.patient_id, verdicts,
            rerank_score=rerank_score, degraded=True,
            diagnostics=[{"flag": "malformed_response", "attempts": retries + 1}],
        )

    verdicts = []
    diagnostics = list(parsed.diagnostics)
    for c in trial.criteria:
        v = parsed.verdicts.get(c.criterion_id)
        if v is None:
            diagnostics.append({"flag": "criterion_not_assessed", "criterion_id": c.criterion_id})
            v = CriterionVerdict(c.criterion_id, c.kind, Classification.UNCLEAR)
        verdicts.append(v)
    s_inc, s_exc, s = compute_composite(verdicts)
    return EligibilityAssessment(
        trial.nct_id, profile.patient_id, verdicts,
        recap=parsed.recap, final_decision=parsed.final_decision,
        s_inc=s_inc, s_exc=s_exc, s_composite=s,
        rerank_score=rerank_score, diagnostics=diagnostics,
    )


def final_rank(assessments: Iterable[EligibilityAssessment]) -> list[tuple[str, Fraction]]:
    """Order by composite score, then re-rank score, then trial id."""
    ordered = sorted(assessments, key=lambda a: (-a.s_composite, -a.rerank_score, a.trial_id))
    return [(a.trial_id, a.s_composite) for a in ordered]
