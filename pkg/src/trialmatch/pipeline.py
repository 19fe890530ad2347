"""End-to-end orchestration: ingest, index, match."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .clients import (
    HttpChatClient,
    HttpJudge,
    HttpReasoner,
    LlmAugmenter,
    MockAugmenter,
    MockJudge,
    MockReasoner,
    MockRuleSet,
)
from .config import EngineConfig
from .errors import DuplicateDocId
from .corpus import Criterion, Trial, dump_trials, iter_trial_files, load_trials, parse_trial_xml
from .index.embed import HttpEmbedder, MockEmbedder
from .index.hnsw import HNSWIndex
from .index.lexical import IndexLevel, build_lexical_index
from .index.store import load_indices, save_indices
from .normalize import ConceptDictionary, Diagnostics, EntityMention, annotate_trial
from .patient import PatientProfile, QueryBundle, annotate_profile, expand_query
from .rank import EligibilityAssessment, RerankedTrial, assess_eligibility, final_rank, rerank_candidates, _map
from .retrieve import hybrid_search, prefilter

logger = logging.getLogger(__name__)

TRIALS_FILE = "trials.json"
DICTIONARY_FILE = "dictionary.ndjson"
RULES_FILE = "mock_rules.json"


def ingest(corpus_dir: Path, dictionary: Optional[ConceptDictionary] = None, diagnostics: Optional[Diagnostics] = None) -> list[Trial]:
    """Parse every XML record in ``corpus_dir`` (sorted by file name) and annotate it."""
    trials = []
    seen: set[str] = set()
    for path in iter_trial_files(corpus_dir):
        trial = parse_trial_xml(path.read_bytes())
        if trial.nct_id in seen:
            raise DuplicateDocId(f"duplicate nct_id {trial.nct_id} in {path.name}")
        seen.add(trial.nct_id)
        if dictionary is not None:
            trial = annotate_trial(trial, dictionary, diagnostics)
        trials.append(trial)
    return trials


def enrichment_terms(entities: Iterable[EntityMention], synonyms: Iterable[str]) -> list[str]:
    labels = [m.concept_label for m in entities if m.concept_label]
    return list(dict.fromkeys([*labels, *synonyms]))


def make_embedder(config: EngineConfig):
    v = config.vectors
    if config.backends.mock_embed:
        return MockEmbedder(v.dimension, seed=v.seed)
    b = config.backends
    return HttpEmbedder(v.dimension, url=b.embed_url, retries=b.embed_retries, timeout=b.timeout)


def _vector_index(ids: Sequence[str], vectors: np.ndarray, config: EngineConfig) -> HNSWIndex:
    v = config.vectors
    index = HNSWIndex(v.dimension, m=v.m, ef_construction=v.ef_construction, ef_search=v.ef_search, seed=v.seed)
    for doc_id, vec in zip(ids, vectors):
        index.insert(doc_id, vec)
    index.finalize()
    return index


def build_indices(trials: Sequence[Trial], embedder, config: EngineConfig) -> dict:
    """Lexical and vector indices at trial and criterion level."""
    trial_docs = [(t.nct_id, t.document_text(), enrichment_terms(t.entities, t.synonyms)) for t in trials]
    criteria = [c for t in trials for c in t.criteria]
    crit_docs = [(c.criterion_id, c.text, enrichment_terms(c.entities, c.synonyms)) for c in criteria]
    trial_vecs = embedder.embed_many([text for _, text, _ in trial_docs]) if trial_docs else np.zeros((0, embedder.dimension))
    crit_vecs = embedder.embed_many([c.text for c in criteria]) if criteria else np.zeros((0, embedder.dimension))
    return {
        "trial_lexical": build_lexical_index(trial_docs, IndexLevel.TRIAL),
        "criterion_lexical": build_lexical_index(crit_docs, IndexLevel.CRITERION),
        "trial_vectors": _vector_index([d for d, _, _ in trial_docs], trial_vecs, config),
        "criterion_vectors": _vector_index([c.criterion_id for c in criteria], crit_vecs, config),
    }


@dataclass
class Engine:
    """Loaded indices plus the backends selected by the configuration."""

    config: EngineConfig
    trials: dict[str, Trial]
    indices: dict
    dictionary: ConceptDictionary = field(default_factory=ConceptDictionary)
    rules: MockRuleSet = field(default_factory=MockRuleSet)

    @classmethod
    def open(cls, index_dir: Path, config: EngineConfig) -> "Engine":
        index_dir = Path(index_dir)
        trials = load_trials(index_dir / TRIALS_FILE)
        dict_path = Path(config.paths.dictionary) if config.paths.dictionary else index_dir / DICTIONARY_FILE
        dictionary = ConceptDictionary.from_ndjson(dict_path) if dict_path.exists() else ConceptDictionary()
        rules_path = Path(config.paths.mock_rules) if config.paths.mock_rules else index_dir / RULES_FILE
        rules = MockRuleSet.from_file(rules_path) if rules_path.exists() else MockRuleSet.from_entities(trials)
        return cls(config, {t.nct_id: t for t in trials}, load_indices(index_dir), dictionary, rules)

    def __post_init__(self):
        self.criteria: dict[str, Criterion] = {c.criterion_id: c for t in self.trials.values() for c in t.criteria}
        b = self.config.backends
        self.embedder = make_embedder(self.config)
        if b.mock_llm:
            self.judge = MockJudge()
            self.reasoner = MockReasoner(self.rules, self.dictionary)
            self.augmenter = MockAugmenter(self.dictionary)
        else:
            self.judge = HttpJudge(HttpChatClient(b.url_for("judge")), retries=b.llm_retries, timeout=b.timeout)
            self.reasoner = HttpReasoner(HttpChatClient(b.url_for("reasoner")), retries=b.reasoner_retries, timeout=b.timeout)
            self.augmenter = LlmAugmenter(HttpChatClient(b.url_for("augmenter")), retries=b.llm_retries, timeout=b.timeout)

    def prepare(self, profile: PatientProfile, diagnostics: Optional[Diagnostics] = None) -> tuple[PatientProfile, QueryBundle]:
        profile = annotate_profile(profile, self.dictionary, diagnostics)
        return profile, expand_query(profile, self.augmenter, self.embedder)

    def retrieve(self, profile: PatientProfile, bundle: QueryBundle):
        cfg = self.config.retrieval
        allowed = prefilter(self.trials.values(), profile, cfg)
        return hybrid_search(bundle, self.indices["trial_lexical"], self.indices["trial_vectors"], allowed, cfg)

    def rerank(self, bundle: QueryBundle, hits) -> list[RerankedTrial]:
        c = self.config
        return rerank_candidates(
            bundle, hits, self.criteria,
            self.indices["criterion_lexical"], self.indices["criterion_vectors"], self.judge,
            strategy=c.strategy, beta=c.beta, retrieval=c.retrieval,
            per_trial=c.criteria_per_trial, trial_cap=c.criteria_trial_cap,
            parallelism=c.backends.parallelism,
        )

    def assess(self, profile: PatientProfile, bundle: QueryBundle, reranked: Sequence[RerankedTrial]) -> list[EligibilityAssessment]:
        c = self.config

        def one(r: RerankedTrial) -> EligibilityAssessment:
            relevant = [self.criteria[j.criterion_id] for j in r.judged if j.relevance > 0]
            return assess_eligibility(
                profile, bundle, self.trials[r.trial_id], self.reasoner,
                retries=c.backends.reasoner_retries, relevant=relevant,
                rerank_score=r.rerank_score, context_tokens=c.context_tokens,
            )

        top = [r for r in reranked[: c.top_r] if self.trials[r.trial_id].criteria]
        return _map(one, top, c.backends.parallelism)

    def match_with_candidates(self, profile: PatientProfile) -> tuple[dict, list]:
        """Full pipeline for one patient: the JSON-ready report and the retrieval hits."""
        diagnostics = Diagnostics()
        profile, bundle = self.prepare(profile, diagnostics)
        if bundle.is_empty:
            hits, reranked, assessments = [], [], []
        else:
            hits = self.retrieve(profile, bundle)
            reranked = self.rerank(bundle, hits)
            assessments = self.assess(profile, bundle, reranked)
        return build_report(profile, hits, reranked, assessments, diagnostics), hits

    def match(self, profile: PatientProfile) -> dict:
        return self.match_with_candidates(profile)[0]


def build_report(profile, hits, reranked, assessments, diagnostics: Diagnostics) -> dict:
    by_id = {a.trial_id: a for a in assessments}
    fused = {h.trial_id: h for h in hits}
    ordered = [tid for tid, _ in final_rank(assessments)]
    ordered += [r.trial_id for r in reranked if r.trial_id not in by_id]
    rerank_by_id = {r.trial_id: r for r in reranked}
    ranking = []
    for rank, tid in enumerate(ordered, start=1):
        a = by_id.get(tid)
        r = rerank_by_id[tid]
        entry = {
            "rank": rank,
            "trial_id": tid,
            "assessed": a is not None,
            "score": 2.0 + float(a.s_composite) if a else r.rerank_score,
            "rerank_score": r.rerank_score,
            "criterion_aggregate": r.aggregate,
            "fused_score": fused[tid].fused_score,
            "lexical_score": fused[tid].lexical_score,
            "semantic_score": fused[tid].semantic_score,
        }
        if a is not None:
            entry["assessment"] = a.to_dict()
        ranking.append(entry)
    return {
        "patient_id": profile.patient_id,
        "candidates": len(hits),
        "assessed": len(assessments),
        "ranking": ranking,
        "diagnostics": {
            "normalization": diagnostics.records,
            "degraded_assessments": sorted(a.trial_id for a in assessments if a.degraded),
            "judge_flags": sorted({f for r in reranked for j in r.judged for f in j.flags}),
        },
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def index_corpus(
    trials: Sequence[Trial],
    index_dir: Path,
    config: EngineConfig,
    dictionary: Optional[ConceptDictionary] = None,
    rules: Optional[MockRuleSet] = None,
) -> dict:
    """Build and persist all indices, plus the trials and resources the matcher reloads."""
    index_dir = Path(index_dir)
    embedder = make_embedder(config)
    indices = build_indices(trials, embedder, config)
    meta = {"trials": len(trials), "criteria": sum(len(t.criteria) for t in trials), "embedder_dimension": embedder.dimension}
    save_indices(index_dir, indices, meta)
    (index_dir / TRIALS_FILE).write_text(dump_trials(trials), encoding="utf-8")
    if dictionary is not None:
        (index_dir / DICTIONARY_FILE).write_text(dictionary.to_ndjson(), encoding="utf-8")
    if rules is not None:
        (index_dir / RULES_FILE).write_text(json.dumps(rules.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return indices
