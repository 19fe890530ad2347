import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trialmatch.corpus import Sex, Trial, TrialStatus
from trialmatch.errors import EmptyBundle
from trialmatch.index.embed import MockEmbedder
from trialmatch.index.hnsw import HNSWIndex
from trialmatch.index.lexical import IndexLevel, build_lexical_index, lexical_topk
from trialmatch.patient import PatientProfile, PatientSex, QueryBundle
from trialmatch.retrieve import (
    FusionMode,
    RetrievalConfig,
    RetrievalHit,
    candidates_jsonl,
    fuse,
    hybrid_search,
    minmax,
    passes_filters,
    prefilter,
)


def trial(nct="NCT1", lo=18, hi=75, sex=Sex.ALL, status=TrialStatus.RECRUITING, locations=()):
    return Trial(nct, min_age_years=lo, max_age_years=hi, sex_eligibility=sex, overall_status=status, locations=locations)


ADULT_WOMAN = PatientProfile("p", age_years=55, sex=PatientSex.FEMALE)


def test_prefilter_examples():
    cfg = RetrievalConfig()
    assert prefilter([trial()], ADULT_WOMAN, cfg) == {"NCT1"}
    assert prefilter([trial(sex=Sex.MALE)], ADULT_WOMAN, cfg) == set()
    assert prefilter([trial(lo=60)], PatientProfile("p", sex=PatientSex.FEMALE), cfg) == {"NCT1"}


AGES = [None, 10.0, 18.0, 55.0, 75.0, 90.0]
BOUNDS = [(None, None), (18, None), (None, 75), (18, 75), (60, 80)]
SEXES = list(Sex)
PSEXES = list(PatientSex)
STATUSES = [TrialStatus.RECRUITING, TrialStatus.COMPLETED, TrialStatus.WITHDRAWN, TrialStatus.OTHER]


def expected_pass(age, bounds, tsex, psex, status, country, tcountries, cfg):
    lo, hi = bounds
    age_ok = not cfg.filter_age or age is None or ((lo is None or age >= lo) and (hi is None or age <= hi))
    sex_ok = not cfg.filter_sex or tsex is Sex.ALL or psex is PatientSex.UNKNOWN or tsex.value == psex.value
    status_ok = not cfg.filter_status or status is TrialStatus.RECRUITING
    loc_ok = not cfg.filter_location or not country or country in tcountries
    return age_ok and sex_ok and status_ok and loc_ok


def test_prefilter_truth_table():
    configs = [
        RetrievalConfig(filter_age=a, filter_sex=s, filter_status=t, filter_location=loc)
        for a, s, t, loc in itertools.product([True, False], repeat=4)
    ]
    checked = 0
    for age, bounds, tsex, psex, status in itertools.product(AGES, BOUNDS, SEXES, PSEXES, STATUSES):
        for country, tcountries in [(None, ()), ("France", ("France",)), ("France", ("Spain",))]:
            t = trial(lo=bounds[0], hi=bounds[1], sex=tsex, status=status, locations=tuple((c, "x") for c in tcountries))
            p = PatientProfile("p", age_years=age, sex=psex, location=(country, "Paris") if country else None)
            for cfg in configs:
                assert passes_filters(t, p, cfg) == expected_pass(age, bounds, tsex, psex, status, country, tcountries, cfg)
                checked += 1
    assert checked > 10000


def test_location_match_ignores_case():
    t = trial(locations=(("United States", "Boston"),))
    p = PatientProfile("p", location=("united states ", "x"))
    assert passes_filters(t, p, RetrievalConfig(filter_location=True))


def test_config_invariants():
    with pytest.raises(ValueError):
        RetrievalConfig(k_candidates=10, k_arm=5)
    with pytest.raises(ValueError):
        RetrievalConfig(alpha=1.5)
    cfg = RetrievalConfig(fusion="rrf")
    assert cfg.fusion is FusionMode.RRF
    assert RetrievalConfig.from_dict(cfg.to_dict()) == cfg


def test_hit_invariants():
    with pytest.raises(ValueError):
        RetrievalHit("t", 0, 0, 1.5, True, False)
    with pytest.raises(ValueError):
        RetrievalHit("t", 0, 0, 0.5, False, False)


def test_minmax():
    assert minmax([]) == {}
    assert minmax([("a", 3.0)]) == {"a": 1.0}
    assert minmax([("a", 2.0), ("b", 2.0)]) == {"a": 1.0, "b": 1.0}
    assert minmax([("a", 4.0), ("b", 3.0), ("c", 2.0)]) == {"a": 1.0, "b": 0.5, "c": 0.0}


def test_fusion_dominance_and_tie():
    hits = fuse([("b", 5.0), ("a", 1.0)], [("b", 0.9), ("a", 0.1)], RetrievalConfig())
    assert hits[0].trial_id == "b" and hits[0].fused_score == 1.0
    # lex-only winner vs sem-only winner at alpha 0.5
    hits = fuse([("z", 5.0), ("y", 1.0)], [("y", 0.9), ("z", 0.1)], RetrievalConfig())
    assert [h.trial_id for h in hits] == ["y", "z"]
    assert hits[0].fused_score == hits[1].fused_score == 0.5


def test_missing_arm_counts_as_zero():
    hits = {h.trial_id: h for h in fuse([("a", 2.0), ("b", 1.0)], [("c", 0.5)], RetrievalConfig(alpha=0.25))}
    assert hits["a"].fused_score == 0.25 and hits["c"].fused_score == 0.75 and hits["b"].fused_score == 0.0
    assert hits["c"].from_semantic and not hits["c"].from_lexical
    assert hits["c"].lexical_score == 0.0


def test_rrf_fusion():
    cfg = RetrievalConfig(fusion=FusionMode.RRF)
    hits = fuse([("a", 9.0), ("b", 1.0)], [("a", 0.9), ("c", 0.1)], cfg)
    assert hits[0].trial_id == "a" and hits[0].fused_score == 1.0
    b = next(h for h in hits if h.trial_id == "b")
    assert b.fused_score == pytest.approx(61 * 0.5 / 62)


# ---------------------------------------------------------------------------
# end to end over small indices

TOPICS = ["breast carcinoma", "lung cancer", "renal failure", "melanoma skin", "glioblastoma brain", "prostate tumor"]


@pytest.fixture(scope="module")
def indices():
    rng = np.random.default_rng(0)
    docs = []
    for i in range(120):
        words = [TOPICS[i % len(TOPICS)], *rng.choice(["therapy", "phase", "adult", "study", "dose", "safety"], 4)]
        docs.append((f"NCT{i:08d}", " ".join(words), []))
    embedder = MockEmbedder(32)
    vectors = HNSWIndex(32)
    for d, text, _ in docs:
        vectors.insert(d, embedder.embed(text))
    vectors.finalize()
    return build_lexical_index(docs, IndexLevel.TRIAL), vectors, embedder


def bundle_for(text, embedder):
    return QueryBundle("p", narrative=text, expanded_sentences=[text], query_vectors=embedder.embed_many([text, text]))


def test_empty_bundle_raises(indices):
    lex, vec, _ = indices
    with pytest.raises(EmptyBundle):
        hybrid_search(QueryBundle("p"), lex, vec, None)


def test_empty_allowed_set(indices):
    lex, vec, emb = indices
    assert hybrid_search(bundle_for("breast", emb), lex, vec, set()) == []


def test_alpha_one_without_semantic_equals_lexical(indices):
    lex, vec, emb = indices
    allowed = {f"NCT{i:08d}" for i in range(0, 120, 3)}
    b = bundle_for("breast carcinoma therapy", emb)
    cfg = RetrievalConfig(k_candidates=30, k_arm=40, alpha=1.0, use_semantic=False)
    hits = hybrid_search(b, lex, vec, allowed, cfg)
    expected = lexical_topk(lex, b.query_terms(), 40, allowed=allowed)[:30]
    assert [h.trial_id for h in hits] == [d for d, _ in expected]


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(TOPICS + ["therapy dose", "adult safety study", "unknown words"]),
    st.sets(st.integers(0, 119), min_size=1, max_size=120),
    st.integers(1, 60),
    st.integers(0, 60),
    st.sampled_from(list(FusionMode)),
)
def test_monotone_allowed_and_idempotent(indices, text, allowed_idx, k1, extra, fusion):
    lex, vec, emb = indices
    allowed = {f"NCT{i:08d}" for i in allowed_idx}
    b = bundle_for(text, emb)
    small = hybrid_search(b, lex, vec, allowed, RetrievalConfig(k_candidates=k1, k_arm=200, fusion=fusion))
    large = hybrid_search(b, lex, vec, allowed, RetrievalConfig(k_candidates=k1 + extra, k_arm=200, fusion=fusion))
    assert {h.trial_id for h in small} <= {h.trial_id for h in large}
    assert all(h.trial_id in allowed for h in large)
    assert hybrid_search(b, lex, vec, allowed, RetrievalConfig(k_candidates=k1, k_arm=200, fusion=fusion)) == small
    scores = [(-h.fused_score, h.trial_id) for h in large]
    assert scores == sorted(scores)


def test_candidates_jsonl():
    hits = fuse([("a", 2.0)], [("b", 0.3)], RetrievalConfig())
    lines = [json.loads(x) for x in candidates_jsonl("p1", hits).splitlines()]
    assert [x["rank"] for x in lines] == [1, 2]
    assert set(lines[0]) == {"patient_id", "trial_id", "lexical_score", "semantic_score", "fused_score", "rank"}
