import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trialmatch.corpus import CriterionKind, criteria_from_block, segment_criteria
from trialmatch.normalize import (
    ConceptDictionary,
    Diagnostics,
    EntityClass,
    EntityMention,
    Sieve,
    annotate,
    enrich_with_synonyms,
    find_local_definition,
    is_abbreviation,
    lookup_key,
    normalize_text,
    sieve_normalize,
    tag_entities,
)

RECORDS = [
    {"id": "NCIT:C4872", "label": "breast carcinoma", "class": "DISEASE", "synonyms": ["breast cancer", "mammary carcinoma"]},
    {"id": "HGNC:3430", "label": "her2", "class": "GENE_PROTEIN_MUTATION", "synonyms": ["erbb2"]},
    {"id": "HGNC:1100", "label": "BRCA1", "class": "GENE_PROTEIN_MUTATION", "synonyms": []},
    {"id": "NCIT:C2926", "label": "non-small cell lung carcinoma", "class": "DISEASE", "synonyms": ["nsclc", "non-small cell lung cancer"]},
    {"id": "NCIT:C3058", "label": "glioblastoma", "class": "DISEASE", "synonyms": ["gbm"]},
    {"id": "X:1", "label": "chronic kidney disease", "class": "DISEASE", "synonyms": []},
    {"id": "X:2", "label": "cold", "class": "SYMPTOM", "synonyms": ["common cold"]},
    {"id": "X:3", "label": "cold agglutinin", "class": "OTHER_LAB", "synonyms": ["cold"]},
    {"id": "X:4", "label": "tnf", "class": "GENE_PROTEIN_MUTATION", "synonyms": ["tumor necrosis"]},
    {"id": "X:5", "label": "tumour necrosis", "class": "SYMPTOM", "synonyms": ["tnf"]},
]


@pytest.fixture(scope="module")
def dictionary():
    return ConceptDictionary.from_records(RECORDS)


def test_tag_longest_match(dictionary):
    text = "her2-positive breast carcinoma"
    mentions = tag_entities(text, dictionary)
    assert [(m.surface, m.span) for m in mentions] == [("her2", (0, 4)), ("breast carcinoma", (14, 30))]
    assert all(m.concept_id is None for m in mentions)
    assert mentions[1].entity_class is EntityClass.DISEASE


def test_tag_empty_and_repeats(dictionary):
    assert tag_entities("", dictionary) == []
    m = tag_entities("brca1 and brca1", dictionary)
    assert [x.span for x in m] == [(0, 5), (10, 15)]


def test_tag_mixed_class_candidates_marked_ambiguous(dictionary):
    (m,) = tag_entities("a cold", dictionary)
    assert m.entity_class is EntityClass.OTHER and m.class_label == "ambiguous"


def test_dictionary_lookups_are_case_and_space_insensitive(dictionary):
    assert dictionary.by_label("  Breast   CARCINOMA ") == ["NCIT:C4872"]
    assert dictionary.by_synonym("NSCLC") == ["NCIT:C2926"]
    for concept_record in RECORDS:
        for syn in concept_record["synonyms"]:
            listing = sorted(r["id"] for r in RECORDS if lookup_key(syn) in {lookup_key(s) for s in r["synonyms"]})
            assert sorted(dictionary.by_synonym(syn)) == listing


def test_other_class_keeps_label(dictionary):
    assert dictionary.get("X:3").entity_class is EntityClass.OTHER
    assert dictionary.get("X:3").class_label == "OTHER_LAB"


def test_sieve_exact(dictionary):
    m = sieve_normalize(EntityMention("breast carcinoma", (0, 16)), "breast carcinoma", dictionary)
    assert (m.concept_id, m.sieve_used) == ("NCIT:C4872", Sieve.EXACT)


def test_sieve_synonym(dictionary):
    m = sieve_normalize(EntityMention("nsclc", (0, 5)), "nsclc", dictionary)
    assert (m.concept_id, m.sieve_used) == ("NCIT:C2926", Sieve.SYNONYM)


def test_sieve_unresolved_reports(dictionary):
    diag = Diagnostics()
    m = sieve_normalize(EntityMention("XYZQ", (0, 4)), "XYZQ", dictionary, diag)
    assert m.concept_id is None and m.sieve_used is None
    assert diag.records == [{"surface": "XYZQ", "span": [0, 4], "reason": "unresolved", "candidates": []}]


def test_synonym_tie_is_reported_as_ambiguous(dictionary):
    diag = Diagnostics()
    m = sieve_normalize(EntityMention("tnf", (0, 3)), "tnf", dictionary, diag)
    # exact hits X:4, the synonym sieve never gets to decide
    assert (m.concept_id, m.sieve_used) == ("X:4", Sieve.EXACT)
    m = sieve_normalize(EntityMention("tumor necrosis", (0, 14)), "tumor necrosis", dictionary, diag)
    assert m.sieve_used is Sieve.SYNONYM


def test_abbreviation_local_definition(dictionary):
    context = "History of chronic kidney disease (CKD) stage 3."
    start = context.index("CKD")
    m = sieve_normalize(EntityMention("CKD", (start, start + 3)), context, dictionary)
    assert (m.concept_id, m.sieve_used) == ("X:1", Sieve.ABBREVIATION)


def test_abbreviation_initials_of_concept_in_context(dictionary):
    context = "chronic kidney disease documented; CKD stable"
    start = context.index("CKD")
    m = sieve_normalize(EntityMention("CKD", (start, start + 3)), context, dictionary)
    assert (m.concept_id, m.sieve_used) == ("X:1", Sieve.ABBREVIATION)


def test_abbreviation_needs_capitals(dictionary):
    assert is_abbreviation("NSCLC") and is_abbreviation("HER2")
    assert not is_abbreviation("ckd") and not is_abbreviation("Ckd")
    m = sieve_normalize(EntityMention("ckd", (0, 3)), "chronic kidney disease ckd", dictionary)
    assert m.concept_id is None


@pytest.mark.parametrize(
    "abbr,context,expected",
    [
        ("CKD", "patients with chronic kidney disease (CKD)", "chronic kidney disease"),
        # inner characters need not start a word
        ("HCC", "known hepatocellular carcinoma (HCC)", "hepatocellular carcinoma"),
        ("XQZ", "known hepatocellular carcinoma (XQZ)", None),
        ("GBM", "recurrent glioblastoma multiforme (GBM)", "glioblastoma multiforme"),
        ("ABC", "nothing defines it here", None),
    ],
)
def test_find_local_definition(abbr, context, expected):
    assert find_local_definition(abbr, context) == expected


@settings(max_examples=200, deadline=None)
@given(st.sampled_from([r["label"] for r in RECORDS]), st.text(max_size=40))
def test_exact_sieve_takes_precedence(label, noise):
    d = ConceptDictionary.from_records(RECORDS)
    if len(d.by_label(label)) != 1:
        return
    context = noise + " " + label.upper()
    m = EntityMention(label.upper(), (len(noise) + 1, len(context)))
    first = sieve_normalize(m, context, d)
    assert first.sieve_used is Sieve.EXACT
    assert sieve_normalize(m, context, d) == first


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["breast", "carcinoma", "her2", "brca1", "nsclc", "with", "and", "cold", "agglutinin", "x", "-"]), max_size=25))
def test_tag_spans_sorted_and_disjoint(words):
    d = ConceptDictionary.from_records(RECORDS)
    text = " ".join(words)
    spans = [m.span for m in tag_entities(text, d)]
    assert spans == sorted(spans)
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        assert a1 <= b0
    for s, e in spans:
        assert 0 <= s < e <= len(text)


def criterion(text):
    return segment_criteria(text, CriterionKind.INCLUSION, "T")[0]


def test_enrich_copies_synonyms_once(dictionary):
    c = annotate(criterion("1. breast carcinoma or mammary carcinoma, i.e. breast cancer"), "breast carcinoma and breast carcinoma", dictionary)
    assert c.synonyms == ("breast cancer", "mammary carcinoma")
    assert enrich_with_synonyms(c, dictionary) == c


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["her2", "breast cancer", "nsclc", "gbm", "fever", "the"]), max_size=8), st.lists(st.text(max_size=8), max_size=3))
def test_enrich_idempotent_and_monotone(words, existing):
    d = ConceptDictionary.from_records(RECORDS)
    text = " ".join(words) or "none"
    c = criterion("1. " + text.replace("\n", " ") + " filler words here")
    c = annotate(c, c.text, d)
    from dataclasses import replace

    c = replace(c, synonyms=tuple(existing) + c.synonyms)
    once = enrich_with_synonyms(c, d)
    assert enrich_with_synonyms(once, d) == once
    assert once.synonyms[: len(c.synonyms)] == c.synonyms


def test_normalize_text_and_ndjson_round_trip(dictionary, tmp_path):
    mentions = normalize_text("NSCLC with HER2 amplification", dictionary)
    assert [(m.surface, m.concept_id) for m in mentions] == [("NSCLC", "NCIT:C2926"), ("HER2", "HGNC:3430")]
    path = tmp_path / "d.ndjson"
    path.write_text(dictionary.to_ndjson(), encoding="utf-8")
    again = ConceptDictionary.from_ndjson(path)
    assert again.to_ndjson() == dictionary.to_ndjson()
    assert json.loads(dictionary.to_ndjson().splitlines()[0])["id"] == "NCIT:C4872"


def test_mention_invariants():
    with pytest.raises(ValueError):
        EntityMention("x", (3, 3))
    with pytest.raises(ValueError):
        EntityMention("x", (0, 1), concept_id="C1")
    m = EntityMention("x", (0, 1), EntityClass.DISEASE, "", "C1", "x", Sieve.EXACT)
    assert EntityMention.from_dict(m.to_dict()) == m


def test_annotate_trial_from_block(dictionary):
    from trialmatch.corpus import Trial
    from trialmatch.normalize import annotate_trial

    trial = Trial("T1", brief_title="Study in NSCLC", criteria=tuple(criteria_from_block("1. Known HER2 positive disease", "T1")))
    out = annotate_trial(trial, dictionary)
    assert [m.concept_id for m in out.criteria[0].entities] == ["HGNC:3430"]
    assert out.criteria[0].synonyms == ("erbb2",)
    assert [m.concept_id for m in out.entities] == ["NCIT:C2926"]
