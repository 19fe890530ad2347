"""Patient ingestion from Phenopackets JSON and query-bundle assembly."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from typing import Any, Iterator, Optional, Protocol, Sequence, Union

import numpy as np

from .errors import MalformedJson, MissingSubjectId
from .index.tokenize import tokenize
from .normalize import ConceptDictionary, Diagnostics, EntityMention, annotate

logger = logging.getLogger(__name__)


class PatientSex(str, Enum):
    MALE = "MALE"
    FEMALE = "FEMALE"
    UNKNOWN = "UNKNOWN"


@dataclass(frozen=True)
class PatientProfile:
    patient_id: str
    age_years: Optional[float] = None
    sex: PatientSex = PatientSex.UNKNOWN
    narrative: str = ""
    structured_terms: tuple[tuple[str, str], ...] = ()
    entities: tuple[EntityMention, ...] = ()
    synonyms: tuple[str, ...] = ()
    location: Optional[tuple[str, str]] = None

    def __post_init__(self):
        if not self.patient_id:
            raise MissingSubjectId("patient_id must be non-empty")
        if self.age_years is not None and self.age_years < 0:
            raise ValueError("age_years must be non-negative")

    @property
    def concept_ids(self) -> frozenset[str]:
        """Normalized entity concepts plus ontology ids of structured terms."""
        ids = {m.concept_id for m in self.entities if m.concept_id}
        ids.update(term_id for term_id, _ in self.structured_terms)
        return frozenset(ids)

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "age_years": self.age_years,
            "sex": self.sex.value,
            "narrative": self.narrative,
            "structured_terms": [list(t) for t in self.structured_terms],
            "entities": [m.to_dict() for m in self.entities],
            "synonyms": list(self.synonyms),
            "location": list(self.location) if self.location else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatientProfile":
        loc = d.get("location")
        return cls(
            patient_id=d["patient_id"],
            age_years=d.get("age_years"),
            sex=PatientSex(d.get("sex", "UNKNOWN")),
            narrative=d.get("narrative", ""),
            structured_terms=tuple(tuple(t) for t in d.get("structured_terms", [])),
            entities=tuple(EntityMention.from_dict(m) for m in d.get("entities", [])),
            synonyms=tuple(d.get("synonyms", [])),
            location=tuple(loc) if loc else None,
        )


# ---------------------------------------------------------------------------
# Phenopackets

_DURATION = re.compile(
    r"^P(?!$)(?:(?P<y>\d+(?:\.\d+)?)Y)?(?:(?P<m>\d+(?:\.\d+)?)M)?(?:(?P<w>\d+(?:\.\d+)?)W)?(?:(?P<d>\d+(?:\.\d+)?)D)?"
    r"(?:T.*)?$"
)
_NARRATIVE_KEYS = ("label", "symbol", "description")
_SKIP_KEYS = {"metaData"}


def parse_iso_duration(value: str) -> Optional[float]:
    """'P55Y' -> 55.0, 'P1Y6M' -> 1.5. Time components are ignored."""
    m = _DURATION.match((value or "").strip())
    if not m:
        return None
    y, mo, w, d = (float(m.group(g) or 0) for g in "ymwd")
    return y + mo / 12 + w / 52 + d / 365.25


def _walk(node: Any) -> Iterator[tuple[str, Any, Any]]:
    """Yield (key, value, parent) in document order, skipping metadata."""
    if isinstance(node, dict):
        for key, value in node.items():
            if key in _SKIP_KEYS:
                continue
            yield key, value, node
            yield from _walk(value)
    elif isinstance(node, list):
        for item in node:
            yield from _walk(item)


def _age(subject: dict, reference_date: Optional[date]) -> Optional[float]:
    for path in (("ageAtDiagnosis", "age"), ("timeAtLastEncounter", "age", "iso8601duration"), ("timeAtLastEncounter", "age")):
        node: Any = subject
        for key in path:
            node = node.get(key) if isinstance(node, dict) else None
        if isinstance(node, str):
            age = parse_iso_duration(node)
            if age is not None:
                return age
    born = subject.get("dateOfBirth")
    if born and reference_date is not None:
        try:
            birth = date.fromisoformat(str(born)[:10])
        except ValueError:
            return None
        months = (reference_date.year - birth.year) * 12 + reference_date.month - birth.month
        return max(months, 0) / 12
    return None


def parse_phenopacket(json_document: Union[bytes, str], reference_date: Optional[date] = None) -> PatientProfile:
    """Build a profile from a Phenopackets v2-subset document.

    The narrative is every ``label``, ``symbol`` and ``description`` string in
    document order, one per line; ``metaData`` is ignored.
    """
    try:
        doc = json.loads(json_document)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedJson(str(exc)) from exc
    if not isinstance(doc, dict):
        raise MalformedJson("top-level JSON value must be an object")
    subject = doc.get("subject")
    if not isinstance(subject, dict) or not subject.get("id"):
        raise MissingSubjectId("phenopacket has no subject.id")

    sex_raw = str(subject.get("sex", "")).upper()
    sex = PatientSex(sex_raw) if sex_raw in ("MALE", "FEMALE") else PatientSex.UNKNOWN

    lines: list[str] = []
    terms: dict[tuple[str, str], None] = {}
    for key, value, parent in _walk({k: v for k, v in doc.items() if k != "subject"}):
        if key in _NARRATIVE_KEYS and isinstance(value, str) and value.strip():
            lines.append(" ".join(value.split()))
            if key != "description" and isinstance(parent.get("id"), str) and ":" in parent["id"]:
                terms.setdefault((parent["id"], " ".join(value.split())), None)

    location = None
    loc = doc.get("location") or subject.get("location")
    if isinstance(loc, dict) and (loc.get("country") or loc.get("city")):
        location = (str(loc.get("country", "")), str(loc.get("city", "")))

    return PatientProfile(
        patient_id=str(subject["id"]),
        age_years=_age(subject, reference_date),
        sex=sex,
        narrative="\n".join(lines),
        structured_terms=tuple(terms),
        location=location,
    )


def annotate_profile(
    profile: PatientProfile, dictionary: ConceptDictionary, diagnostics: Optional[Diagnostics] = None
) -> PatientProfile:
    """Tag and normalize the narrative, then add concept synonyms."""
    return annotate(profile, profile.narrative, dictionary, diagnostics)


# ---------------------------------------------------------------------------
# query expansion

MAX_SYNONYMS_PER_CONDITION = 10
MAX_OTHER_CONDITIONS = 50

_SENTENCE = re.compile(r"(?<=[.!?])\s+|\n+")


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE.split(text) if s and s.strip()]


class Augmenter(Protocol):
    def augment(self, profile: PatientProfile) -> dict[str, list[str]]:
        """Return ``main_conditions``, ``other_conditions`` and ``expanded_sentences``."""
        ...


@dataclass
class QueryBundle:
    patient_id: str
    narrative: str = ""
    main_conditions: list[str] = field(default_factory=list)
    other_conditions: list[str] = field(default_factory=list)
    expanded_sentences: list[str] = field(default_factory=list)
    entity_synonyms: list[str] = field(default_factory=list)
    concept_ids: list[str] = field(default_factory=list)
    # one row per expanded sentence, then one for the narrative
    query_vectors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def is_empty(self) -> bool:
        return not self.query_terms() and len(self.query_vectors) == 0

    def query_terms(self) -> list[str]:
        """Distinct tokens of every bundle string, first occurrence order."""
        seen: dict[str, None] = {}
        for group in (self.expanded_sentences, self.main_conditions, self.other_conditions, self.entity_synonyms):
            for text in group:
                for tok in tokenize(text):
                    seen.setdefault(tok, None)
        return list(seen)

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "narrative": self.narrative,
            "main_conditions": self.main_conditions,
            "other_conditions": self.other_conditions,
            "expanded_sentences": self.expanded_sentences,
            "entity_synonyms": self.entity_synonyms,
            "concept_ids": self.concept_ids,
            "query_vectors": self.query_vectors.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QueryBundle":
        vectors = np.asarray(d.get("query_vectors", []), dtype=np.float64)
        return cls(
            patient_id=d["patient_id"],
            narrative=d.get("narrative", ""),
            main_conditions=list(d.get("main_conditions", [])),
            other_conditions=list(d.get("other_conditions", [])),
            expanded_sentences=list(d.get("expanded_sentences", [])),
            entity_synonyms=list(d.get("entity_synonyms", [])),
            concept_ids=list(d.get("concept_ids", [])),
            query_vectors=vectors.reshape(len(vectors), -1) if vectors.size else np.zeros((0, 0)),
        )


def expand_query(profile: PatientProfile, augmenter: Augmenter, embedder) -> QueryBundle:
    """Run the augmenter and embed each expanded sentence plus the narrative.

    An empty narrative yields an empty bundle without calling the augmenter.
    """
    if not profile.narrative.strip():
        return QueryBundle(
            patient_id=profile.patient_id,
            concept_ids=sorted(profile.concept_ids),
            query_vectors=np.zeros((0, embedder.dimension)),
        )
    expansion = augmenter.augment(profile)
    sentences = list(expansion["expanded_sentences"])
    vectors = embedder.embed_many(sentences + [profile.narrative])
    return QueryBundle(
        patient_id=profile.patient_id,
        narrative=profile.narrative,
        main_conditions=list(expansion["main_conditions"]),
        other_conditions=list(expansion["other_conditions"])[:MAX_OTHER_CONDITIONS],
        expanded_sentences=sentences,
        entity_synonyms=list(profile.synonyms),
        concept_ids=sorted(profile.concept_ids),
        query_vectors=vectors,
    )


def dedupe(items: Sequence[str]) -> list[str]:
    """Drop repeats case-insensitively, keeping the first spelling."""
    seen: set[str] = set()
    out = []
    for s in items:
        key = s.strip().lower()
        if key and key not in seen:
            seen.add(key)
            out.append(s.strip())
    return out

