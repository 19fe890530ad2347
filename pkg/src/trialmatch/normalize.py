"""Dictionary tagging and sieve-based concept normalization."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Union

logger = logging.getLogger(__name__)


class EntityClass(str, Enum):
    DISEASE = "DISEASE"
    GENE_PROTEIN_MUTATION = "GENE_PROTEIN_MUTATION"
    DRUG_CHEMICAL = "DRUG_CHEMICAL"
    PROCEDURE = "PROCEDURE"
    SYMPTOM = "SYMPTOM"
    CELL_TYPE = "CELL_TYPE"
    OTHER = "OTHER"


class Sieve(str, Enum):
    EXACT = "EXACT"
    SYNONYM = "SYNONYM"
    ABBREVIATION = "ABBREVIATION"


def parse_entity_class(raw: str) -> tuple[EntityClass, str]:
    """Map a dictionary class string to (EntityClass, label kept for OTHER)."""
    key = (raw or "").strip().upper()
    try:
        cls = EntityClass(key)
    except ValueError:
        return EntityClass.OTHER, (raw or "").strip()
    return cls, ""


@dataclass(frozen=True)
class EntityMention:
    surface: str
    span: tuple[int, int]
    entity_class: EntityClass = EntityClass.OTHER
    class_label: str = ""
    concept_id: Optional[str] = None
    concept_label: Optional[str] = None
    sieve_used: Optional[Sieve] = None

    def __post_init__(self):
        start, end = self.span
        if not 0 <= start < end:
            raise ValueError(f"bad span {self.span} for {self.surface!r}")
        if (self.concept_id is None) != (self.sieve_used is None):
            raise ValueError("concept_id and sieve_used must be set together")

    @property
    def normalized(self) -> bool:
        return self.concept_id is not None

    def to_dict(self) -> dict:
        return {
            "surface": self.surface,
            "span": list(self.span),
            "entity_class": self.entity_class.value,
            "class_label": self.class_label,
            "concept_id": self.concept_id,
            "concept_label": self.concept_label,
            "sieve_used": self.sieve_used.value if self.sieve_used else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EntityMention":
        sieve = d.get("sieve_used")
        return cls(
            surface=d["surface"],
            span=tuple(d["span"]),
            entity_class=EntityClass(d.get("entity_class", "OTHER")),
            class_label=d.get("class_label", ""),
            concept_id=d.get("concept_id"),
            concept_label=d.get("concept_label"),
            sieve_used=Sieve(sieve) if sieve else None,
        )


# ---------------------------------------------------------------------------
# dictionary

_WORD = re.compile(r"[^\W_]+")


def lookup_key(text: str) -> str:
    """Case-, whitespace- and punctuation-insensitive form used for all lookups."""
    return " ".join(w.lower() for w in _WORD.findall(text))


@dataclass(frozen=True)
class Concept:
    concept_id: str
    label: str
    entity_class: EntityClass = EntityClass.OTHER
    class_label: str = ""
    synonyms: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        cls = self.class_label if self.entity_class is EntityClass.OTHER and self.class_label else self.entity_class.value
        return {"id": self.concept_id, "label": self.label, "class": cls, "synonyms": list(self.synonyms)}


class ConceptDictionary:
    """Immutable concept store with reverse indices over labels and synonyms."""

    def __init__(self, concepts: Iterable[Concept] = ()):
        self._entries: dict[str, Concept] = {}
        self._by_label: dict[str, list[str]] = {}
        self._by_synonym: dict[str, list[str]] = {}
        for c in concepts:
            if c.concept_id in self._entries:
                raise ValueError(f"duplicate concept id {c.concept_id}")
            self._entries[c.concept_id] = c
            _add(self._by_label, lookup_key(c.label), c.concept_id)
            for s in c.synonyms:
                _add(self._by_synonym, lookup_key(s), c.concept_id)
        self._surface: dict[str, list[str]] = {}
        for index in (self._by_label, self._by_synonym):
            for key, ids in index.items():
                for cid in ids:
                    _add(self._surface, key, cid)
        self.max_phrase_tokens = max((k.count(" ") + 1 for k in self._surface), default=0)

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "ConceptDictionary":
        concepts = []
        for r in records:
            ec, label = parse_entity_class(r.get("class", "OTHER"))
            concepts.append(
                Concept(
                    concept_id=r["id"],
                    label=r["label"],
                    entity_class=ec,
                    class_label=label,
                    synonyms=tuple(dict.fromkeys(r.get("synonyms", []))),
                )
            )
        return cls(concepts)

    @classmethod
    def from_ndjson(cls, source: Union[str, Path]) -> "ConceptDictionary":
        """Load newline-delimited JSON, one ``{id, label, class, synonyms}`` per line."""
        text = Path(source).read_text(encoding="utf-8")
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
        return cls.from_records(records)

    def to_ndjson(self) -> str:
        return "".join(json.dumps(c.to_dict(), ensure_ascii=False) + "\n" for c in self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, concept_id: str) -> bool:
        return concept_id in self._entries

    def __iter__(self):
        return iter(self._entries.values())

    def get(self, concept_id: str) -> Concept:
        return self._entries[concept_id]

    def by_label(self, text: str) -> list[str]:
        return list(self._by_label.get(lookup_key(text), ()))

    def by_synonym(self, text: str) -> list[str]:
        return list(self._by_synonym.get(lookup_key(text), ()))

    def by_surface(self, key: str) -> list[str]:
        """Concepts whose label or synonym has this lookup key."""
        return self._surface.get(key, [])


def _add(index: dict[str, list[str]], key: str, cid: str) -> None:
    if not key:
        return
    ids = index.setdefault(key, [])
    if cid not in ids:
        ids.append(cid)


# ---------------------------------------------------------------------------
# tagging


def tag_entities(text: str, dictionary: ConceptDictionary) -> list[EntityMention]:
    """Greedy longest-match dictionary tagging over word boundaries."""
    if not text or not len(dictionary):
        return []
    words = list(_WORD.finditer(text))
    keys = [w.group().lower() for w in words]
    longest = dictionary.max_phrase_tokens
    mentions: list[EntityMention] = []
    i = 0
    while i < len(words):
        hit = None
        for j in range(min(len(words), i + longest), i, -1):
            ids = dictionary.by_surface(" ".join(keys[i:j]))
            if ids:
                hit = (j, ids)
                break
        if hit is None:
            i += 1
            continue
        j, ids = hit
        start, end = words[i].start(), words[j - 1].end()
        classes = {(dictionary.get(c).entity_class, dictionary.get(c).class_label) for c in ids}
        ec, label = classes.pop() if len(classes) == 1 else (EntityClass.OTHER, "ambiguous")
        mentions.append(EntityMention(text[start:end], (start, end), ec, label))
        i = j
    return mentions


# ---------------------------------------------------------------------------
# sieves


@dataclass
class Diagnostics:
    """Collects mentions the sieves could not resolve to a single concept."""

    records: list[dict] = field(default_factory=list)

    def report(self, mention: EntityMention, reason: str, candidates: Iterable[str] = (), **extra) -> None:
        rec = {
            "surface": mention.surface,
            "span": list(mention.span),
            "reason": reason,
            "candidates": sorted(candidates),
        }
        rec.update(extra)
        self.records.append(rec)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in self.records)


_ABBREVIATION = re.compile(r"^(?=.*[A-Z].*[A-Z])[A-Z0-9]+(?:-?[A-Z0-9]+)*$")


def is_abbreviation(surface: str) -> bool:
    """All-caps single token with at least two capital letters, e.g. NSCLC, HER2."""
    return bool(_ABBREVIATION.match(surface.strip()))


def find_local_definition(abbreviation: str, context: str) -> Optional[str]:
    """Long form introduced as ``long form (ABBR)`` in context, if any.

    Uses the Schwartz-Hearst right-to-left character alignment over a window of
    at most ``min(len+5, 2*len)`` preceding words.
    """
    pattern = re.compile(r"\(\s*" + re.escape(abbreviation) + r"\s*\)")
    for m in pattern.finditer(context):
        preceding = context[: m.start()]
        # the definition cannot cross a sentence or clause boundary
        preceding = re.split(r"[.;:()\[\]\n]", preceding)[-1]
        words = preceding.split()
        letters = sum(ch.isalnum() for ch in abbreviation)
        window = words[-min(letters + 5, 2 * letters):] if words else []
        long_form = _best_long_form(abbreviation, " ".join(window))
        if long_form:
            return long_form
    return None


def _best_long_form(short: str, long: str) -> Optional[str]:
    s = len(short) - 1
    l = len(long) - 1
    while s >= 0:
        c = short[s].lower()
        if not c.isalnum():
            s -= 1
            continue
        while (l >= 0 and long[l].lower() != c) or (s == 0 and l > 0 and long[l - 1].isalnum()):
            l -= 1
        if l < 0:
            return None
        l -= 1
        s -= 1
    start = long.rfind(" ", 0, l + 1) + 1
    result = long[start:].strip()
    if not result or len(result.split()) < 1 or lookup_key(result) == lookup_key(short):
        return None
    return result


def _initials(label: str) -> str:
    return "".join(w[0] for w in lookup_key(label).split())


def _resolved(mention: EntityMention, concept: Concept, sieve: Sieve) -> EntityMention:
    return replace(
        mention,
        entity_class=concept.entity_class,
        class_label=concept.class_label,
        concept_id=concept.concept_id,
        concept_label=concept.label,
        sieve_used=sieve,
    )


def sieve_normalize(
    mention: EntityMention,
    context_text: str,
    dictionary: ConceptDictionary,
    diagnostics: Optional[Diagnostics] = None,
) -> EntityMention:
    """Link a mention to one concept via EXACT, then SYNONYM, then ABBREVIATION.

    A sieve that finds several candidates does not resolve the mention; later
    sieves still get a chance. Mentions left without a unique concept are
    returned unchanged and reported to ``diagnostics``.
    """
    ties: list[tuple[Sieve, list[str]]] = []

    for sieve, lookup in ((Sieve.EXACT, dictionary.by_label), (Sieve.SYNONYM, dictionary.by_synonym)):
        ids = lookup(mention.surface)
        if len(ids) == 1:
            return _resolved(mention, dictionary.get(ids[0]), sieve)
        if ids:
            ties.append((sieve, ids))

    if is_abbreviation(mention.surface):
        ids = _abbreviation_candidates(mention, context_text, dictionary)
        if len(ids) == 1:
            return _resolved(mention, dictionary.get(ids[0]), Sieve.ABBREVIATION)
        if ids:
            ties.append((Sieve.ABBREVIATION, ids))

    if diagnostics is not None:
        if ties:
            sieve, ids = ties[0]
            diagnostics.report(mention, "ambiguous", ids, sieve=sieve.value)
        else:
            diagnostics.report(mention, "unresolved")
    return mention


def _abbreviation_candidates(mention: EntityMention, context: str, dictionary: ConceptDictionary) -> list[str]:
    abbr = mention.surface.strip()
    long_form = find_local_definition(abbr, context or "")
    if long_form:
        ids = dictionary.by_label(long_form) or dictionary.by_synonym(long_form)
        if ids:
            return ids
    # initials of concepts that are themselves mentioned in the context
    letters = "".join(ch for ch in abbr.lower() if ch.isalpha())
    if not letters:
        return []
    start, end = mention.span
    ids: list[str] = []
    for other in tag_entities(context or "", dictionary):
        if other.span == (start, end):
            continue
        for cid in dictionary.by_surface(lookup_key(other.surface)):
            if cid not in ids and _initials(dictionary.get(cid).label) == letters:
                ids.append(cid)
    return ids


def normalize_text(
    text: str, dictionary: ConceptDictionary, diagnostics: Optional[Diagnostics] = None
) -> list[EntityMention]:
    """Tag ``text`` and run every mention through the sieves."""
    return [sieve_normalize(m, text, dictionary, diagnostics) for m in tag_entities(text, dictionary)]


# ---------------------------------------------------------------------------
# enrichment


def concept_synonyms(entities: Iterable[EntityMention], dictionary: ConceptDictionary) -> list[str]:
    out: dict[str, None] = {}
    for m in entities:
        if m.concept_id is None or m.concept_id not in dictionary:
            continue
        for s in dictionary.get(m.concept_id).synonyms:
            out.setdefault(s.lower(), None)
    return list(out)


def enrich_with_synonyms(unit, dictionary: ConceptDictionary):
    """Return ``unit`` with synonyms of its normalized entities appended once.

    ``unit`` is any frozen dataclass with ``entities`` and ``synonyms`` fields
    (criteria, trials, patient text units).
    """
    merged = list(unit.synonyms)
    seen = set(merged)
    for s in concept_synonyms(unit.entities, dictionary):
        if s not in seen:
            seen.add(s)
            merged.append(s)
    return replace(unit, synonyms=tuple(merged))


def annotate(unit, text: str, dictionary: ConceptDictionary, diagnostics: Optional[Diagnostics] = None):
    """Tag and normalize ``text`` into ``unit.entities`` then enrich synonyms."""
    unit = replace(unit, entities=tuple(normalize_text(text, dictionary, diagnostics)))
    return enrich_with_synonyms(unit, dictionary)


def annotate_trial(trial, dictionary: ConceptDictionary, diagnostics: Optional[Diagnostics] = None):
    """Annotate a trial's descriptive text and each of its criteria."""
    criteria = tuple(annotate(c, c.text, dictionary, diagnostics) for c in trial.criteria)
    trial = replace(trial, criteria=criteria)
    return annotate(trial, trial.document_text(), dictionary, diagnostics)
