"""Trial records: XML parsing, text cleaning and eligibility segmentation."""

from __future__ import annotations

import json
import logging
import re
import unicodedata
import xml.etree.ElementTree as ET
from dataclasses import dataclass, replace
from datetime import date, datetime
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Optional

from .errors import DuplicateDocId, MalformedXml, MissingIdentifier
from .normalize import EntityMention

logger = logging.getLogger(__name__)


class Sex(str, Enum):
    ALL = "ALL"
    MALE = "MALE"
    FEMALE = "FEMALE"


class TrialStatus(str, Enum):
    RECRUITING = "RECRUITING"
    COMPLETED = "COMPLETED"
    WITHDRAWN = "WITHDRAWN"
    OTHER = "OTHER"


class CriterionKind(str, Enum):
    INCLUSION = "INCLUSION"
    EXCLUSION = "EXCLUSION"


@dataclass(frozen=True)
class Criterion:
    criterion_id: str
    trial_id: str
    kind: CriterionKind
    text: str
    sequence_number: int
    indent_level: int = 0
    parent_id: Optional[str] = None
    entities: tuple[EntityMention, ...] = ()
    synonyms: tuple[str, ...] = ()
    embedding: Optional[tuple[float, ...]] = None

    def to_dict(self) -> dict:
        return {
            "criterion_id": self.criterion_id,
            "trial_id": self.trial_id,
            "kind": self.kind.value,
            "text": self.text,
            "sequence_number": self.sequence_number,
            "indent_level": self.indent_level,
            "parent_id": self.parent_id,
            "entities": [m.to_dict() for m in self.entities],
            "synonyms": list(self.synonyms),
            "embedding": list(self.embedding) if self.embedding is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Criterion":
        emb = d.get("embedding")
        return cls(
            criterion_id=d["criterion_id"],
            trial_id=d["trial_id"],
            kind=CriterionKind(d["kind"]),
            text=d["text"],
            sequence_number=d["sequence_number"],
            indent_level=d.get("indent_level", 0),
            parent_id=d.get("parent_id"),
            entities=tuple(EntityMention.from_dict(m) for m in d.get("entities", [])),
            synonyms=tuple(d.get("synonyms", [])),
            embedding=tuple(emb) if emb is not None else None,
        )


@dataclass(frozen=True)
class Trial:
    nct_id: str
    brief_title: str = ""
    official_title: str = ""
    summary: str = ""
    detailed_description: str = ""
    start_date: Optional[date] = None
    end_date: Optional[date] = None
    locations: tuple[tuple[str, str], ...] = ()
    min_age_years: Optional[float] = None
    max_age_years: Optional[float] = None
    sex_eligibility: Sex = Sex.ALL
    overall_status: TrialStatus = TrialStatus.OTHER
    status_label: str = ""
    conditions: tuple[str, ...] = ()
    criteria: tuple[Criterion, ...] = ()
    eligibility_text: str = ""
    # trial-level enrichment (title/summary/conditions), filled by normalize
    entities: tuple[EntityMention, ...] = ()
    synonyms: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.nct_id:
            raise MissingIdentifier("trial has an empty nct_id")
        if (
            self.min_age_years is not None
            and self.max_age_years is not None
            and self.min_age_years > self.max_age_years
        ):
            raise ValueError(f"{self.nct_id}: min age exceeds max age")
        for c in self.criteria:
            if c.trial_id != self.nct_id:
                raise ValueError(f"criterion {c.criterion_id} belongs to {c.trial_id}, not {self.nct_id}")

    @property
    def inclusion(self) -> list[Criterion]:
        return [c for c in self.criteria if c.kind is CriterionKind.INCLUSION]

    @property
    def exclusion(self) -> list[Criterion]:
        return [c for c in self.criteria if c.kind is CriterionKind.EXCLUSION]

    def document_text(self) -> str:
        """Text indexed at trial level."""
        parts = [self.brief_title, self.official_title, *self.conditions, self.summary, self.detailed_description]
        return "\n".join(p for p in parts if p)

    def criteria_block(self) -> str:
        lines = ["Inclusion Criteria:"]
        lines += [_block_line(c) for c in self.inclusion]
        lines.append("Exclusion Criteria:")
        lines += [_block_line(c) for c in self.exclusion]
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "nct_id": self.nct_id,
            "brief_title": self.brief_title,
            "official_title": self.official_title,
            "summary": self.summary,
            "detailed_description": self.detailed_description,
            "start_date": self.start_date.isoformat() if self.start_date else None,
            "end_date": self.end_date.isoformat() if self.end_date else None,
            "locations": [list(loc) for loc in self.locations],
            "min_age_years": self.min_age_years,
            "max_age_years": self.max_age_years,
            "sex_eligibility": self.sex_eligibility.value,
            "overall_status": self.overall_status.value,
            "status_label": self.status_label,
            "conditions": list(self.conditions),
            "entities": [m.to_dict() for m in self.entities],
            "synonyms": list(self.synonyms),
            "criteria": [c.to_dict() for c in self.criteria],
            "eligibility_text": self.eligibility_text,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trial":
        return cls(
            nct_id=d["nct_id"],
            brief_title=d.get("brief_title", ""),
            official_title=d.get("official_title", ""),
            summary=d.get("summary", ""),
            detailed_description=d.get("detailed_description", ""),
            start_date=date.fromisoformat(d["start_date"]) if d.get("start_date") else None,
            end_date=date.fromisoformat(d["end_date"]) if d.get("end_date") else None,
            locations=tuple(tuple(loc) for loc in d.get("locations", [])),
            min_age_years=d.get("min_age_years"),
            max_age_years=d.get("max_age_years"),
            sex_eligibility=Sex(d.get("sex_eligibility", "ALL")),
            overall_status=TrialStatus(d.get("overall_status", "OTHER")),
            status_label=d.get("status_label", ""),
            conditions=tuple(d.get("conditions", [])),
            entities=tuple(EntityMention.from_dict(m) for m in d.get("entities", [])),
            synonyms=tuple(d.get("synonyms", [])),
            criteria=tuple(Criterion.from_dict(c) for c in d.get("criteria", [])),
            eligibility_text=d.get("eligibility_text", ""),
        )


def _block_line(c: Criterion) -> str:
    return "  " * c.indent_level + "- " + c.text


# ---------------------------------------------------------------------------
# text cleaning

_WS = re.compile(r"\s+")


def clean_text(raw: str) -> str:
    """Lowercase, drop control/format characters and collapse whitespace."""
    if not raw:
        return ""
    chars = []
    for ch in raw:
        if ch.isspace():
            chars.append(" ")
        elif unicodedata.category(ch) in ("Cc", "Cf"):
            continue
        else:
            chars.append(ch)
    return _WS.sub(" ", "".join(chars)).strip().lower()


# ---------------------------------------------------------------------------
# XML ingestion

_AGE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(year|month|week|day|hour|minute)s?\s*$", re.I)
_AGE_UNITS = {
    "year": Fraction(1),
    "month": Fraction(1, 12),
    "week": Fraction(1, 52),
    "day": Fraction(100, 36525),
    "hour": Fraction(100, 36525 * 24),
    "minute": Fraction(100, 36525 * 24 * 60),
}
_DATE_FORMATS = ("%Y-%m-%d", "%B %d, %Y", "%B %Y", "%b %d, %Y", "%b %Y", "%Y-%m")


def parse_age(value: Optional[str]) -> Optional[float]:
    """'18 Years' -> 18.0, '6 Months' -> 0.5; 'N/A' or junk -> None."""
    if not value:
        return None
    m = _AGE.match(value)
    if not m:
        return None
    return float(Fraction(m.group(1)) * _AGE_UNITS[m.group(2).lower()])


def parse_date(value: Optional[str]) -> Optional[date]:
    if not value:
        return None
    value = value.strip()
    for fmt in _DATE_FORMATS:
        try:
            return datetime.strptime(value, fmt).date()
        except ValueError:
            continue
    logger.debug("unparsed date %r", value)
    return None


def parse_status(label: Optional[str]) -> tuple[TrialStatus, str]:
    label = (label or "").strip()
    key = label.upper().replace(" ", "_")
    try:
        status = TrialStatus(key)
    except ValueError:
        status = TrialStatus.OTHER
    if status is TrialStatus.OTHER:
        return status, label
    return status, ""


def _sex(value: Optional[str]) -> Sex:
    v = (value or "").strip().upper()
    if v in ("MALE", "FEMALE"):
        return Sex(v)
    return Sex.ALL


def _text(root: ET.Element, path: str) -> str:
    node = root.find(path)
    if node is None:
        return ""
    return "".join(node.itertext()).strip()


def parse_trial_xml(xml_document: bytes, segment: bool = True) -> Trial:
    """Parse one ClinicalTrials.gov-style ``<clinical_study>`` record."""
    try:
        root = ET.fromstring(xml_document)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from exc
    if root.tag != "clinical_study":
        raise MalformedXml(f"unrecognized root element <{root.tag}>")

    nct_id = _text(root, "id_info/nct_id") or _text(root, "nct_id")
    if not nct_id:
        raise MissingIdentifier("no nct_id element")

    locations = []
    for loc in root.findall("location"):
        country = _text(loc, "facility/address/country")
        city = _text(loc, "facility/address/city")
        if country or city:
            locations.append((country, city))

    status, status_label = parse_status(_text(root, "overall_status"))
    eligibility = _raw_text(root.find("eligibility/criteria/textblock"))
    if not eligibility:
        eligibility = _raw_text(root.find("eligibility/criteria"))

    trial = Trial(
        nct_id=nct_id,
        brief_title=_text(root, "brief_title"),
        official_title=_text(root, "official_title"),
        summary=_text(root, "brief_summary/textblock") or _text(root, "brief_summary"),
        detailed_description=_text(root, "detailed_description/textblock")
        or _text(root, "detailed_description"),
        start_date=parse_date(_text(root, "start_date")),
        end_date=parse_date(_text(root, "completion_date") or _text(root, "primary_completion_date")),
        locations=tuple(locations),
        min_age_years=parse_age(_text(root, "eligibility/minimum_age")),
        max_age_years=parse_age(_text(root, "eligibility/maximum_age")),
        sex_eligibility=_sex(_text(root, "eligibility/gender")),
        overall_status=status,
        status_label=status_label,
        conditions=tuple(c.text.strip() for c in root.findall("condition") if c.text and c.text.strip()),
        eligibility_text=eligibility,
    )
    if segment:
        trial = replace(trial, criteria=tuple(criteria_from_block(eligibility, nct_id)))
    return trial


def _raw_text(node: Optional[ET.Element]) -> str:
    # keep leading indentation: the segmenter needs it
    if node is None:
        return ""
    return "".join(node.itertext()).strip("\n")


def iter_trial_files(corpus_dir: Path) -> Iterator[Path]:
    yield from sorted(p for p in Path(corpus_dir).iterdir() if p.suffix.lower() == ".xml")


# ---------------------------------------------------------------------------
# eligibility segmentation

_HEADER = re.compile(r"^[ \t]*(inclusion|exclusion)[ \t]+criteria[ \t]*:?[ \t]*", re.I | re.M)

_MARKER = re.compile(
    r"""^(?P<indent>[ \t]*)
        (?P<marker>
            \d{1,3}[.)]                # 1.  2)
          | \(\d{1,3}\)                # (1)
          | [A-Za-z][.)]               # a.  b)
          | \([A-Za-z]\)               # (a)
          | [•●▪◦‣⁃·→*\-]  # bullets, arrow, dash, star
        )
        (?:[ \t]+|$)
        (?P<body>.*)$""",
    re.X,
)
_SENTENCE_BREAK = re.compile(r"(?<=\.)\s+(?=[A-Z0-9])")
MIN_FRAGMENT_TOKENS = 3
TAB_WIDTH = 4


def split_inclusion_exclusion(eligibility_block: str) -> tuple[str, str]:
    """Partition a raw eligibility block at its inclusion/exclusion headers."""
    text = eligibility_block.replace("\r\n", "\n").replace("\r", "\n")
    headers = list(_HEADER.finditer(text))
    if not headers:
        return text.strip(), ""
    inclusion: list[str] = []
    exclusion: list[str] = []
    preamble = text[: headers[0].start()]
    if preamble.strip():
        inclusion.append(preamble)
    for i, h in enumerate(headers):
        end = headers[i + 1].start() if i + 1 < len(headers) else len(text)
        chunk = text[h.end():end]
        (inclusion if h.group(1).lower() == "inclusion" else exclusion).append(chunk)
    return _join_chunks(inclusion), _join_chunks(exclusion)


def _join_chunks(chunks: list[str]) -> str:
    return "\n".join(c.strip("\n") for c in chunks).strip("\n").rstrip()


@dataclass
class Fragment:
    """One segmented item before cleaning."""

    raw: str
    width: int
    marked: bool
    level: int = 0
    parent: Optional[int] = None


def _width(indent: str) -> int:
    return sum(TAB_WIDTH if ch == "\t" else 1 for ch in indent)


def _sentences(paragraph: str) -> list[str]:
    return [s for s in _SENTENCE_BREAK.split(paragraph) if s.strip()]


def split_fragments(section_text: str) -> list[Fragment]:
    """Split a section into raw fragments with nesting resolved.

    Marker-led lines open a new item, unmarked lines continue the open item,
    and blank lines close it. A section without any marker is split into
    sentences instead. Unmarked fragments under ``MIN_FRAGMENT_TOKENS`` tokens
    are folded into their predecessor.
    """
    text = section_text.replace("\r\n", "\n").replace("\r", "\n")
    lines = text.split("\n")
    if not any(_MARKER.match(line) for line in lines):
        return _nest(_paragraph_fragments(lines))

    items: list[Fragment] = []
    open_item: Optional[Fragment] = None
    for line in lines:
        if not line.strip():
            open_item = None
            continue
        m = _MARKER.match(line)
        if m:
            open_item = Fragment(m.group("body").strip(), _width(m.group("indent")), marked=True)
            items.append(open_item)
        elif open_item is not None:
            open_item.raw = (open_item.raw + " " + line.strip()).strip()
        else:
            indent = line[: len(line) - len(line.lstrip())]
            open_item = Fragment(line.strip(), _width(indent), marked=False)
            items.append(open_item)
    return _nest(_consolidate(items))


def _paragraph_fragments(lines: list[str]) -> list[Fragment]:
    frags: list[Fragment] = []
    para: list[str] = []
    for line in lines + [""]:
        if line.strip():
            para.append(line.strip())
            continue
        if para:
            frags.extend(Fragment(s.strip(), 0, marked=False) for s in _sentences(" ".join(para)))
            para = []
    return _consolidate(frags)


def _consolidate(items: list[Fragment]) -> list[Fragment]:
    out: list[Fragment] = []
    pending = ""  # short fragment with no predecessor yet
    for item in items:
        short = not item.marked and len(item.raw.split()) < MIN_FRAGMENT_TOKENS
        if item.marked and not item.raw:
            short = True
        if short:
            if out:
                out[-1].raw = (out[-1].raw + " " + item.raw).strip()
            else:
                pending = (pending + " " + item.raw).strip()
            continue
        if pending:
            item.raw = pending + " " + item.raw
            pending = ""
        out.append(item)
    if pending:
        out.append(Fragment(pending, 0, marked=False))
    return out


def _nest(items: list[Fragment]) -> list[Fragment]:
    stack: list[int] = []
    for i, item in enumerate(items):
        while stack and items[stack[-1]].width >= item.width:
            stack.pop()
        item.parent = stack[-1] if stack else None
        item.level = len(stack)
        stack.append(i)
    return items


def segment_criteria(section_text: str, kind: CriterionKind, trial_id: str) -> list[Criterion]:
    kind = CriterionKind(kind)
    tag = "inc" if kind is CriterionKind.INCLUSION else "exc"
    frags = split_fragments(section_text)
    criteria: list[Criterion] = []
    ids: dict[int, str] = {}
    for i, frag in enumerate(frags):
        text = clean_text(frag.raw)
        if not text:
            continue
        cid = f"{trial_id}-{tag}-{len(criteria)}"
        ids[i] = cid
        parent = frag.parent
        while parent is not None and parent not in ids:
            parent = frags[parent].parent
        criteria.append(
            Criterion(
                criterion_id=cid,
                trial_id=trial_id,
                kind=kind,
                text=text,
                sequence_number=len(criteria),
                indent_level=frag.level,
                parent_id=ids.get(parent) if parent is not None else None,
            )
        )
    return criteria


def criteria_from_block(eligibility_block: str, trial_id: str) -> list[Criterion]:
    inc, exc = split_inclusion_exclusion(eligibility_block)
    return segment_criteria(inc, CriterionKind.INCLUSION, trial_id) + segment_criteria(
        exc, CriterionKind.EXCLUSION, trial_id
    )


# ---------------------------------------------------------------------------
# canonical JSON interchange


def dump_trials(trials: Iterable[Trial]) -> str:
    return json.dumps([t.to_dict() for t in trials], ensure_ascii=False, indent=1) + "\n"


def load_trials(path: Path) -> list[Trial]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    trials = [Trial.from_dict(d) for d in data]
    seen: set[str] = set()
    for t in trials:
        if t.nct_id in seen:
            raise DuplicateDocId(f"duplicate nct_id {t.nct_id}")
        seen.add(t.nct_id)
    return trials
