"""In-memory BM25 inverted index."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

from ..errors import DuplicateDocId, UnknownDocId
from .tokenize import tokenize

K1 = 1.2
B = 0.75


class IndexLevel(str, Enum):
    TRIAL = "TRIAL"
    CRITERION = "CRITERION"


@dataclass
class LexicalIndex:
    level: IndexLevel
    # term -> {doc_id: tf}, doc ids in insertion order
    postings: dict[str, dict[str, int]] = field(default_factory=dict)
    doc_lengths: dict[str, int] = field(default_factory=dict)
    k1: float = K1
    b: float = B

    @property
    def doc_count(self) -> int:
        return len(self.doc_lengths)

    @property
    def avg_doc_length(self) -> float:
        if not self.doc_lengths:
            return 0.0
        return sum(self.doc_lengths.values()) / len(self.doc_lengths)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        n = self.doc_count
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))


def document_terms(text: str, enrichment_terms: Iterable[str] = ()) -> dict[str, int]:
    """Term frequencies of ``text`` plus each enrichment token counted once."""
    tf: dict[str, int] = {}
    for tok in tokenize(text):
        tf[tok] = tf.get(tok, 0) + 1
    extra = dict.fromkeys(tok for term in enrichment_terms for tok in tokenize(term))
    for tok in extra:
        tf[tok] = tf.get(tok, 0) + 1
    return tf


def build_lexical_index(
    documents: Iterable[tuple[str, str, Iterable[str]]],
    level: IndexLevel = IndexLevel.TRIAL,
) -> LexicalIndex:
    """Index ``(doc_id, text, enrichment_terms)`` triples."""
    index = LexicalIndex(IndexLevel(level))
    for doc_id, text, enrichment in documents:
        if doc_id in index.doc_lengths:
            raise DuplicateDocId(doc_id)
        tf = document_terms(text, enrichment)
        index.doc_lengths[doc_id] = sum(tf.values())
        for term, count in tf.items():
            index.postings.setdefault(term, {})[doc_id] = count
    return index


def _score(index: LexicalIndex, terms: list[str], doc_id: str, avg: float) -> float:
    length = index.doc_lengths[doc_id]
    norm = index.k1 * (1.0 - index.b + index.b * length / avg) if avg > 0 else index.k1
    score = 0.0
    for term in terms:
        tf = index.postings.get(term, {}).get(doc_id, 0)
        if tf:
            score += index.idf(term) * tf * (index.k1 + 1.0) / (tf + norm)
    return score


def bm25_score(index: LexicalIndex, query_terms: Iterable[str], doc_id: str) -> float:
    """BM25 of one document; each query term contributes once per occurrence in ``query_terms``."""
    if doc_id not in index.doc_lengths:
        raise UnknownDocId(doc_id)
    return _score(index, list(query_terms), doc_id, index.avg_doc_length)


def lexical_topk(
    index: LexicalIndex,
    query_terms: Iterable[str],
    k: int,
    allowed: Optional[set[str]] = None,
) -> list[tuple[str, float]]:
    """Exact top-k by BM25, ties by ascending doc_id.

    Documents sharing no term with the query score 0 and rank after all
    matching ones, so ``k >= doc_count`` yields a full ranking.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = list(query_terms)
    avg = index.avg_doc_length
    # accumulate over postings in query-term order: same float sums as bm25_score
    acc: dict[str, float] = {}
    for term in terms:
        posting = index.postings.get(term)
        if not posting:
            continue
        idf = index.idf(term)
        for doc_id, tf in posting.items():
            if allowed is not None and doc_id not in allowed:
                continue
            length = index.doc_lengths[doc_id]
            norm = index.k1 * (1.0 - index.b + index.b * length / avg) if avg > 0 else index.k1
            acc[doc_id] = acc.get(doc_id, 0.0) + idf * tf * (index.k1 + 1.0) / (tf + norm)
    scored = sorted(acc.items(), key=lambda h: (-h[1], h[0]))
    if len(scored) < k:
        pool = index.doc_lengths if allowed is None else allowed
        rest = sorted(d for d in pool if d not in acc and d in index.doc_lengths)
        scored.extend((d, 0.0) for d in rest[: k - len(scored)])
    return scored[:k]
