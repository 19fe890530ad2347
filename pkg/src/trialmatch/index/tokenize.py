"""Tokenizer shared by the lexical index, the mock embedder and the mock judge."""

from __future__ import annotations

import re

# alphanumeric runs; hyphens and decimal points inside a token are kept
_TOKEN = re.compile(r"[^\W_]+(?:[-.][^\W_]+)*")

STOPWORDS = frozenset(
    """a an and are as at be by for from has have in is it its of on or that the
    to was were will with without not no any all other than who which prior""".split()
)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumerics: 'HER2-positive, 2.5 mg' -> ['her2-positive', '2.5', 'mg']."""
    return _TOKEN.findall(text.lower()) if text else []


def content_tokens(text: str) -> set[str]:
    return {t for t in tokenize(text) if t not in STOPWORDS}
