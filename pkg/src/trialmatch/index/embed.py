"""Text embedders: a deterministic feature-hashing mock and an HTTP backend."""

from __future__ import annotations

import hashlib
import os
from typing import Optional, Protocol, Sequence

import httpx
import numpy as np

from ..errors import BackendUnavailable, DimensionMismatch, TextTooLong
from ..transport import DEFAULT_RETRIES, DEFAULT_TIMEOUT, post_with_retries
from .tokenize import tokenize

DEFAULT_DIMENSION = 256
DEFAULT_MAX_TOKENS = 8000
EMBED_URL_ENV = "TRIALMATCH_EMBED_URL"
_EMPTY_FEATURE = "\x00empty"


class Embedder(Protocol):
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...

    def embed_many(self, texts: Sequence[str]) -> np.ndarray: ...


def _check_length(text: str, max_tokens: int) -> list[str]:
    tokens = tokenize(text)
    if len(tokens) > max_tokens:
        raise TextTooLong(f"{len(tokens)} tokens exceeds limit of {max_tokens}")
    return tokens


class MockEmbedder:
    """Signed feature hashing of unigrams and bigrams, L2-normalised."""

    def __init__(self, dimension: int = DEFAULT_DIMENSION, seed: int = 0, max_tokens: int = DEFAULT_MAX_TOKENS):
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = dimension
        self.seed = seed
        self.max_tokens = max_tokens
        self._key = seed.to_bytes(8, "little", signed=False)

    def _bucket(self, feature: str) -> tuple[int, float]:
        h = int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8, key=self._key).digest(), "little")
        return (h >> 1) % self.dimension, 1.0 if h & 1 else -1.0

    def embed(self, text: str) -> np.ndarray:
        tokens = _check_length(text, self.max_tokens)
        features = tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]
        vec = np.zeros(self.dimension, dtype=np.float64)
        for f in features:
            i, sign = self._bucket(f)
            vec[i] += sign
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            # no tokens, or collisions cancelled out
            i, sign = self._bucket(_EMPTY_FEATURE)
            vec[:] = 0.0
            vec[i] = sign
            return vec
        return vec / norm

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dimension), dtype=np.float64)
        for i, t in enumerate(texts):
            out[i] = self.embed(t)
        return out


class HttpEmbedder:
    """POST ``{"texts": [...]}`` and expect ``{"vectors": [[...], ...]}``."""

    def __init__(
        self,
        dimension: int,
        url: Optional[str] = None,
        retries: int = DEFAULT_RETRIES,
        timeout: float = DEFAULT_TIMEOUT,
        max_tokens: int = DEFAULT_MAX_TOKENS,
        batch_size: int = 32,
        client: Optional[httpx.Client] = None,
    ):
        url = url or os.environ.get(EMBED_URL_ENV)
        if not url:
            raise BackendUnavailable(f"no embedding endpoint configured (set {EMBED_URL_ENV})")
        self.dimension = dimension
        self.url = url
        self.retries = retries
        self.timeout = timeout
        self.max_tokens = max_tokens
        self.batch_size = batch_size
        self._client = client

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        for t in texts:
            _check_length(t, self.max_tokens)
        out = np.zeros((len(texts), self.dimension), dtype=np.float64)
        for start in range(0, len(texts), self.batch_size):
            batch = list(texts[start:start + self.batch_size])
            vectors = post_with_retries(
                self.url,
                {"texts": batch},
                retries=self.retries,
                timeout=self.timeout,
                client=self._client,
                accept=_vectors_or_none,
            )
            if len(vectors) != len(batch):
                raise BackendUnavailable(f"asked for {len(batch)} vectors, got {len(vectors)}")
            for i, v in enumerate(vectors):
                arr = np.asarray(v, dtype=np.float64)
                if arr.ndim != 1 or arr.shape[0] != self.dimension:
                    raise DimensionMismatch(f"backend returned dimension {arr.shape[-1] if arr.ndim else 0}, expected {self.dimension}")
                norm = np.linalg.norm(arr)
                out[start + i] = arr / norm if norm > 0 else arr
        return out


def _vectors_or_none(resp: httpx.Response):
    try:
        body = resp.json()
    except ValueError:
        return None
    vectors = body.get("vectors") if isinstance(body, dict) else None
    return vectors if isinstance(vectors, list) and vectors else None
