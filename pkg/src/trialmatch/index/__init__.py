from .embed import DEFAULT_DIMENSION, Embedder, HttpEmbedder, MockEmbedder
from .hnsw import HNSWIndex
from .lexical import IndexLevel, LexicalIndex, bm25_score, build_lexical_index, lexical_topk
from .store import load_indices, save_indices
from .tokenize import tokenize

__all__ = [
    "DEFAULT_DIMENSION",
    "Embedder",
    "HNSWIndex",
    "HttpEmbedder",
    "IndexLevel",
    "LexicalIndex",
    "MockEmbedder",
    "bm25_score",
    "build_lexical_index",
    "lexical_topk",
    "load_indices",
    "save_indices",
    "tokenize",
]
