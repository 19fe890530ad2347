import json

import httpx
import numpy as np
import pytest

from trialmatch.errors import BackendUnavailable, DimensionMismatch, IndexFormatError, TextTooLong
from trialmatch.index.embed import HttpEmbedder, MockEmbedder
from trialmatch.index.hnsw import HNSWIndex
from trialmatch.index.lexical import IndexLevel, build_lexical_index, lexical_topk
from trialmatch.index.store import load_indices, read_manifest, save_indices


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_mock_embedder_is_deterministic_and_unit_norm():
    e = MockEmbedder(64)
    a, b = e.embed("breast carcinoma"), MockEmbedder(64).embed("breast carcinoma")
    assert np.array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0)
    assert np.linalg.norm(e.embed("")) == pytest.approx(1.0)


def test_mock_embedder_similarity_ordering():
    e = MockEmbedder()
    base = e.embed("breast carcinoma")
    assert cosine(base, e.embed("breast carcinoma metastatic")) > cosine(base, e.embed("renal transplant rejection"))


def test_mock_embedder_rejects_overlong_text():
    with pytest.raises(TextTooLong):
        MockEmbedder(8, max_tokens=3).embed("one two three four")


def embed_client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def test_http_embedder_normalizes_vectors():
    def handler(request):
        texts = json.loads(request.content)["texts"]
        return httpx.Response(200, json={"vectors": [[3.0, 4.0] for _ in texts]})

    e = HttpEmbedder(2, url="http://embed", client=embed_client(handler))
    assert e.embed_many(["a", "b"]).tolist() == [[0.6, 0.8], [0.6, 0.8]]


def test_http_embedder_wrong_dimension_surfaces():
    e = HttpEmbedder(3, url="http://embed", client=embed_client(lambda r: httpx.Response(200, json={"vectors": [[1.0, 0.0]]})))
    with pytest.raises(DimensionMismatch):
        e.embed("x")


def test_http_embedder_needs_url(monkeypatch):
    monkeypatch.delenv("TRIALMATCH_EMBED_URL", raising=False)
    with pytest.raises(BackendUnavailable):
        HttpEmbedder(3)


def test_save_load_round_trip(tmp_path):
    docs = [(f"d{i}", f"term{i % 5} shared text {i}", [f"syn{i % 3}"]) for i in range(40)]
    lexical = build_lexical_index(docs, IndexLevel.CRITERION)
    e = MockEmbedder(32)
    vectors = HNSWIndex(32)
    for d, text, _ in docs:
        vectors.insert(d, e.embed(text))
    vectors.finalize()
    save_indices(tmp_path, {"lex": lexical, "vec": vectors}, {"note": "x"})
    loaded = load_indices(tmp_path)
    assert loaded["lex"].postings == lexical.postings
    assert loaded["lex"].doc_lengths == lexical.doc_lengths
    assert loaded["lex"].level is IndexLevel.CRITERION
    assert lexical_topk(loaded["lex"], ["term1", "syn2"], 10) == lexical_topk(lexical, ["term1", "syn2"], 10)
    for text in ("term3 shared", "text 7", "unrelated"):
        q = e.embed(text)
        assert loaded["vec"].search(q, 5) == vectors.search(q, 5)
    assert read_manifest(tmp_path)["meta"] == {"note": "x"}


def test_empty_indices_round_trip(tmp_path):
    v = HNSWIndex(4)
    v.finalize()
    save_indices(tmp_path, {"lex": build_lexical_index([]), "vec": v})
    loaded = load_indices(tmp_path)
    assert loaded["lex"].doc_count == 0
    assert len(loaded["vec"]) == 0


def test_bad_index_directory(tmp_path):
    with pytest.raises(IndexFormatError):
        load_indices(tmp_path)
    (tmp_path / "manifest.json").write_text('{"format_version": 99, "indices": {}}')
    with pytest.raises(IndexFormatError):
        load_indices(tmp_path)
