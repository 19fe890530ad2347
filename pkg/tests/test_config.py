import json

import pytest

from trialmatch.cli import build_parser, resolve_config
from trialmatch.config import EngineConfig
from trialmatch.index.hnsw import DEFAULT_M
from trialmatch.rank import AggregationStrategy
from trialmatch.retrieve import FusionMode


def test_defaults():
    c = EngineConfig()
    r = c.retrieval
    assert (r.k_candidates, r.k_arm, r.alpha, r.fusion, r.rrf_k) == (500, 1000, 0.5, FusionMode.MINMAX, 60)
    assert (r.filter_age, r.filter_sex, r.filter_status, r.filter_location) == (True, True, True, False)
    assert (c.strategy, c.beta, c.top_r) == (AggregationStrategy.WEIGHTED, 0.7, 30)
    assert (c.criteria_per_trial, c.criteria_trial_cap) == (30, 10)
    assert c.backends.mock_llm and c.backends.mock_embed
    assert c.backends.reasoner_retries == c.backends.llm_retries == 2
    assert c.vectors.m == DEFAULT_M
    assert c.eval_ks == (5, 10, 20) and not c.literal_half_precision


def test_round_trip(tmp_path):
    c = EngineConfig.from_dict({"strategy": "LOG_NORM", "beta": 0.5, "retrieval": {"k_candidates": 50, "fusion": "rrf"}, "backends": {"judge_url": "http://j"}})
    assert EngineConfig.from_dict(json.loads(c.to_json())) == c
    path = tmp_path / "c.json"
    path.write_text(c.to_json())
    assert EngineConfig.load(path) == c


def test_validation():
    with pytest.raises(ValueError):
        EngineConfig.from_dict({"unknown": 1})
    with pytest.raises(ValueError):
        EngineConfig(beta=1.1)
    with pytest.raises(ValueError):
        EngineConfig(top_r=0)


def test_role_urls_fall_back_to_shared_endpoint():
    b = EngineConfig.from_dict({"backends": {"llm_url": "http://shared", "judge_url": "http://judge"}}).backends
    assert (b.url_for("judge"), b.url_for("reasoner"), b.url_for("augmenter")) == ("http://judge", "http://shared", "http://shared")


def test_precedence_file_then_flags_then_environment(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"top_r": 5, "strategy": "MAX", "backends": {"mock_llm": False, "llm_url": "http://file"}}))
    monkeypatch.delenv("TRIALMATCH_LLM_URL", raising=False)
    monkeypatch.delenv("TRIALMATCH_EMBED_URL", raising=False)
    args = build_parser().parse_args(["eval", "r", "q", "--out", "o", "--config", str(path)])
    c = resolve_config(args)
    assert (c.top_r, c.strategy, c.backends.mock_llm, c.backends.llm_url) == (5, AggregationStrategy.MAX, False, "http://file")

    args = build_parser().parse_args(["eval", "r", "q", "--out", "o", "--config", str(path), "--top-r", "7", "--mock-llm", "--k", "2000", "--strategy", "MEAN"])
    c = resolve_config(args)
    assert (c.top_r, c.strategy, c.backends.mock_llm) == (7, AggregationStrategy.MEAN, True)
    assert (c.retrieval.k_candidates, c.retrieval.k_arm) == (2000, 2000)

    monkeypatch.setenv("TRIALMATCH_LLM_URL", "http://env")
    monkeypatch.setenv("TRIALMATCH_EMBED_URL", "http://embed-env")
    c = resolve_config(args)
    assert (c.backends.llm_url, c.backends.embed_url) == ("http://env", "http://embed-env")
