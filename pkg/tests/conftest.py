import json
import shutil
from pathlib import Path

import pytest

from trialmatch.clients import MockRuleSet
from trialmatch.config import EngineConfig
from trialmatch.normalize import ConceptDictionary
from trialmatch.pipeline import Engine, index_corpus, ingest
from trialmatch.synthetic import build_synthetic

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"

ACCEPTANCE_TITLES = {
    "test_ac01_metric_oracles": "AC1 metric oracle equivalence",
    "test_ac02_bm25_correctness": "AC2 BM25 correctness",
    "test_ac03_hnsw_quality": "AC3 HNSW quality",
    "test_ac04_segmentation_golden": "AC4 segmentation golden suite",
    "test_ac05_composite_properties": "AC5 composite-score properties",
    "test_ac06_aggregation_exactness": "AC6 aggregation exactness",
    "test_ac07_ideal_candidates": "AC7 ideal-candidate replica",
    "test_ac08_retrieval_monotonicity": "AC8 retrieval monotonicity",
    "test_ac09_determinism": "AC9 determinism",
    "test_ac10_prefilter_soundness": "AC10 prefilter soundness",
}
_acceptance: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if name not in ACCEPTANCE_TITLES:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = ""
        if report.outcome != "passed":
            detail = str(report.longrepr).strip().splitlines()[-1][:160]
        _acceptance[name] = ("PASS" if report.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, title in ACCEPTANCE_TITLES.items():
        if name in _acceptance:
            status, detail = _acceptance[name]
            terminalreporter.write_line(f"{title}: {status}" + (f"  ({detail})" if detail else ""))


@pytest.fixture(scope="session")
def breast_packet() -> str:
    return (FIXTURES / "phenopacket_breast.json").read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("synthetic")
    build_synthetic(seed=0).write(out)
    return out


@pytest.fixture(scope="session")
def synthetic_index(synthetic_dir, tmp_path_factory) -> Path:
    """Index directory for the synthetic corpus, built once per session."""
    dictionary = ConceptDictionary.from_ndjson(synthetic_dir / "dictionary.ndjson")
    trials = ingest(synthetic_dir / "corpus", dictionary)
    index_dir = tmp_path_factory.mktemp("synthetic_index")
    index_corpus(trials, index_dir, EngineConfig(), dictionary, MockRuleSet.from_file(synthetic_dir / "mock_rules.json"))
    return index_dir


@pytest.fixture(scope="session")
def synthetic_engine(synthetic_index) -> Engine:
    return Engine.open(synthetic_index, EngineConfig())


@pytest.fixture
def index_copy(synthetic_index, tmp_path) -> Path:
    target = tmp_path / "index"
    shutil.copytree(synthetic_index, target)
    return target


def load_json(path: Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
