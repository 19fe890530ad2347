"""Command-line entry point: synth, ingest, index, match, eval."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .clients import MockRuleSet
from .config import EngineConfig
from .corpus import dump_trials, load_trials
from .eval import evaluate, format_run, load_qrels, load_run
from .normalize import ConceptDictionary, Diagnostics
from .patient import parse_phenopacket
from .pipeline import Engine, index_corpus, ingest, report_json
from .rank import AggregationStrategy
from .retrieve import candidates_jsonl
from .synthetic import build_synthetic

logger = logging.getLogger("trialmatch")


class UsageError(Exception):
    """Invalid combination of command-line inputs."""


def write_atomic(path: Path, text: str) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def resolve_config(args: argparse.Namespace) -> EngineConfig:
    """Config file, then flags, then environment (backend URLs only)."""
    config = EngineConfig.load(args.config) if args.config else EngineConfig()
    backends = config.backends
    if args.mock_llm is not None:
        backends = replace(backends, mock_llm=args.mock_llm)
    if args.mock_embed is not None:
        backends = replace(backends, mock_embed=args.mock_embed)
    config = replace(config, backends=backends)
    if args.k is not None:
        r = config.retrieval
        config = replace(config, retrieval=replace(r, k_candidates=args.k, k_arm=max(r.k_arm, args.k)))
    if args.strategy is not None:
        config = replace(config, strategy=AggregationStrategy(args.strategy))
    if args.top_r is not None:
        config = replace(config, top_r=args.top_r)
    return config.with_environment()


def _dictionary(path: Optional[str], config: EngineConfig) -> Optional[ConceptDictionary]:
    source = path or config.paths.dictionary
    return ConceptDictionary.from_ndjson(source) if source else None


def cmd_synth(args, config: EngineConfig) -> dict:
    corpus = build_synthetic(args.seed)
    corpus.write(Path(args.out))
    return {"trials": len(corpus.trials), "patients": len(corpus.patients), "out": str(args.out)}


def cmd_ingest(args, config: EngineConfig) -> dict:
    corpus_dir = args.corpus or config.paths.corpus_dir
    if not corpus_dir:
        raise UsageError("no corpus directory given")
    diagnostics = Diagnostics()
    trials = ingest(Path(corpus_dir), _dictionary(args.dictionary, config), diagnostics)
    write_atomic(Path(args.out), dump_trials(trials))
    if args.diagnostics:
        write_atomic(Path(args.diagnostics), diagnostics.to_jsonl())
    return {"trials": len(trials), "criteria": sum(len(t.criteria) for t in trials), "unresolved_mentions": len(diagnostics.records)}


def cmd_index(args, config: EngineConfig) -> dict:
    index_dir = args.out or config.paths.index_dir
    if not index_dir:
        raise UsageError("no index directory given")
    trials = load_trials(Path(args.trials))
    if not trials:
        logger.warning("trial file %s is empty; writing empty indices", args.trials)
    rules_path = args.rules or config.paths.mock_rules
    rules = MockRuleSet.from_file(rules_path) if rules_path else None
    index_corpus(trials, Path(index_dir), config, _dictionary(args.dictionary, config), rules)
    return {"trials": len(trials), "index_dir": str(index_dir)}


def _patient_files(inputs: Sequence[str]) -> list[Path]:
    files: list[Path] = []
    for item in inputs:
        p = Path(item)
        files.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    if not files:
        raise UsageError("no patient files found")
    return files


def cmd_match(args, config: EngineConfig) -> dict:
    index_dir = args.index or config.paths.index_dir
    if not index_dir:
        raise UsageError("no index directory given")
    files = _patient_files(args.patients)
    out = Path(args.out)
    engine = Engine.open(Path(index_dir), config)
    run: dict[str, list[tuple[str, float]]] = {}
    candidate_lines = []
    for path in files:
        profile = parse_phenopacket(path.read_text(encoding="utf-8"))
        if profile.patient_id in run:
            raise UsageError(f"patient {profile.patient_id} given twice")
        report, hits = engine.match_with_candidates(profile)
        target = out if len(files) == 1 else out / f"{profile.patient_id}.json"
        write_atomic(target, report_json(report))
        run[profile.patient_id] = [(e["trial_id"], e["score"]) for e in report["ranking"]]
        candidate_lines.append(candidates_jsonl(profile.patient_id, hits))
    if args.run:
        write_atomic(Path(args.run), format_run(run))
    if args.candidates:
        write_atomic(Path(args.candidates), "".join(candidate_lines))
    return {"patients": len(files), "out": str(out)}


def cmd_eval(args, config: EngineConfig) -> dict:
    rankings = load_run(Path(args.run).read_text(encoding="utf-8"))
    qrels = load_qrels(Path(args.qrels).read_text(encoding="utf-8"))
    ks = tuple(int(k) for k in args.ks.split(",")) if args.ks else config.eval_ks
    sizes = tuple(int(s) for s in args.curve_sizes.split(",")) if args.curve_sizes else ()
    report = evaluate(rankings, qrels, ks, config.literal_half_precision, sizes)
    out = Path(args.out)
    write_atomic(out / "metrics.json", report.to_json())
    write_atomic(out / "per_patient.csv", report.per_patient_csv())
    if sizes:
        write_atomic(out / "recall_curve.tsv", report.recall_curve_tsv())
    return report.aggregate


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "index": cmd_index,
    "match": cmd_match,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON engine configuration")
    common.add_argument("--mock-llm", action=argparse.BooleanOptionalAction, default=None,
                        help="use the deterministic judge, reasoner and augmenter")
    common.add_argument("--mock-embed", action=argparse.BooleanOptionalAction, default=None,
                        help="use the hashing embedder")
    common.add_argument("--k", type=int, help="number of fused retrieval candidates")
    common.add_argument("--strategy", choices=[s.value for s in AggregationStrategy])
    common.add_argument("--top-r", type=int, help="trials sent to eligibility assessment")
    common.add_argument("--log-level", default="WARNING")

    parser = argparse.ArgumentParser(prog="trialmatch", description="Match patients to clinical trials.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic ideal-candidate corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ingest", parents=[common], help="parse XML trial records into trial JSON")
    p.add_argument("corpus", nargs="?", help="directory of XML records")
    p.add_argument("--out", required=True)
    p.add_argument("--dictionary", help="concept dictionary (NDJSON) for entity annotation")
    p.add_argument("--diagnostics", help="write unresolved mentions as JSONL")

    p = sub.add_parser("index", parents=[common], help="build lexical and vector indices")
    p.add_argument("trials", help="trial JSON produced by ingest")
    p.add_argument("--out", help="index directory")
    p.add_argument("--dictionary")
    p.add_argument("--rules", help="criterion annotations for the mock reasoner")

    p = sub.add_parser("match", parents=[common], help="rank trials for one or more patients")
    p.add_argument("patients", nargs="+", help="phenopacket files or directories")
    p.add_argument("--index", help="index directory")
    p.add_argument("--out", required=True, help="report file (one patient) or directory")
    p.add_argument("--run", help="also write a TREC run file")
    p.add_argument("--candidates", help="also write retrieval candidates as JSONL")

    p = sub.add_parser("eval", parents=[common], help="score a run file against qrels")
    p.add_argument("run")
    p.add_argument("qrels")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ks", help="comma-separated cutoffs")
    p.add_argument("--curve-sizes", help="comma-separated sizes for the recall curve")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        summary = COMMANDS[args.command](args, config)
    except Exception as exc:  # reported as JSON, never a traceback
        logger.debug("command failed", exc_info=True)
        json.dump({"error": type(exc).__name__, "message": str(exc), "command": args.command}, sys.stderr, sort_keys=True)
        sys.stderr.write("\n")
        return 1
    json.dump(summary, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
