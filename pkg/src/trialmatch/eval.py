"""Ranking metrics over TREC-style qrels and run files, plus report writers."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .errors import InvalidGrade, MalformedLine

GRADES = (0, 1, 2)
ELIGIBLE = 2
DEFAULT_KS = (5, 10, 20)

Grades = Mapping[str, int]  # trial_id -> grade, for one patient


@dataclass
class Qrels:
    judgments: dict[tuple[str, str], int] = field(default_factory=dict)

    def for_patient(self, patient_id: str) -> dict[str, int]:
        return {t: g for (p, t), g in self.judgments.items() if p == patient_id}

    def by_patient(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for (p, t), g in self.judgments.items():
            out.setdefault(p, {})[t] = g
        return out

    @property
    def patients(self) -> list[str]:
        return sorted({p for p, _ in self.judgments})


def load_qrels(trec_text: str) -> Qrels:
    """Parse ``topic_id iteration doc_id grade`` lines."""
    qrels = Qrels()
    for lineno, line in enumerate(trec_text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise MalformedLine(f"line {lineno}: expected 4 columns, got {len(parts)}")
        topic, _, doc, raw = parts
        try:
            grade = int(raw)
        except ValueError as exc:
            raise InvalidGrade(f"line {lineno}: grade {raw!r}") from exc
        if grade not in GRADES:
            raise InvalidGrade(f"line {lineno}: grade {grade} not in {GRADES}")
        key = (topic, doc)
        if key in qrels.judgments and qrels.judgments[key] != grade:
            raise MalformedLine(f"line {lineno}: conflicting grades for {topic} {doc}")
        qrels.judgments[key] = grade
    return qrels


def load_run(text: str) -> dict[str, list[str]]:
    """Rankings from 6-column TREC (``pid Q0 tid rank score tag``) or 4-column (``pid tid rank score``) lines."""
    rows: dict[str, list[tuple[int, float, str]]] = {}
    seen: set[tuple[str, str]] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) == 6:
            pid, _, tid, rank, score, _ = parts
        elif len(parts) == 4:
            pid, tid, rank, score = parts
        else:
            raise MalformedLine(f"line {lineno}: expected 4 or 6 columns, got {len(parts)}")
        try:
            r, s = int(rank), float(score)
        except ValueError as exc:
            raise MalformedLine(f"line {lineno}: bad rank/score") from exc
        if (pid, tid) in seen:
            raise MalformedLine(f"line {lineno}: duplicate entry for {pid} {tid}")
        seen.add((pid, tid))
        rows.setdefault(pid, []).append((r, -s, tid))
    return {pid: [tid for *_, tid in sorted(entries)] for pid, entries in rows.items()}


def format_run(rankings: Mapping[str, Sequence[tuple[str, float]]], tag: str = "trialmatch") -> str:
    lines = []
    for pid in sorted(rankings):
        for rank, (tid, score) in enumerate(rankings[pid], start=1):
            lines.append(f"{pid} Q0 {tid} {rank} {score:.6f} {tag}")
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# per-patient metrics


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")


def precision_at_k(ranking: Sequence[str], grades: Grades, k: int, literal_half: bool = False) -> float:
    """Fraction of the top ``k`` graded eligible.

    ``literal_half`` divides by ``2k`` instead of ``k`` for comparison with
    the formula as sometimes printed.
    """
    _check_k(k)
    hits = sum(1 for t in ranking[:k] if grades.get(t, 0) == ELIGIBLE)
    return hits / (2 * k if literal_half else k)


def dcg(gains: Iterable[float]) -> float:
    return sum(g / math.log2(i + 2) for i, g in enumerate(gains))


def ndcg_at_k(ranking: Sequence[str], grades: Grades, k: int) -> float:
    """Linear-gain nDCG; 0 when the patient has no graded trial."""
    _check_k(k)
    ideal = dcg(sorted(grades.values(), reverse=True)[:k])
    if ideal == 0:
        return 0.0
    return dcg(grades.get(t, 0) for t in ranking[:k]) / ideal


def reciprocal_rank(ranking: Sequence[str], grades: Grades, k: Optional[int] = None) -> float:
    top = ranking if k is None else ranking[:k]
    for i, t in enumerate(top, start=1):
        if grades.get(t, 0) == ELIGIBLE:
            return 1.0 / i
    return 0.0


def ground_truth_ranks(ranking: Sequence[str], grades: Grades, k: int) -> list[int]:
    return [i for i, t in enumerate(ranking[:k], start=1) if grades.get(t, 0) == ELIGIBLE]


# ---------------------------------------------------------------------------
# cross-patient metrics


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        return 0.0, 0.0
    return statistics.fmean(values), statistics.pstdev(values)


def mrr(rankings_by_patient: Mapping[str, Sequence[str]], qrels: Qrels, k: int) -> tuple[float, float]:
    """Mean and population std of reciprocal ranks within the top ``k``."""
    _check_k(k)
    by_patient = qrels.by_patient()
    rr = [reciprocal_rank(r, by_patient.get(p, {}), k) for p, r in sorted(rankings_by_patient.items())]
    return _mean_std(rr)


def overall_recall_and_mar(
    rankings_by_patient: Mapping[str, Sequence[str]], qrels: Qrels, k: int
) -> tuple[float, Optional[float], Optional[float]]:
    """(share of patients with a ground-truth trial in the top k, mean average rank, its std).

    Mean average rank covers only patients that retrieved a ground-truth trial
    and is ``None`` when none did.
    """
    _check_k(k)
    if not rankings_by_patient:
        return 0.0, None, None
    by_patient = qrels.by_patient()
    averages = []
    for p, r in sorted(rankings_by_patient.items()):
        ranks = ground_truth_ranks(r, by_patient.get(p, {}), k)
        if ranks:
            averages.append(statistics.fmean(ranks))
    recall = len(averages) / len(rankings_by_patient)
    if not averages:
        return recall, None, None
    mean, std = _mean_std(averages)
    return recall, mean, std


def recall_at_size(
    candidate_sets_by_size: Mapping[int, Mapping[str, Iterable[str]]], qrels: Qrels
) -> list[tuple[int, float]]:
    """Macro-averaged recall of graded (>= 1) trials for each retrieval size.

    Patients without any graded trial are left out of the average.
    """
    by_patient = qrels.by_patient()
    curve = []
    for size in sorted(candidate_sets_by_size):
        per_patient = []
        for p, ids in sorted(candidate_sets_by_size[size].items()):
            relevant = {t for t, g in by_patient.get(p, {}).items() if g >= 1}
            if relevant:
                per_patient.append(len(relevant & set(ids)) / len(relevant))
        curve.append((size, statistics.fmean(per_patient) if per_patient else 0.0))
    return curve


def prefix_sets(rankings_by_patient: Mapping[str, Sequence[str]], sizes: Iterable[int]) -> dict[int, dict[str, list[str]]]:
    return {s: {p: list(r[:s]) for p, r in rankings_by_patient.items()} for s in sizes}


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    ks: tuple[int, ...]
    per_patient: dict[str, dict[str, float]]
    aggregate: dict[str, float | None]
    recall_curve: list[tuple[int, float]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "ks": list(self.ks),
                "aggregate": self.aggregate,
                "per_patient": self.per_patient,
                "recall_curve": [{"size": s, "recall": r} for s, r in self.recall_curve],
            },
            indent=1,
            sort_keys=True,
        ) + "\n"

    def per_patient_csv(self) -> str:
        buf = io.StringIO()
        columns = [f"{m}@{k}" for m in ("P", "nDCG") for k in self.ks] + ["RR"]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["patient_id", *columns])
        for pid in sorted(self.per_patient):
            row = self.per_patient[pid]
            writer.writerow([pid, *(f"{row[c]:.6f}" for c in columns)])
        return buf.getvalue()

    def recall_curve_tsv(self) -> str:
        lines = ["size\trecall"] + [f"{s}\t{r:.6f}" for s, r in self.recall_curve]
        return "\n".join(lines) + "\n"


def evaluate(
    rankings_by_patient: Mapping[str, Sequence[str]],
    qrels: Qrels,
    ks: Sequence[int] = DEFAULT_KS,
    literal_half_precision: bool = False,
    curve_sizes: Sequence[int] = (),
) -> EvalReport:
    ks = tuple(sorted(set(ks)))
    for k in ks:
        _check_k(k)
    by_patient = qrels.by_patient()
    per_patient: dict[str, dict[str, float]] = {}
    for pid, ranking in sorted(rankings_by_patient.items()):
        grades = by_patient.get(pid, {})
        row: dict[str, float] = {}
        for k in ks:
            row[f"P@{k}"] = precision_at_k(ranking, grades, k, literal_half_precision)
            row[f"nDCG@{k}"] = ndcg_at_k(ranking, grades, k)
        row["RR"] = reciprocal_rank(ranking, grades, max(ks))
        per_patient[pid] = row

    agg: dict[str, float | None] = {"patients": len(per_patient)}
    for key in [f"{m}@{k}" for m in ("P", "nDCG") for k in ks]:
        values = [row[key] for row in per_patient.values()]
        agg[f"mean_{key}"] = statistics.fmean(values) if values else 0.0
        agg[f"median_{key}"] = statistics.median(values) if values else 0.0
    for k in ks:
        agg[f"MRR@{k}"], agg[f"MRR_std@{k}"] = mrr(rankings_by_patient, qrels, k)
        recall, mar, mar_std = overall_recall_and_mar(rankings_by_patient, qrels, k)
        agg[f"overall_recall@{k}"] = recall
        agg[f"MAR@{k}"] = mar
        agg[f"MAR_std@{k}"] = mar_std
    curve = recall_at_size(prefix_sets(rankings_by_patient, curve_sizes), qrels) if curve_sizes else []
    return EvalReport(ks, per_patient, agg, curve)
