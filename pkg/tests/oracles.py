"""Brute-force references written independently of the package, shared by unit and acceptance tests."""

import math
import random

from trialmatch.eval import Qrels, mrr, ndcg_at_k, overall_recall_and_mar, precision_at_k


def qrels_from(by_patient):
    return Qrels({(p, t): g for p, grades in by_patient.items() for t, g in grades.items()})


def ref_precision(grades_in_order, k):
    top = list(grades_in_order[:k]) + [0] * max(0, k - len(grades_in_order))
    return sum(1.0 for g in top if g == 2) / k


def ref_ndcg(grades_in_order, all_grades, k):
    def gain(seq):
        total = 0.0
        for pos in range(1, min(k, len(seq)) + 1):
            total += seq[pos - 1] / math.log2(pos + 1)
        return total

    ideal = gain(sorted(all_grades, reverse=True))
    return 0.0 if ideal == 0 else gain(grades_in_order) / ideal


def ref_first_rank(grades_in_order, k):
    for pos in range(1, min(k, len(grades_in_order)) + 1):
        if grades_in_order[pos - 1] == 2:
            return pos
    return None


def ref_mean_std(xs):
    if not xs:
        return 0.0, 0.0
    m = sum(xs) / len(xs)
    return m, math.sqrt(sum((x - m) ** 2 for x in xs) / len(xs))


def random_instance(rng: random.Random):
    patients = {}
    rankings = {}
    for p in range(rng.randint(1, 5)):
        pid = f"p{p}"
        pool = [f"t{i}" for i in range(rng.randint(0, 60))]
        grades = {t: rng.choice((0, 0, 1, 2)) for t in pool if rng.random() < 0.7}
        ranking = rng.sample(pool, min(len(pool), rng.randint(0, 50)))
        patients[pid] = grades
        rankings[pid] = ranking
    return rankings, patients


def check_instance_against_reference(rankings, by_patient, k):
    qrels = qrels_from(by_patient)
    rr_values, averages = [], []
    for pid, ranking in rankings.items():
        grades = by_patient[pid]
        in_order = [grades.get(t, 0) for t in ranking]
        assert abs(precision_at_k(ranking, grades, k) - ref_precision(in_order, k)) <= 1e-9
        assert abs(ndcg_at_k(ranking, grades, k) - ref_ndcg(in_order, list(grades.values()), k)) <= 1e-9
        first = ref_first_rank(in_order, k)
        rr_values.append(1.0 / first if first else 0.0)
        hits = [pos for pos in range(1, min(k, len(in_order)) + 1) if in_order[pos - 1] == 2]
        if hits:
            averages.append(sum(hits) / len(hits))
    mean, std = mrr(rankings, qrels, k)
    ref_mean, ref_std = ref_mean_std(rr_values)
    assert abs(mean - ref_mean) <= 1e-9 and abs(std - ref_std) <= 1e-9
    recall, mar, mar_std = overall_recall_and_mar(rankings, qrels, k)
    assert abs(recall - len(averages) / len(rankings)) <= 1e-9
    if averages:
        ref_mar, ref_mar_std = ref_mean_std(averages)
        assert abs(mar - ref_mar) <= 1e-9 and abs(mar_std - ref_mar_std) <= 1e-9
    else:
        assert mar is None and mar_std is None



VOCAB = [f"w{i}" for i in range(20)]


def naive_bm25(docs: dict[str, list[str]], query: list[str], doc_id: str, k1=1.2, b=0.75) -> float:
    n = len(docs)
    avg = sum(len(toks) for toks in docs.values()) / n
    toks = docs[doc_id]
    score = 0.0
    for term in query:
        df = sum(1 for d in docs.values() if term in d)
        idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
        tf = toks.count(term)
        score += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(toks) / avg))
    return score


def random_corpus(rng: random.Random):
    docs = {}
    for i in range(rng.randint(1, 50)):
        docs[f"d{i:02d}"] = [rng.choice(VOCAB) for _ in range(rng.randint(1, 30))]
    query = [rng.choice(VOCAB) for _ in range(rng.randint(1, 6))]
    return docs, query
