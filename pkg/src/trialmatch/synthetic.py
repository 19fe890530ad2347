"""Deterministic synthetic corpus where each patient fits exactly one trial.

Trials cross 20 diseases with 10 driver genes. Each trial requires its
disease, its gene and a good performance status. It excludes every other
disease, every other gene and one prior drug. Patient ``i`` carries disease
``i``, gene ``i % 10`` and a prior drug that differs from the one its own trial
excludes. Every other trial therefore has at least one violated exclusion.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

BREAST = "NCIT:C4872"
ECOG = "TM:ECOG01"

# (label, concept id, synonyms, restricted sex)
DISEASES: tuple[tuple[str, str, tuple[str, ...], str], ...] = (
    ("breast carcinoma", BREAST, ("breast cancer", "mammary carcinoma"), ""),
    ("non-small cell lung carcinoma", "TM:D01", ("non-small cell lung cancer", "NSCLC"), ""),
    ("colorectal carcinoma", "TM:D02", ("colorectal cancer",), ""),
    ("pancreatic adenocarcinoma", "TM:D03", ("pancreatic cancer",), ""),
    ("ovarian carcinoma", "TM:D04", ("ovarian cancer",), "FEMALE"),
    ("prostate adenocarcinoma", "TM:D05", ("prostate cancer",), "MALE"),
    ("melanoma", "TM:D06", ("malignant melanoma",), ""),
    ("gastric adenocarcinoma", "TM:D07", ("gastric cancer", "stomach cancer"), ""),
    ("hepatocellular carcinoma", "TM:D08", ("liver cancer", "HCC"), ""),
    ("renal cell carcinoma", "TM:D09", ("kidney cancer", "RCC"), ""),
    ("urothelial carcinoma", "TM:D10", ("bladder cancer",), ""),
    ("glioblastoma", "TM:D11", ("glioblastoma multiforme",), ""),
    ("thyroid carcinoma", "TM:D12", ("thyroid cancer",), ""),
    ("cholangiocarcinoma", "TM:D13", ("bile duct cancer",), ""),
    ("endometrial carcinoma", "TM:D14", ("endometrial cancer",), "FEMALE"),
    ("head and neck squamous cell carcinoma", "TM:D15", ("head and neck cancer", "HNSCC"), ""),
    ("esophageal carcinoma", "TM:D16", ("esophageal cancer",), ""),
    ("small cell lung carcinoma", "TM:D17", ("small cell lung cancer", "SCLC"), ""),
    ("soft tissue sarcoma", "TM:D18", ("sarcoma of soft tissue",), ""),
    ("mesothelioma", "TM:D19", ("malignant mesothelioma",), ""),
)

GENES: tuple[tuple[str, str], ...] = (
    ("BRCA1", "HGNC:1100"),
    ("BRCA2", "HGNC:1101"),
    ("EGFR", "HGNC:3236"),
    ("ALK", "HGNC:427"),
    ("KRAS", "HGNC:6407"),
    ("BRAF", "HGNC:1097"),
    ("ROS1", "HGNC:10261"),
    ("RET", "HGNC:9967"),
    ("NTRK1", "HGNC:8031"),
    ("PIK3CA", "HGNC:8975"),
)

DRUGS: tuple[str, ...] = (
    "capecitabine", "gemcitabine", "carboplatin", "paclitaxel", "docetaxel", "cisplatin",
    "irinotecan", "oxaliplatin", "pemetrexed", "bevacizumab", "cetuximab", "everolimus",
)

_STATUSES = ("Recruiting", "Completed", "Active, not recruiting", "Withdrawn")
_PATIENTS = len(DISEASES)


def drug_id(index: int) -> str:
    return f"TM:R{index:02d}"


def trial_id(disease: int, gene: int) -> str:
    return f"NCT9{disease * len(GENES) + gene:07d}"


def trial_drug(disease: int, gene: int) -> int:
    return (3 * disease + gene) % len(DRUGS)


def patient_drug(i: int) -> int:
    return (3 * i + i % len(GENES) + 1) % len(DRUGS)


def patient_id(i: int) -> str:
    return f"ideal-{i + 1:02d}"


def designated_trial(i: int) -> str:
    return trial_id(i, i % len(GENES))


def dictionary_records() -> list[dict]:
    records = [
        {"id": cid, "label": label, "class": "DISEASE", "synonyms": list(syn)}
        for label, cid, syn, _ in DISEASES
    ]
    records += [{"id": gid, "label": sym, "class": "GENE_PROTEIN_MUTATION", "synonyms": []} for sym, gid in GENES]
    records += [{"id": drug_id(k), "label": d, "class": "DRUG_CHEMICAL", "synonyms": []} for k, d in enumerate(DRUGS)]
    records.append(
        {"id": ECOG, "label": "good performance status", "class": "OTHER", "synonyms": ["ECOG performance status of 0 to 1"]}
    )
    return records


def _trial_sex(disease: int, designated: bool, rng: random.Random) -> str:
    fixed = DISEASES[disease][3]
    if fixed:
        return fixed
    return "All" if designated else rng.choice(("All", "All", "Female", "Male"))


def trial_xml(disease: int, gene: int, rng: random.Random) -> bytes:
    label = DISEASES[disease][0]
    symbol = GENES[gene][0]
    drug = DRUGS[trial_drug(disease, gene)]
    designated = disease < _PATIENTS and gene == disease % len(GENES)
    if designated:
        status, lo, hi = "Recruiting", 18, 80
    else:
        status = rng.choice(_STATUSES)
        lo = rng.choice((18, 18, 21, 40))
        hi = rng.choice((65, 75, 80, 85))
    sex = _trial_sex(disease, designated, rng)
    criteria = (
        "Inclusion Criteria:\n\n"
        f"  1. Histologically or cytologically confirmed {label}.\n"
        f"  2. Documented {symbol} alteration in tumor tissue.\n"
        "  3. ECOG performance status of 0 to 1.\n\n"
        "Exclusion Criteria:\n\n"
        f"  1. Concurrent malignancy other than {label}.\n"
        f"  2. Tumor with a known driver alteration other than {symbol}.\n"
        f"  3. Prior treatment with {drug}.\n"
    )
    tid = trial_id(disease, gene)
    doc = f"""<?xml version="1.0" encoding="UTF-8"?>
<clinical_study>
  <id_info><nct_id>{tid}</nct_id></id_info>
  <brief_title>{escape(f"Targeted therapy for {symbol} altered {label}")}</brief_title>
  <official_title>{escape(f"An open label study of a {symbol} directed agent in adults with {label}")}</official_title>
  <brief_summary><textblock>{escape(f"This trial evaluates a targeted agent in patients with {label} whose tumors carry a {symbol} alteration.")}</textblock></brief_summary>
  <overall_status>{status}</overall_status>
  <start_date>January 2024</start_date>
  <condition>{escape(label)}</condition>
  <eligibility>
    <criteria><textblock>
{escape(criteria)}</textblock></criteria>
    <gender>{sex.title()}</gender>
    <minimum_age>{lo} Years</minimum_age>
    <maximum_age>{hi} Years</maximum_age>
  </eligibility>
</clinical_study>
"""
    return doc.encode("utf-8")


def mock_rules() -> dict:
    disease_ids = [cid for _, cid, _, _ in DISEASES]
    gene_ids = [gid for _, gid in GENES]
    rules = {}
    for d in range(len(DISEASES)):
        for g in range(len(GENES)):
            tid = trial_id(d, g)
            rules[f"{tid}-inc-0"] = {"requires": [disease_ids[d]], "forbids": []}
            rules[f"{tid}-inc-1"] = {"requires": [gene_ids[g]], "forbids": []}
            rules[f"{tid}-inc-2"] = {"requires": [ECOG], "forbids": []}
            rules[f"{tid}-exc-0"] = {"requires": [], "forbids": [x for x in disease_ids if x != disease_ids[d]]}
            rules[f"{tid}-exc-1"] = {"requires": [], "forbids": [x for x in gene_ids if x != gene_ids[g]]}
            rules[f"{tid}-exc-2"] = {"requires": [], "forbids": [drug_id(trial_drug(d, g))]}
    return rules


def phenopacket(i: int, rng: random.Random) -> dict:
    label, cid, _, fixed_sex = DISEASES[i]
    symbol, gid = GENES[i % len(GENES)]
    drug = patient_drug(i)
    sex = fixed_sex or ("FEMALE" if i % 2 == 0 else "MALE")
    pid = patient_id(i)
    return {
        "id": f"{pid}-packet",
        "subject": {"id": pid, "sex": sex, "ageAtDiagnosis": {"age": f"P{rng.randint(30, 75)}Y"}},
        "phenotypicFeatures": [{"type": {"id": ECOG, "label": "Good performance status"}}],
        "diseases": [{"term": {"id": cid, "label": label}}],
        "treatments": [{"agent": {"id": drug_id(drug), "label": DRUGS[drug]}}],
        "interpretations": [
            {
                "id": f"{pid}-interpretation",
                "diagnosis": {
                    "disease": {"id": cid, "label": label},
                    "genomicInterpretations": [{"status": "POSITIVE", "gene": {"id": gid, "symbol": symbol}}],
                },
                "description": f"Patient with {label} harboring a {symbol} alteration, previously treated with {DRUGS[drug]}.",
            }
        ],
    }


def qrels_text() -> str:
    lines = []
    for i in range(_PATIENTS):
        for d in range(len(DISEASES)):
            for g in range(len(GENES)):
                tid = trial_id(d, g)
                grade = 2 if tid == designated_trial(i) else 1 if d == i else 0
                lines.append(f"{patient_id(i)} 0 {tid} {grade}")
    return "".join(line + "\n" for line in lines)


@dataclass
class SyntheticCorpus:
    trials: dict[str, bytes]
    dictionary: list[dict]
    rules: dict
    patients: dict[str, dict]
    qrels: str
    designated: dict[str, str]

    def write(self, out_dir: Path) -> None:
        """Lay out ``corpus/``, ``patients/``, ``dictionary.ndjson``, ``mock_rules.json`` and ``qrels.txt``."""
        out_dir = Path(out_dir)
        (out_dir / "corpus").mkdir(parents=True, exist_ok=True)
        (out_dir / "patients").mkdir(parents=True, exist_ok=True)
        for tid, xml in self.trials.items():
            (out_dir / "corpus" / f"{tid}.xml").write_bytes(xml)
        for pid, packet in self.patients.items():
            (out_dir / "patients" / f"{pid}.json").write_text(json.dumps(packet, indent=1) + "\n", encoding="utf-8")
        (out_dir / "dictionary.ndjson").write_text(
            "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in self.dictionary), encoding="utf-8"
        )
        (out_dir / "mock_rules.json").write_text(json.dumps(self.rules, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        (out_dir / "qrels.txt").write_text(self.qrels, encoding="utf-8")
        (out_dir / "designated.json").write_text(json.dumps(self.designated, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def build_synthetic(seed: int = 0) -> SyntheticCorpus:
    rng = random.Random(seed)
    trials = {trial_id(d, g): trial_xml(d, g, rng) for d in range(len(DISEASES)) for g in range(len(GENES))}
    patients = {patient_id(i): phenopacket(i, rng) for i in range(_PATIENTS)}
    designated = {patient_id(i): designated_trial(i) for i in range(_PATIENTS)}
    return SyntheticCorpus(trials, dictionary_records(), mock_rules(), patients, qrels_text(), designated)
