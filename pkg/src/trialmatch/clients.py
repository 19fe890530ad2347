"""Inference backends for the judge, reasoner and augmenter roles.

Every role talks to the same chat-completion endpoint and differs only in the
prompt it renders.  Each role also has a deterministic mock used in tests and
offline runs.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol, Sequence, Union

import httpx

from .corpus import Criterion, CriterionKind, Trial
from .errors import (
    AugmenterMalformedOutput,
    AugmenterUnavailable,
    BackendUnavailable,
    JudgeUnavailable,
)
from .index.tokenize import content_tokens
from .normalize import ConceptDictionary, EntityClass
from .patient import MAX_OTHER_CONDITIONS, MAX_SYNONYMS_PER_CONDITION, PatientProfile, dedupe, split_sentences
from .transport import BACKOFF_BASE, DEFAULT_RETRIES, DEFAULT_TIMEOUT, post_with_retries

logger = logging.getLogger(__name__)

LLM_URL_ENV = "TRIALMATCH_LLM_URL"

# ---------------------------------------------------------------------------
# prompts

_PLACEHOLDER = re.compile(r"\{(patient_text|criterion_text|eligibility_criteria_text|patient_profile)\}")


def load_prompt(name: str) -> str:
    """Read a bundled template: ``relevance``, ``eligibility`` or ``augmentation``."""
    return resources.files("trialmatch").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")


def render_prompt(template: str, **values: str) -> str:
    """Fill ``{name}`` placeholders in one pass; other braces are left alone."""

    def sub(m: re.Match) -> str:
        key = m.group(1)
        return values[key] if key in values else m.group(0)

    return _PLACEHOLDER.sub(sub, template)


# ---------------------------------------------------------------------------
# transport


@dataclass(frozen=True)
class InferenceRequest:
    messages: tuple[tuple[str, str], ...]
    max_tokens: int = 1024
    timeout: float = DEFAULT_TIMEOUT
    retries: int = DEFAULT_RETRIES
    temperature: float = 0.0

    def __post_init__(self):
        if self.temperature != 0:
            raise ValueError("temperature is fixed at 0")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")

    def payload(self) -> dict:
        return {
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "temperature": 0,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class Completion:
    text: str
    yes_probability: Optional[float] = None


def _completion_from_response(resp: httpx.Response) -> Optional[Completion]:
    try:
        body = resp.json()
    except ValueError:
        # not JSON: the body is the completion
        return Completion(resp.text) if resp.text.strip() else None
    text = _find_text(body)
    if text is None and isinstance(body, str):
        text = body
    if not text or not text.strip():
        return None
    return Completion(text, _yes_probability(body))


def _find_text(body) -> Optional[str]:
    if not isinstance(body, dict):
        return None
    choices = body.get("choices")
    if isinstance(choices, list) and choices and isinstance(choices[0], dict):
        first = choices[0]
        msg = first.get("message")
        if isinstance(msg, dict) and isinstance(msg.get("content"), str):
            return msg["content"]
        if isinstance(first.get("text"), str):
            return first["text"]
    for key in ("completion", "text", "content", "output", "response"):
        if isinstance(body.get(key), str):
            return body[key]
    return None


def _yes_probability(body) -> Optional[float]:
    if not isinstance(body, dict):
        return None
    p = body.get("yes_probability")
    if isinstance(p, (int, float)) and 0.0 <= p <= 1.0:
        return float(p)
    try:
        token = body["choices"][0]["logprobs"]["content"][0]
        word = token["token"].strip().lower()
        prob = math.exp(token["logprob"])
    except (KeyError, IndexError, TypeError, ValueError):
        return None
    if word == "yes":
        return prob
    if word == "no":
        return 1.0 - prob
    return None


class HttpChatClient:
    """Chat-completion client; safe to share between threads."""

    def __init__(
        self,
        url: Optional[str] = None,
        client: Optional[httpx.Client] = None,
        backoff: float = BACKOFF_BASE,
        sleep: Callable[[float], None] = time.sleep,
    ):
        url = url or os.environ.get(LLM_URL_ENV)
        if not url:
            raise BackendUnavailable(f"no inference endpoint configured (set {LLM_URL_ENV})")
        self.url = url
        self._client = client
        self._backoff = backoff
        self._sleep = sleep

    def complete_full(self, request: InferenceRequest) -> Completion:
        return post_with_retries(
            self.url,
            request.payload(),
            retries=request.retries,
            timeout=request.timeout,
            client=self._client,
            accept=_completion_from_response,
            backoff=self._backoff,
            sleep=self._sleep,
        )

    def complete(self, request: InferenceRequest) -> str:
        return self.complete_full(request).text


class ChatClient(Protocol):
    def complete_full(self, request: InferenceRequest) -> Completion: ...


# ---------------------------------------------------------------------------
# JSON extraction shared by the reasoner and augmenter parsers

_FENCE = re.compile(r"```(?:json)?", re.I)


def extract_json_object(text: str) -> Optional[dict]:
    """First JSON object in ``text``, tolerating code fences and chatter."""
    cleaned = _FENCE.sub("", text or "")
    decoder = json.JSONDecoder()
    start = cleaned.find("{")
    while start >= 0:
        try:
            obj, _ = decoder.raw_decode(cleaned, start)
        except ValueError:
            start = cleaned.find("{", start + 1)
            continue
        if isinstance(obj, dict):
            return obj
        start = cleaned.find("{", start + 1)
    return None


# ---------------------------------------------------------------------------
# judge


@dataclass(frozen=True)
class Judgement:
    relevance: float
    flags: tuple[str, ...] = ()


class MockJudge:
    """Relevant iff the pair shares a concept id or at least two content tokens."""

    def judge(self, statement: str, criterion: Criterion, statement_concepts: Iterable[str] = ()) -> Judgement:
        criterion_concepts = {m.concept_id for m in criterion.entities if m.concept_id}
        if criterion_concepts & set(statement_concepts):
            return Judgement(1.0)
        shared = content_tokens(statement) & content_tokens(criterion.text)
        return Judgement(1.0 if len(shared) >= 2 else 0.0)


class HttpJudge:
    """Sends the relevance prompt and maps Yes/No (or P(Yes)) to [0, 1]."""

    def __init__(self, client: ChatClient, retries: int = DEFAULT_RETRIES, max_tokens: int = 4, timeout: float = DEFAULT_TIMEOUT):
        self.client = client
        self.retries = retries
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.template = load_prompt("relevance")

    def request(self, statement: str, criterion: Criterion) -> InferenceRequest:
        prompt = render_prompt(self.template, patient_text=statement, criterion_text=criterion.text)
        return InferenceRequest((("user", prompt),), max_tokens=self.max_tokens, timeout=self.timeout, retries=self.retries)

    def judge(self, statement: str, criterion: Criterion, statement_concepts: Iterable[str] = ()) -> Judgement:
        request = self.request(statement, criterion)
        for _ in range(self.retries + 1):
            try:
                completion = self.client.complete_full(request)
            except BackendUnavailable as exc:
                raise JudgeUnavailable(str(exc)) from exc
            if completion.yes_probability is not None:
                return Judgement(completion.yes_probability)
            answer = completion.text.strip().strip('."\'').lower()
            if answer == "yes":
                return Judgement(1.0)
            if answer == "no":
                return Judgement(0.0)
            logger.info("judge gave unusable answer %r for %s", completion.text[:40], criterion.criterion_id)
        return Judgement(0.0, ("judge_unparseable",))


# ---------------------------------------------------------------------------
# reasoner


@dataclass(frozen=True)
class MockRule:
    requires: tuple[str, ...] = ()
    forbids: tuple[str, ...] = ()


@dataclass
class MockRuleSet:
    """Per-criterion concept annotations driving the mock reasoner."""

    rules: dict[str, MockRule] = field(default_factory=dict)

    def get(self, criterion_id: str) -> Optional[MockRule]:
        return self.rules.get(criterion_id)

    @classmethod
    def from_dict(cls, data: dict) -> "MockRuleSet":
        return cls(
            {
                cid: MockRule(tuple(r.get("requires", [])), tuple(r.get("forbids", [])))
                for cid, r in data.items()
            }
        )

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "MockRuleSet":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return {
            cid: {"requires": list(r.requires), "forbids": list(r.forbids)}
            for cid, r in sorted(self.rules.items())
        }

    @classmethod
    def from_entities(cls, trials: Iterable[Trial]) -> "MockRuleSet":
        """Fallback annotations: inclusions require, exclusions forbid, their normalized concepts."""
        rules = {}
        for t in trials:
            for c in t.criteria:
                ids = tuple(dict.fromkeys(m.concept_id for m in c.entities if m.concept_id))
                if not ids:
                    continue
                if c.kind is CriterionKind.INCLUSION:
                    rules[c.criterion_id] = MockRule(requires=ids)
                else:
                    rules[c.criterion_id] = MockRule(forbids=ids)
        return cls(rules)


def _names(ids: Sequence[str], dictionary: Optional[ConceptDictionary], profile: PatientProfile) -> str:
    labels = dict(profile.structured_terms)
    out = []
    for cid in ids:
        if dictionary is not None and cid in dictionary:
            out.append(dictionary.get(cid).label)
        else:
            out.append(labels.get(cid, cid))
    return ", ".join(out)


def mock_reason(
    profile: PatientProfile,
    criteria: Sequence[Criterion],
    rules: MockRuleSet,
    dictionary: Optional[ConceptDictionary] = None,
) -> str:
    """Eligibility response in the reasoner's JSON schema, from concept rules."""
    carried = profile.concept_ids
    inclusion, exclusion = [], []
    for c in criteria:
        rule = rules.get(c.criterion_id)
        if c.kind is CriterionKind.INCLUSION:
            if rule and rule.requires and all(r in carried for r in rule.requires):
                verdict = ("Met", f"Patient record lists {_names(rule.requires, dictionary, profile)}.")
            elif rule and rule.requires:
                missing = [r for r in rule.requires if r not in carried]
                verdict = ("Unclear", f"No record of {_names(missing, dictionary, profile)} in the patient profile.")
            else:
                verdict = ("Unclear", "The patient profile does not address this criterion.")
            inclusion.append({"Criterion": c.text, "Classification": verdict[0], "Justification": verdict[1]})
        else:
            hits = [f for f in (rule.forbids if rule else ()) if f in carried]
            if hits:
                verdict = ("Violated", f"Patient record lists {_names(hits, dictionary, profile)}.")
            elif rule and rule.forbids:
                verdict = ("Not Violated", f"No record of {_names(rule.forbids, dictionary, profile)} in the patient profile.")
            else:
                verdict = ("Unclear", "The patient profile does not address this criterion.")
            exclusion.append({"Criterion": c.text, "Classification": verdict[0], "Justification": verdict[1]})

    inc = [v["Classification"] for v in inclusion]
    exc = [v["Classification"] for v in exclusion]
    if "Violated" in exc or "Not Met" in inc:
        decision, recap = "Ineligible", "At least one criterion disqualifies the patient."
    elif all(v == "Met" for v in inc) and all(v == "Not Violated" for v in exc):
        decision, recap = "Eligible", "All assessed criteria are satisfied."
    else:
        decision, recap = "Likely Eligible", "No disqualifying criterion found; some criteria lack data."
    return json.dumps(
        {
            "Inclusion_Criteria_Evaluation": inclusion,
            "Exclusion_Criteria_Evaluation": exclusion,
            "Recap": recap,
            "Final Decision": decision,
        },
        indent=2,
        ensure_ascii=False,
    )


class MockReasoner:
    def __init__(self, rules: MockRuleSet, dictionary: Optional[ConceptDictionary] = None):
        self.rules = rules
        self.dictionary = dictionary

    def reason(self, profile: PatientProfile, trial: Trial, patient_block: str) -> str:
        return mock_reason(profile, trial.criteria, self.rules, self.dictionary)


class HttpReasoner:
    """Sends the eligibility prompt; returns the raw completion for the rank parser."""

    def __init__(self, client: ChatClient, retries: int = DEFAULT_RETRIES, max_tokens: int = 4096, timeout: float = DEFAULT_TIMEOUT):
        self.client = client
        self.retries = retries
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.template = load_prompt("eligibility")

    def request(self, trial: Trial, patient_block: str) -> InferenceRequest:
        prompt = render_prompt(
            self.template,
            eligibility_criteria_text=trial.criteria_block(),
            patient_profile=patient_block,
        )
        return InferenceRequest((("user", prompt),), max_tokens=self.max_tokens, timeout=self.timeout, retries=self.retries)

    def reason(self, profile: PatientProfile, trial: Trial, patient_block: str) -> str:
        return self.client.complete_full(self.request(trial, patient_block)).text


# ---------------------------------------------------------------------------
# augmenters


class MockAugmenter:
    """Expansion built only from the profile's own text and dictionary entries."""

    def __init__(self, dictionary: Optional[ConceptDictionary] = None):
        self.dictionary = dictionary

    def augment(self, profile: PatientProfile) -> dict[str, list[str]]:
        if not profile.narrative.strip():
            return {"main_conditions": [], "other_conditions": [], "expanded_sentences": []}
        main: list[str] = []
        other: list[str] = []
        for m in profile.entities:
            if m.entity_class is EntityClass.DISEASE and m.concept_id:
                main.append(m.concept_label or m.surface)
                if self.dictionary is not None and m.concept_id in self.dictionary:
                    main.extend(self.dictionary.get(m.concept_id).synonyms[:MAX_SYNONYMS_PER_CONDITION])
            else:
                other.append(m.concept_label or m.surface)
        other.extend(label for _, label in profile.structured_terms)
        main = dedupe(main)
        if not main:
            # the contract needs a primary condition: fall back to the first structured term or line
            main = [profile.structured_terms[0][1]] if profile.structured_terms else [split_sentences(profile.narrative)[0]]
        taken = {s.lower() for s in main}
        other = [s for s in dedupe(other) if s.lower() not in taken][:MAX_OTHER_CONDITIONS]
        return {
            "main_conditions": main,
            "other_conditions": other,
            "expanded_sentences": split_sentences(profile.narrative),
        }


def _string_list(value) -> Optional[list[str]]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        return None
    return [v for v in value if v.strip()]


def parse_augmentation(text: str) -> Optional[dict[str, list[str]]]:
    obj = extract_json_object(text)
    if obj is None:
        return None
    out = {}
    for key in ("main_conditions", "other_conditions", "expanded_sentences"):
        values = _string_list(obj.get(key))
        if values is None:
            return None
        out[key] = values
    if not out["main_conditions"]:
        return None
    out["other_conditions"] = out["other_conditions"][:MAX_OTHER_CONDITIONS]
    return out


class LlmAugmenter:
    def __init__(self, client: ChatClient, retries: int = DEFAULT_RETRIES, max_tokens: int = 2048, timeout: float = DEFAULT_TIMEOUT):
        self.client = client
        self.retries = retries
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.template = load_prompt("augmentation")

    def request(self, profile: PatientProfile) -> InferenceRequest:
        return InferenceRequest(
            (("system", self.template), ("user", profile.narrative)),
            max_tokens=self.max_tokens,
            timeout=self.timeout,
            retries=self.retries,
        )

    def augment(self, profile: PatientProfile) -> dict[str, list[str]]:
        request = self.request(profile)
        for attempt in range(self.retries + 1):
            try:
                text = self.client.complete_full(request).text
            except BackendUnavailable as exc:
                raise AugmenterUnavailable(str(exc)) from exc
            parsed = parse_augmentation(text)
            if parsed is not None:
                return parsed
            logger.warning("augmenter output unusable (attempt %d)", attempt + 1)
        raise AugmenterMalformedOutput(f"no valid expansion for {profile.patient_id} after {self.retries + 1} attempts")
