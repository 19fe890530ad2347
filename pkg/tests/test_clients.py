import json
import socket
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import pytest

from trialmatch.clients import (
    HttpChatClient,
    HttpJudge,
    HttpReasoner,
    InferenceRequest,
    LlmAugmenter,
    MockRule,
    MockRuleSet,
    extract_json_object,
    load_prompt,
    mock_reason,
    parse_augmentation,
    render_prompt,
)
from trialmatch.corpus import Trial, criteria_from_block
from trialmatch.errors import AugmenterMalformedOutput, AugmenterUnavailable, BackendUnavailable, JudgeUnavailable, Timeout
from trialmatch.patient import PatientProfile
from trialmatch.transport import backoff_delay, post_with_retries

from conftest import GOLDEN


class StubServer:
    """Local HTTP server replying with scripted (status, content type, body) tuples."""

    def __init__(self):
        self.replies = []
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = self.rfile.read(int(self.headers["Content-Length"]))
                stub.requests.append(body)
                status, ctype, payload = stub.replies[min(len(stub.requests), len(stub.replies)) - 1]
                data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/v1/chat"
        threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.02}, daemon=True).start()

    def reply_json(self, obj, status=200):
        self.replies.append((status, "application/json", obj))

    def reply_text(self, text, status=200):
        self.replies.append((status, "text/plain", text.encode()))

    def sent(self, i=-1):
        return json.loads(self.requests[i])


@pytest.fixture
def stub():
    s = StubServer()
    yield s
    s.server.shutdown()
    s.server.server_close()


def chat(url):
    return HttpChatClient(url, sleep=lambda s: None)


def request(text="hi", retries=2):
    return InferenceRequest((("user", text),), retries=retries, timeout=5)


def test_request_invariants():
    with pytest.raises(ValueError):
        InferenceRequest((("user", "x"),), temperature=0.5)
    with pytest.raises(ValueError):
        InferenceRequest((("user", "x"),), retries=-1)
    assert request().payload() == {"messages": [{"role": "user", "content": "hi"}], "temperature": 0, "max_tokens": 1024}


def test_echo_yes(stub):
    stub.reply_json({"choices": [{"message": {"role": "assistant", "content": "Yes"}}]})
    assert chat(stub.url).complete(request("Say yes")) == "Yes"
    assert stub.sent()["temperature"] == 0


def test_non_json_body_is_raw_completion(stub):
    stub.reply_text("No, not enough detail")
    assert chat(stub.url).complete(request()) == "No, not enough detail"


def test_empty_then_good_response_is_retried(stub):
    stub.reply_json({"text": "   "})
    stub.reply_json({"completion": "Yes"})
    assert chat(stub.url).complete(request()) == "Yes"
    assert len(stub.requests) == 2


def test_server_error_retries_then_fails(stub):
    stub.reply_json({"error": "boom"}, status=500)
    with pytest.raises(BackendUnavailable):
        chat(stub.url).complete(request(retries=2))
    assert len(stub.requests) == 3


def closed_port_url():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    return f"http://127.0.0.1:{port}/"


def test_server_down_three_attempts_with_backoff():
    delays = []
    client = HttpChatClient(closed_port_url(), backoff=0.5, sleep=delays.append)
    with pytest.raises(BackendUnavailable):
        client.complete(request(retries=2))
    assert delays == [0.5, 1.0]
    assert backoff_delay(10) == 8.0


def test_timeout_surfaces_as_timeout():
    def handler(req):
        raise httpx.ReadTimeout("slow", request=req)

    with pytest.raises(Timeout):
        post_with_retries("http://x", {}, retries=1, client=httpx.Client(transport=httpx.MockTransport(handler)), sleep=lambda s: None)
    with pytest.raises(ValueError):
        post_with_retries("http://x", {}, retries=-1)


def test_missing_endpoint(monkeypatch):
    monkeypatch.delenv("TRIALMATCH_LLM_URL", raising=False)
    with pytest.raises(BackendUnavailable):
        HttpChatClient()
    monkeypatch.setenv("TRIALMATCH_LLM_URL", "http://env-host/")
    assert HttpChatClient().url == "http://env-host/"


# ---------------------------------------------------------------------------
# judge

CRIT = criteria_from_block("1. ECOG performance status 0 to 1", "NCT00000007")[0]
STATEMENT = "55-year-old woman with HER2-positive breast carcinoma {not a placeholder}"


@pytest.mark.parametrize("answer,relevance", [("Yes", 1.0), ("No", 0.0), (" yes.", 1.0), ('"No"', 0.0)])
def test_judge_text_answers(stub, answer, relevance):
    stub.reply_json({"choices": [{"message": {"content": answer}}]})
    assert HttpJudge(chat(stub.url)).judge(STATEMENT, CRIT).relevance == relevance


def test_judge_uses_yes_probability(stub):
    stub.reply_json({"choices": [{"message": {"content": "Yes"}, "logprobs": {"content": [{"token": "Yes", "logprob": -0.5}]}}]})
    import math

    assert HttpJudge(chat(stub.url)).judge(STATEMENT, CRIT).relevance == pytest.approx(math.exp(-0.5))
    stub.replies[:] = [(200, "application/json", {"text": "No", "yes_probability": 0.25})]
    stub.requests.clear()
    assert HttpJudge(chat(stub.url)).judge(STATEMENT, CRIT).relevance == 0.25


def test_judge_unusable_answer_flags_zero(stub):
    stub.reply_json({"text": "Maybe"})
    j = HttpJudge(chat(stub.url), retries=2).judge(STATEMENT, CRIT)
    assert (j.relevance, j.flags) == (0.0, ("judge_unparseable",))
    assert len(stub.requests) == 3


def test_judge_backend_down():
    with pytest.raises(JudgeUnavailable):
        HttpJudge(HttpChatClient(closed_port_url(), sleep=lambda s: None)).judge(STATEMENT, CRIT)


def test_relevance_prompt_bytes_match_golden(stub):
    stub.reply_json({"text": "Yes"})
    HttpJudge(chat(stub.url)).judge(STATEMENT, CRIT)
    sent = stub.sent()["messages"][0]["content"]
    assert sent == (GOLDEN / "prompt_relevance.txt").read_text(encoding="utf-8")


def test_eligibility_prompt_bytes_match_golden(stub):
    block = "Inclusion Criteria:\n1. Confirmed breast carcinoma\n2. ECOG 0 to 1\nExclusion Criteria:\n1. Prior trastuzumab"
    trial = Trial("NCT00000007", criteria=tuple(criteria_from_block(block, "NCT00000007")))
    stub.reply_text("reasoning text")
    text = HttpReasoner(chat(stub.url)).reason(PatientProfile("p"), trial, "Breast Carcinoma\nBRCA1")
    assert text == "reasoning text"
    sent = stub.sent()["messages"][0]["content"]
    assert sent == (GOLDEN / "prompt_eligibility.txt").read_text(encoding="utf-8")


def test_render_prompt_is_single_pass():
    template = "A={patient_text} B={criterion_text} C={unknown} {"
    assert render_prompt(template, patient_text="{criterion_text}", criterion_text="x") == "A={criterion_text} B=x C={unknown} {"
    for name in ("relevance", "eligibility", "augmentation"):
        assert load_prompt(name).strip()


# ---------------------------------------------------------------------------
# augmenter

AUGMENT = {"main_conditions": ["breast carcinoma"], "other_conditions": ["anemia"], "expanded_sentences": ["Patient has anemia."]}


def test_llm_augmenter_over_http(stub):
    stub.reply_text("Here you go:\n```json\n" + json.dumps(AUGMENT) + "\n```")
    out = LlmAugmenter(chat(stub.url)).augment(PatientProfile("p", narrative="breast carcinoma\nanemia"))
    assert out == AUGMENT
    messages = stub.sent()["messages"]
    assert messages[0] == {"role": "system", "content": load_prompt("augmentation")}
    assert messages[1] == {"role": "user", "content": "breast carcinoma\nanemia"}


def test_llm_augmenter_malformed_and_down(stub):
    stub.reply_json({"text": json.dumps({"main_conditions": "not a list"})})
    with pytest.raises(AugmenterMalformedOutput):
        LlmAugmenter(chat(stub.url), retries=1).augment(PatientProfile("p", narrative="x"))
    assert len(stub.requests) == 2
    with pytest.raises(AugmenterUnavailable):
        LlmAugmenter(HttpChatClient(closed_port_url(), sleep=lambda s: None)).augment(PatientProfile("p", narrative="x"))


def test_parse_augmentation_requires_main_condition():
    assert parse_augmentation(json.dumps({**AUGMENT, "main_conditions": []})) is None
    assert parse_augmentation(json.dumps(AUGMENT)) == AUGMENT


def test_extract_json_object():
    assert extract_json_object('noise {"a": 1} {"b": 2}') == {"a": 1}
    assert extract_json_object("[1] {bad} {\"ok\": true}") == {"ok": True}
    assert extract_json_object("none") is None


# ---------------------------------------------------------------------------
# mock reasoner


def test_mock_reason_examples():
    block = "Inclusion Criteria:\n1. Confirmed breast carcinoma\n2. Signed consent\nExclusion Criteria:\n1. Prior trastuzumab"
    trial = Trial("T", criteria=tuple(criteria_from_block(block, "T")))
    inc, consent = trial.inclusion
    (exc,) = trial.exclusion
    rules = MockRuleSet({inc.criterion_id: MockRule(requires=("NCIT:C4872",)), exc.criterion_id: MockRule(forbids=("NCIT:C1647",))})
    profile = PatientProfile("p", structured_terms=(("NCIT:C4872", "Breast Carcinoma"),))
    out = json.loads(mock_reason(profile, trial.criteria, rules))
    assert out["Inclusion_Criteria_Evaluation"][0] == {
        "Criterion": "confirmed breast carcinoma",
        "Classification": "Met",
        "Justification": "Patient record lists Breast Carcinoma.",
    }
    assert out["Inclusion_Criteria_Evaluation"][1]["Classification"] == "Unclear"
    assert out["Exclusion_Criteria_Evaluation"][0]["Classification"] == "Not Violated"
    assert out["Final Decision"] == "Likely Eligible"
    assert mock_reason(profile, trial.criteria, rules) == mock_reason(profile, trial.criteria, rules)
