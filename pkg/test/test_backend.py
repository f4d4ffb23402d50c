import json
import logging

import pytest
import requests
import yaml

from solaudit import app, utils
from solaudit.app import ConfigError
from solaudit.backend import (
    BackendUnavailable,
    BadResponse,
    EndpointConfig,
    HttpBackend,
    ScriptedBackend,
    Transcript,
)

app.logger.setLevel(logging.NOTSET)

ENDPOINT = EndpointConfig("http://llm.test/v1/", "test-model", backoff_factor=0, api_key_env="TEST_LLM_KEY")


class FakeResponse:
    def __init__(self, status_code=200, body=None):
        self.status_code = status_code
        self.ok = status_code < 400
        self._body = body

    def json(self):
        if self._body is None:
            raise ValueError("no json")
        return self._body


def ok(text):
    return FakeResponse(200, {"choices": [{"message": {"content": text}}]})


class FakeSession:
    """Answers posts from a queue of responses or exceptions, repeating the last one."""

    def __init__(self, *answers):
        self.answers = list(answers)
        self.posts = []

    def post(self, url, **kw):
        self.posts.append((url, kw))
        answer = self.answers[min(len(self.posts), len(self.answers)) - 1]
        if isinstance(answer, Exception):
            raise answer
        return answer


@pytest.mark.parametrize(
    "kw",
    [
        {"base_url": ""},
        {"model": ""},
        {"temperature": -0.1},
        {"max_tokens": 0},
        {"timeout": 0},
        {"max_retries": 6},
        {"max_retries": -1},
    ],
)
def test_endpoint_invalid(kw):
    with pytest.raises(ConfigError):
        EndpointConfig(**{"base_url": "http://llm.test/v1", "model": "m", **kw})


def test_endpoint_from_dict(monkeypatch):
    with pytest.raises(ConfigError):
        EndpointConfig.from_dict({"base_url": "http://llm.test/v1", "model": "m", "top_k": 3})
    monkeypatch.setenv("TEST_LLM_KEY", "secret")
    assert ENDPOINT.api_key == "secret"
    monkeypatch.delenv("TEST_LLM_KEY")
    assert ENDPOINT.api_key is None


def test_http_complete(monkeypatch, tmp_path):
    monkeypatch.setenv("TEST_LLM_KEY", "secret")
    session = FakeSession(ok("The label is safe."))
    backend = HttpBackend(Transcript(tmp_path / "transcript.jsonl"), session=session)
    c = backend.complete(ENDPOINT, "Is it safe?")
    assert c.output == "The label is safe."
    assert c.prompt_hash == utils.sha256_hex("Is it safe?")
    assert c.attempt == 1
    assert c.backend_id == "http:test-model"

    url, kw = session.posts[0]
    assert url == "http://llm.test/v1/chat/completions"
    assert kw["json"]["model"] == "test-model"
    assert kw["json"]["messages"] == [{"role": "user", "content": "Is it safe?"}]
    assert kw["json"]["temperature"] == 0.0
    assert kw["headers"] == {"Authorization": "Bearer secret"}
    assert kw["timeout"] == 60

    (entry,) = backend.transcript.entries()
    assert entry["prompt_hash"] == c.prompt_hash
    assert entry["output"] == "The label is safe."
    assert "error" not in entry


def test_http_retry(tmp_path, caplog):
    session = FakeSession(FakeResponse(503), requests.ConnectionError("reset"), ok("done"))
    backend = HttpBackend(Transcript(tmp_path / "transcript.jsonl"), session=session)
    c = backend.complete(ENDPOINT, "prompt")
    assert c.output == "done"
    assert c.attempt == 3
    entries = backend.transcript.entries()
    assert [e["attempt"] for e in entries] == [1, 2, 3]
    assert entries[0]["error"] == "status 503"
    assert entries[1]["error"].startswith("ConnectionError")
    assert any("Retrying" in r.msg for r in caplog.records if r.levelno == logging.WARNING)


def test_http_unavailable():
    session = FakeSession(requests.ConnectionError("refused"))
    with pytest.raises(BackendUnavailable):
        HttpBackend(session=session).complete(ENDPOINT, "prompt")
    assert len(session.posts) == ENDPOINT.max_retries + 1


def test_http_bad_response():
    session = FakeSession(FakeResponse(400))
    with pytest.raises(BadResponse) as e:
        HttpBackend(session=session).complete(ENDPOINT, "prompt")
    assert e.value.status == 400
    assert len(session.posts) == 1

    session = FakeSession(FakeResponse(429))
    with pytest.raises(BadResponse) as e:
        HttpBackend(session=session).complete(ENDPOINT, "prompt")
    assert e.value.status == 429
    assert len(session.posts) == ENDPOINT.max_retries + 1

    for body in (None, {"choices": []}, {"error": "x"}):
        with pytest.raises(BadResponse):
            HttpBackend(session=FakeSession(FakeResponse(200, body))).complete(ENDPOINT, "prompt")


def test_empty_prompt():
    with pytest.raises(ValueError):
        HttpBackend(session=FakeSession(ok("x"))).complete(ENDPOINT, "")


def test_scripted_rules():
    backend = ScriptedBackend(
        [
            {"contains": "detector", "replies": ["vulnerable", "safe"]},
            {"hash": utils.sha256_hex("exact detector prompt"), "reply": "by hash"},
        ],
        default_reply="default",
    )
    assert backend.complete(ENDPOINT, "exact detector prompt").output == "by hash"
    assert [backend.complete(ENDPOINT, "a detector prompt").output for _ in range(3)] == ["vulnerable", "safe", "safe"]
    assert backend.complete(ENDPOINT, "anything else").output == "default"
    assert len(backend.calls) == 5
    assert backend.complete(ENDPOINT, "x").backend_id == "scripted"


def test_scripted_errors():
    backend = ScriptedBackend(
        [
            {"contains": "down", "reply": {"error": "connection refused"}},
            {"contains": "bad", "reply": {"error": "server error", "status": 500}},
        ]
    )
    with pytest.raises(BackendUnavailable):
        backend.complete(ENDPOINT, "down")
    with pytest.raises(BadResponse) as e:
        backend.complete(ENDPOINT, "bad")
    assert e.value.status == 500
    with pytest.raises(ValueError):
        ScriptedBackend([{"reply": "no matcher"}])
    with pytest.raises(ValueError):
        ScriptedBackend([{"contains": "x", "replies": []}])


def test_complete_many_order():
    backend = ScriptedBackend(
        [
            {"contains": "slow", "reply": {"text": "slow answer", "delay": 0.05}},
            {"contains": "down", "reply": {"error": "refused"}},
            {"contains": "queue", "replies": ["1", "2", "3", "4", "5"]},
        ]
    )
    results = backend.complete_many(ENDPOINT, ["slow", "down", "fast"], parallelism=3)
    assert results[0].output == "slow answer"
    assert isinstance(results[1], BackendUnavailable)
    assert results[2].output == ""
    results = backend.complete_many(ENDPOINT, [f"queue {i}" for i in range(5)], parallelism=5)
    assert [r.output for r in results] == ["1", "2", "3", "4", "5"]
    with pytest.raises(ValueError):
        backend.complete_many(ENDPOINT, [])


def test_transcript_replay(tmp_path):
    transcript = Transcript(tmp_path / "run" / "transcript.jsonl")
    backend = ScriptedBackend(
        [{"contains": "one", "replies": ["first", "second"]}, {"contains": "down", "reply": {"error": "refused"}}],
        transcript=transcript,
    )
    backend.complete(ENDPOINT, "prompt one")
    backend.complete(ENDPOINT, "prompt one")
    with pytest.raises(BackendUnavailable):
        backend.complete(ENDPOINT, "down")
    entries = transcript.entries()
    assert len(entries) == 3
    assert entries[2]["error"] == "refused"

    replay = transcript.replay(default_reply="unrecorded")
    assert replay.complete(ENDPOINT, "prompt one").output == "first"
    assert replay.complete(ENDPOINT, "prompt one").output == "second"
    assert replay.complete(ENDPOINT, "down").output == "unrecorded"
    assert Transcript(tmp_path / "none.jsonl").entries() == []


@pytest.mark.parametrize("suffix", [".yaml", ".json"])
def test_scripted_from_file(tmp_path, suffix):
    script = {"default": "safe", "rules": [{"contains": "Reason", "reply": "merged"}]}
    path = tmp_path / f"script{suffix}"
    path.write_text(json.dumps(script) if suffix == ".json" else yaml.safe_dump(script))
    backend = ScriptedBackend.from_file(path)
    assert backend.complete(ENDPOINT, "Reason 1").output == "merged"
    assert backend.complete(ENDPOINT, "other").output == "safe"
