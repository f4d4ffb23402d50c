import pytest
import yaml

from solaudit.app import Config, ConfigError, new_conf
from solaudit.backend import HttpBackend, ScriptedBackend
from solaudit.prompts import Label
from solaudit.session import FIXED_TIME, Session


def test_config_file(tmp_path, monkeypatch):
    monkeypatch.delenv("SOLAUDIT_CONFIG", raising=False)
    monkeypatch.chdir(tmp_path)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"seed": 7, "endpoint": {"judge": {"model": "judge-model"}}}))
    conf = Config(path)
    assert conf.seed == 7
    assert conf.endpoint.judge.model == "judge-model"
    assert conf.endpoint.default.model == "codellama-13b-instruct"
    assert conf["detector.prompts"] == 5
    with pytest.raises(ConfigError):
        conf["missing"]

    conf.load(None)
    assert conf.seed == 42

    monkeypatch.setenv("SOLAUDIT_CONFIG", str(path))
    assert Config().seed == 7


def test_config_not_yaml(tmp_path):
    path = tmp_path / "run.json"
    path.write_text("{}")
    with pytest.raises(ConfigError):
        Config(path).seed


def test_new_conf():
    conf = new_conf({"detector": {"prompts": 3}})
    assert conf.detector.prompts == 3
    assert conf.detector.context == "none"
    assert new_conf().detector.prompts == 5


def test_session_defaults(make_session):
    session = make_session()
    assert session.m == 5
    assert session.detector_context == "none"
    assert session.max_iterations == 5
    assert session.reply_attempts == 3
    assert session.precedence == Label.VULNERABLE
    assert session.clock() == FIXED_TIME
    assert session.prompts.version == "1.0"

    agents = session.endpoint("agents")
    assert agents.model == "mixtral-8x7b-instruct"
    assert agents.max_tokens == 1024
    assert agents.base_url == session.endpoint("detector").base_url
    with pytest.raises(ConfigError):
        session.endpoint("ranker")


def test_session_http_backend():
    session = Session(new_conf())
    assert isinstance(session.backend, HttpBackend)
    assert session.clock() != FIXED_TIME


@pytest.mark.parametrize(
    "overrides",
    [
        {"detector__prompts": 0},
        {"detector__prompts": 6},
        {"detector__context": "callers"},
        {"deliberation__max_iterations": 0},
        {"deliberation__max_iterations": 6},
        {"deliberation__reply_attempts": 0},
        {"parallelism": 0},
        {"workers": 0},
        {"context_budget": 0},
        {"label_precedence": "unsure"},
        {"endpoint__default__temperature": -1},
        {"endpoint__judge": {"top_p": 0.9}},
    ],
)
def test_session_invalid(make_session, overrides):
    with pytest.raises(ConfigError):
        make_session(**overrides)


def test_config_hash(make_session):
    assert make_session().config_hash == make_session().config_hash
    assert make_session(seed=1).config_hash != make_session(seed=2).config_hash


def test_session_complete(make_session):
    session = make_session([{"contains": "ping", "reply": "pong"}])
    assert isinstance(session.backend, ScriptedBackend)
    assert session.complete("judge", "ping").output == "pong"
    assert [c.output for c in session.complete_many("detector", ["ping", "other"])] == ["pong", ""]
