import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Union

import backoff
import requests
import yaml

from . import utils
from .app import AuditError, ConfigError, logger

log = logger.getChild("backend")


class BackendError(AuditError):
    pass


class BackendUnavailable(BackendError):
    pass


class BadResponse(BackendError):
    def __init__(self, message, status=None):
        self.status = status
        super().__init__(message)


class _Transient(Exception):
    def __init__(self, message, status=None):
        self.status = status
        super().__init__(message)


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    temperature: float = 0.0
    max_tokens: int = 512
    timeout: float = 60
    max_retries: int = 3
    backoff_factor: float = 1.0
    api_key_env: str = "SOLAUDIT_API_KEY"

    def __post_init__(self):
        if not self.base_url or not self.model:
            raise ConfigError("endpoint needs both base_url and model.")
        if self.temperature < 0:
            raise ConfigError(f"endpoint temperature must be >= 0, got {self.temperature}.")
        if self.max_tokens < 1:
            raise ConfigError(f"endpoint max_tokens must be positive, got {self.max_tokens}.")
        if self.timeout <= 0:
            raise ConfigError(f"endpoint timeout must be positive, got {self.timeout}.")
        if not 0 <= self.max_retries <= 5:
            raise ConfigError(f"endpoint max_retries must be within 0..5, got {self.max_retries}.")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown endpoint keys: {', '.join(sorted(unknown))}.")
        return cls(**d)

    @property
    def api_key(self):
        return os.environ.get(self.api_key_env) if self.api_key_env else None


@dataclass(frozen=True)
class Completion:
    prompt_hash: str
    output: str
    latency: float
    attempt: int = 1
    backend_id: str = ""

    def to_dict(self):
        return asdict(self)


def _text(prompt) -> str:
    text = getattr(prompt, "text", prompt)
    if not isinstance(text, str) or not text:
        raise ValueError("prompt must be a non-empty text.")
    return text


class Transcript:
    """Append-only JSONL log of every backend attempt."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, backend_id, prompt_hash, output, latency, attempt, error=None):
        entry = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "backend_id": backend_id,
            "prompt_hash": prompt_hash,
            "output": output,
            "latency": latency,
            "attempt": attempt,
        }
        if error:
            entry["error"] = error
        line = json.dumps(entry, ensure_ascii=False)
        with self._lock, open(self.path, "a", encoding="utf-8") as f:
            f.write(line + "\n")

    def entries(self):
        if not self.path.is_file():
            return []
        return list(utils.read_jsonl(self.path))

    def replay(self, default_reply=""):
        """A scripted backend answering every recorded prompt hash with its recorded completions, in order."""
        script: Dict[str, list] = {}
        for e in self.entries():
            if "error" in e:
                continue
            script.setdefault(e["prompt_hash"], []).append(
                {"text": e["output"], "latency": e["latency"], "attempt": e["attempt"], "backend_id": e["backend_id"]}
            )
        return ScriptedBackend([{"hash": h, "replies": r} for h, r in script.items()], default_reply=default_reply)


class Backend:
    """Model inference boundary. Subclasses implement `_complete` for one prompt text."""

    backend_id = "backend"

    def __init__(self, transcript: Optional[Transcript] = None):
        self.transcript = transcript

    def _record(self, prompt_hash, output, latency, attempt, error=None, backend_id=None):
        if self.transcript:
            self.transcript.append(backend_id or self.backend_id, prompt_hash, output, latency, attempt, error)

    def _complete(self, endpoint: EndpointConfig, text: str, prompt_hash: str) -> Completion:
        raise NotImplementedError

    def complete(self, endpoint: EndpointConfig, prompt) -> Completion:
        """Send one prompt and return the completion.

        Raises:
            BackendUnavailable: transport kept failing after all retries.
            BadResponse: the endpoint answered with an unusable response.
        """
        text = _text(prompt)
        prompt_hash = utils.sha256_hex(text)
        log.debug(f'Sending prompt "{prompt_hash[:12]}" to "{self.backend_id}".')
        return self._complete(endpoint, text, prompt_hash)

    def prepare(self, endpoint: EndpointConfig, prompt):
        """A call completing prompt later, bound in submission order."""
        return partial(self.complete, endpoint, prompt)

    def complete_many(self, endpoint: EndpointConfig, prompts: list, parallelism=5) -> List[Union[Completion, BackendError]]:
        """Complete prompts concurrently, results in input order with errors kept in their slots."""
        if not prompts:
            raise ValueError("no prompts to complete.")
        with CompletionPool(self, max_workers=max(1, min(parallelism, len(prompts)))) as pool:
            return list(pool.map(endpoint, prompts))


class CompletionPool(ThreadPoolExecutor):
    """A thread pool for backend calls with a similar mode of operation to concurrent.futures."""

    def __init__(self, backend: Backend, **kw):
        super().__init__(thread_name_prefix="completion", **kw)
        self._backend = backend

    def submit(self, endpoint, prompt):
        return super().submit(self._backend.prepare(endpoint, prompt))

    def map(self, endpoint, prompts):
        fs = [self.submit(endpoint, p) for p in prompts]

        def result_iterator():
            for f in fs:
                try:
                    yield f.result()
                except BackendError as e:
                    yield e

        return result_iterator()


class HttpBackend(Backend):
    """Client of an OpenAI-style chat-completion endpoint."""

    backend_id = "http"

    def __init__(self, transcript=None, session: Optional[requests.Session] = None):
        super().__init__(transcript)
        self.session = session or requests.Session()

    def _complete(self, endpoint, text, prompt_hash):
        url = endpoint.base_url.rstrip("/") + "/chat/completions"
        payload = {
            "model": endpoint.model,
            "messages": [{"role": "user", "content": text}],
            "temperature": endpoint.temperature,
            "max_tokens": endpoint.max_tokens,
        }
        headers = {"Authorization": f"Bearer {endpoint.api_key}"} if endpoint.api_key else {}
        backend_id = f"{self.backend_id}:{endpoint.model}"
        attempts = 0

        def on_backoff(details):
            log.warning(f'Retrying "{backend_id}" after attempt {details["tries"]} ({details["wait"]:.1f}s).')

        @backoff.on_exception(
            backoff.expo,
            _Transient,
            max_tries=endpoint.max_retries + 1,
            factor=endpoint.backoff_factor,
            on_backoff=on_backoff,
            logger=None,
        )
        def post():
            nonlocal attempts
            attempts += 1
            start = time.monotonic()
            try:
                resp = self.session.post(url, json=payload, headers=headers, timeout=endpoint.timeout)
            except requests.RequestException as e:
                self._record(prompt_hash, "", _ms(start), attempts, f"{type(e).__name__}: {e}", backend_id)
                raise _Transient(str(e)) from None
            latency = _ms(start)
            if resp.status_code == 429 or resp.status_code >= 500:
                self._record(prompt_hash, "", latency, attempts, f"status {resp.status_code}", backend_id)
                raise _Transient(f"status {resp.status_code}", resp.status_code)
            if not resp.ok:
                self._record(prompt_hash, "", latency, attempts, f"status {resp.status_code}", backend_id)
                raise BadResponse(f'"{url}" answered with status {resp.status_code}.', resp.status_code)
            try:
                output = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError):
                self._record(prompt_hash, "", latency, attempts, "malformed response body", backend_id)
                raise BadResponse(f'"{url}" answered with a malformed body.', resp.status_code) from None
            output = output or ""
            self._record(prompt_hash, output, latency, attempts, backend_id=backend_id)
            return Completion(prompt_hash, output, latency, attempts, backend_id)

        try:
            return post()
        except _Transient as e:
            if e.status:
                raise BadResponse(f'"{url}" kept answering with status {e.status}.', e.status) from None
            raise BackendUnavailable(f'"{url}" is unavailable after {attempts} attempts: {e}') from None


def _ms(start):
    return round((time.monotonic() - start) * 1000, 3)


@dataclass(frozen=True)
class Reply:
    text: str = ""
    error: Optional[str] = None
    status: Optional[int] = None
    delay: float = 0.0
    latency: float = 0.0
    attempt: int = 1
    backend_id: Optional[str] = None

    @classmethod
    def of(cls, item):
        if isinstance(item, str):
            return cls(text=item)
        if isinstance(item, dict):
            return cls(**item)
        raise ValueError(f"invalid scripted reply {item!r}.")


class ScriptedBackend(Backend):
    """Deterministic backend replaying scripted replies.

    Rules match a prompt by exact sha256 hash ("hash") or by substring ("contains"). Hash rules are
    checked first, then substring rules in order. Each rule's replies are consumed in order and the last
    one repeats; prompts matching no rule get `default_reply`.

    A reply is either a text or a mapping of text, error, status, delay, latency, attempt and backend_id.
    A reply with `error` raises BackendUnavailable, or BadResponse when it also has a `status`.
    """

    backend_id = "scripted"

    def __init__(self, rules=(), default_reply="", transcript=None):
        super().__init__(transcript)
        self.rules = []
        for rule in rules:
            replies = [Reply.of(r) for r in rule.get("replies", [rule.get("reply", "")])]
            if not replies:
                raise ValueError(f"scripted rule {rule!r} has no replies.")
            if "hash" in rule:
                self.rules.append(("hash", str(rule["hash"]), replies))
            elif "contains" in rule:
                self.rules.append(("contains", str(rule["contains"]), replies))
            else:
                raise ValueError(f"scripted rule {rule!r} needs a hash or contains matcher.")
        self.rules.sort(key=lambda r: r[0] != "hash")
        self.default_reply = Reply.of(default_reply)
        self.calls = []
        self._cursor = [0] * len(self.rules)
        self._lock = threading.Lock()

    @classmethod
    def from_dict(cls, d, transcript=None):
        return cls(d.get("rules", []), default_reply=d.get("default", ""), transcript=transcript)

    @classmethod
    def from_file(cls, path, transcript=None):
        """Load a script from a YAML or JSON file with `default` and `rules` keys."""
        path = Path(path)
        with open(path, encoding="utf-8") as f:
            d = json.load(f) if path.suffix.lower() == ".json" else yaml.safe_load(f)
        log.debug(f'Loaded {len(d.get("rules", []))} scripted rules from "{path}".')
        return cls.from_dict(d, transcript=transcript)

    def _next(self, text, prompt_hash) -> Reply:
        with self._lock:
            self.calls.append(prompt_hash)
            for i, (kind, pattern, replies) in enumerate(self.rules):
                if (kind == "hash" and pattern == prompt_hash) or (kind == "contains" and pattern in text):
                    reply = replies[min(self._cursor[i], len(replies) - 1)]
                    self._cursor[i] += 1
                    return reply
            return self.default_reply

    def prepare(self, endpoint, prompt):
        # replies are taken now so concurrent calls consume the queues in input order
        text = _text(prompt)
        prompt_hash = utils.sha256_hex(text)
        return partial(self._answer, prompt_hash, self._next(text, prompt_hash))

    def _complete(self, endpoint, text, prompt_hash):
        return self._answer(prompt_hash, self._next(text, prompt_hash))

    def _answer(self, prompt_hash, reply: Reply) -> Completion:
        if reply.delay:
            time.sleep(reply.delay)
        backend_id = reply.backend_id or self.backend_id
        if reply.error:
            self._record(prompt_hash, "", reply.latency, reply.attempt, reply.error, backend_id)
            if reply.status:
                raise BadResponse(reply.error, reply.status)
            raise BackendUnavailable(reply.error)
        self._record(prompt_hash, reply.text, reply.latency, reply.attempt, backend_id=backend_id)
        return Completion(prompt_hash, reply.text, reply.latency, reply.attempt, backend_id)
