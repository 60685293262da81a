"""Chat-completions client plus the scripted backends used as test fixtures.

A backend is anything with ``send(payload: dict) -> dict`` speaking the
chat-completions wire format::

    request  {model, messages: [{role, content}], temperature, max_tokens, seed?, tools?}
    response {choices: [{message: {content, tool_calls?}}], usage: {...}}

``send`` raises :class:`TransientBackendError` for retryable conditions and
:class:`PermanentBackendError` for the rest; :func:`generate` owns retries.
"""
from __future__ import annotations

import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import requests

from ..retrieval import escape_passage

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    pass


class TransientBackendError(BackendError):
    """Rate limiting, 5xx, timeouts, dropped connections."""


class PermanentBackendError(BackendError):
    pass


class MalformedResponseError(BackendError):
    pass


class AttemptsExhaustedError(BackendError):
    pass


class ChatBackend(Protocol):
    def send(self, payload: dict) -> dict: ...


@dataclass(frozen=True)
class GenParams:
    model: str = "default"
    temperature: float = 0.0
    max_tokens: int = 512
    seed: int | None = None


@dataclass
class ChatResult:
    content: str
    tool_calls: list[dict] = field(default_factory=list)
    usage: dict = field(default_factory=dict)
    attempts: int = 1


def _as_messages(prompt) -> list[dict]:
    if isinstance(prompt, str):
        return [{"role": "user", "content": prompt}]
    return [dict(m) for m in prompt]


def parse_response(body) -> ChatResult:
    try:
        choices = body["choices"]
        if not choices:
            raise MalformedResponseError("response has no choices")
        message = choices[0]["message"]
    except (KeyError, TypeError, IndexError) as exc:
        raise MalformedResponseError(f"response is missing {exc}") from None
    if not isinstance(message, Mapping):
        raise MalformedResponseError("choices[0].message is not an object")
    content = message.get("content")
    if content is not None and not isinstance(content, str):
        raise MalformedResponseError("message content is not a string")
    calls = message.get("tool_calls") or []
    if not isinstance(calls, list):
        raise MalformedResponseError("tool_calls is not a list")
    usage = body.get("usage") or {}
    return ChatResult(content or "", list(calls), dict(usage) if isinstance(usage, Mapping) else {})


def generate(
    backend: ChatBackend,
    prompt,
    params: GenParams = GenParams(),
    tools: Sequence[dict] | None = None,
    *,
    max_attempts: int = 4,
    base_delay_s: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
    exchange_log: Callable[[dict], None] | None = None,
) -> ChatResult:
    """One chat exchange with bounded exponential-backoff retries.

    Every attempt (request, response or error) is passed verbatim to
    ``exchange_log``.
    """
    payload: dict = {
        "model": params.model,
        "messages": _as_messages(prompt),
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
    }
    if params.seed is not None:
        payload["seed"] = params.seed
    if tools:
        payload["tools"] = list(tools)
    delay = base_delay_s
    for attempt in range(1, max_attempts + 1):
        entry: dict = {"attempt": attempt, "request": payload}
        try:
            body = backend.send(payload)
        except TransientBackendError as exc:
            entry["error"] = f"transient: {exc}"
            if exchange_log:
                exchange_log(entry)
            if attempt == max_attempts:
                raise AttemptsExhaustedError(f"gave up after {attempt} attempts: {exc}") from exc
            log.info("transient backend failure (attempt %d): %s", attempt, exc)
            sleep(delay)
            delay *= 2
            continue
        except BackendError as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
            if exchange_log:
                exchange_log(entry)
            raise
        entry["response"] = body
        if exchange_log:
            exchange_log(entry)
        result = parse_response(body)
        result.attempts = attempt
        return result
    raise AssertionError("unreachable")


class HttpChatBackend:
    def __init__(
        self,
        url: str,
        *,
        api_key: str | None = None,
        timeout_s: float = 300.0,
        session: requests.Session | None = None,
    ):
        self.url = url
        self.timeout_s = timeout_s
        self.session = session or requests.Session()
        self.headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}

    def send(self, payload: dict) -> dict:
        try:
            resp = self.session.post(self.url, json=payload, headers=self.headers, timeout=self.timeout_s)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise TransientBackendError(str(exc)) from None
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise PermanentBackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError:
            raise MalformedResponseError("response body is not JSON") from None


def reply(content: str = "", tool_calls: list | None = None, usage: dict | None = None) -> dict:
    message: dict = {"role": "assistant", "content": content}
    if tool_calls:
        message["tool_calls"] = tool_calls
    return {"choices": [{"message": message}], "usage": usage or {}}


def _last_user(payload: dict) -> str:
    for m in reversed(payload.get("messages", [])):
        if m.get("role") == "user":
            return m.get("content") or ""
    return ""


class EchoBackend:
    """Returns the last user message unchanged."""

    def send(self, payload: dict) -> dict:
        return reply(_last_user(payload))


class EmptyBackend:
    def send(self, payload: dict) -> dict:
        return reply("")


class ReferenceEchoBackend:
    """Answers with the gold answer of whichever known question appears in
    the last user message (an oracle backend: every metric should be
    perfect)."""

    def __init__(self, answers: Mapping[str, str]):
        self.answers = dict(answers)
        # longest question first so one question that contains another wins
        keys = sorted(self.answers, key=len, reverse=True)
        self._lookup = [(q, escape_passage(q)) for q in keys]

    def send(self, payload: dict) -> dict:
        text = _last_user(payload)
        for q, escaped in self._lookup:
            if q in text or escaped in text:
                return reply(self.answers[q])
        raise PermanentBackendError("reference-echo backend saw an unknown question")


_LAST_TOKEN = re.compile(r"[^\W_]+[\W_]*$")


def drop_last_token(text: str) -> str:
    """Remove the last word token (as the metric tokenizer sees it)."""
    return _LAST_TOKEN.sub("", text).rstrip()


class CorruptingBackend:
    """Wraps another backend and drops the last token of every answer."""

    def __init__(self, inner: ChatBackend):
        self.inner = inner

    def send(self, payload: dict) -> dict:
        body = self.inner.send(payload)
        body = json.loads(json.dumps(body))
        msg = body["choices"][0]["message"]
        msg["content"] = drop_last_token(msg.get("content") or "")
        return body


class ScriptedBackend:
    """Plays back a fixed list of responses; exception instances are raised."""

    def __init__(self, script: Sequence):
        self.script = list(script)
        self.requests: list[dict] = []
        self._lock = threading.Lock()

    def send(self, payload: dict) -> dict:
        with self._lock:
            self.requests.append(payload)
            if not self.script:
                raise PermanentBackendError("script exhausted")
            step = self.script.pop(0)
        if isinstance(step, BaseException):
            raise step
        if isinstance(step, str):
            return reply(step)
        return step
