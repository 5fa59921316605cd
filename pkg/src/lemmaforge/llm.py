"""Chat-completions backends: a real HTTP client and a scripted stand-in.

Both implement `complete(request, route=None) -> ChatResponse`. The route
names the pipeline call site (stage, candidate or seed key, attempt index);
the HTTP backend uses it only for logs and accounting, while the scripted
backend uses it to look up canned responses deterministically.
"""

from __future__ import annotations

import json
import logging
import random
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol

import requests

from .model import StageConfig

logger = logging.getLogger(__name__)


class BackendUnavailable(Exception):
    """Transport failures or retryable statuses past the retry cap, or a
    non-retryable HTTP status."""


class ProtocolError(Exception):
    """The endpoint answered, but not with a decodable chat completion."""


class Truncated(Exception):
    """The response was cut off (length cap or content filter) and carries no
    trustworthy payload. Callers treat it like a missing marker."""

    def __init__(self, finish_reason: str, content: str = "") -> None:
        super().__init__(f"response truncated (finish_reason={finish_reason})")
        self.finish_reason = finish_reason
        self.content = content


# ---------------------------------------------------------------------------
# Request / response carriers
# ---------------------------------------------------------------------------

_ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in _ROLES:
            raise ValueError(f"unknown message role: {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[Message, ...]
    temperature: float
    top_p: float
    max_completion_tokens: int
    reasoning_effort: str | None = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[-1].role != "user":
            raise ValueError("last message must have role 'user'")
        if self.max_completion_tokens <= 0:
            raise ValueError("max_completion_tokens must be positive")

    def body(self) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_completion_tokens": self.max_completion_tokens,
        }
        if self.reasoning_effort is not None:
            body["reasoning_effort"] = self.reasoning_effort
        return body


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: str
    prompt_tokens: int | None = None
    completion_tokens: int | None = None


@dataclass(frozen=True)
class CallRoute:
    """Identifies one pipeline call site for scripting and audit logs."""

    stage: str
    key: str
    attempt: int = 0

    def flat(self) -> str:
        return f"{self.stage}|{self.key}|{self.attempt}"


def stage_request(cfg: StageConfig, prompt: str) -> ChatRequest:
    """Build the single-user-message request a stage sends."""
    return ChatRequest(
        model=cfg.model,
        messages=(Message("user", prompt),),
        temperature=cfg.temperature,
        top_p=cfg.top_p,
        max_completion_tokens=cfg.max_completion_tokens,
        reasoning_effort=cfg.reasoning_effort,
    )


class LlmBackend(Protocol):
    def complete(self, request: ChatRequest, route: CallRoute | None = None) -> ChatResponse: ...


# ---------------------------------------------------------------------------
# HTTP backend
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RetryPolicy:
    base_s: float = 1.0
    factor: float = 2.0
    jitter: float = 0.2
    max_retries: int = 5

    def sleep_s(self, attempt: int, rng: random.Random) -> float:
        scale = rng.uniform(1.0 - self.jitter, 1.0 + self.jitter)
        return self.base_s * (self.factor**attempt) * scale


_REQUIRED_BODY_FIELDS = ("model", "messages", "temperature", "top_p", "max_completion_tokens")
_TRUNCATION_REASONS = ("length", "content_filter")


def _validate_body(body: Mapping[str, Any], cap: int) -> None:
    for key in _REQUIRED_BODY_FIELDS:
        if key not in body:
            raise ValueError(f"outgoing request body missing {key!r}")
    if not body["messages"]:
        raise ValueError("outgoing request body has no messages")
    if body["max_completion_tokens"] > cap:
        raise ValueError(
            f"max_completion_tokens {body['max_completion_tokens']} exceeds configured cap {cap}"
        )


class HttpBackend:
    """Synchronous OpenAI-compatible chat-completions client.

    Retries connect errors, 5xx, and 429 with exponential backoff and jitter;
    every other 4xx fails immediately. The auth secret is read once and never
    logged or echoed into artifacts.
    """

    def __init__(
        self,
        url: str,
        *,
        secret: str | None = None,
        auth_header: str = "Authorization",
        auth_scheme: str = "Bearer",
        policy: RetryPolicy | None = None,
        timeout_s: float = 600.0,
        max_completion_tokens_cap: int = 50_000,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ) -> None:
        self.url = url
        self.policy = policy or RetryPolicy()
        self.timeout_s = timeout_s
        self.cap = max_completion_tokens_cap
        self._session = session or requests.Session()
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._headers = {"Content-Type": "application/json"}
        if secret:
            value = f"{auth_scheme} {secret}" if auth_scheme else secret
            self._headers[auth_header] = value
        self._usage_lock = threading.Lock()
        self.usage_by_stage: dict[str, dict[str, int]] = defaultdict(
            lambda: {"prompt_tokens": 0, "completion_tokens": 0, "requests": 0}
        )

    # -- internals ----------------------------------------------------------

    def _record_usage(self, route: CallRoute | None, resp: ChatResponse) -> None:
        stage = route.stage if route else "unrouted"
        with self._usage_lock:
            row = self.usage_by_stage[stage]
            row["requests"] += 1
            row["prompt_tokens"] += resp.prompt_tokens or 0
            row["completion_tokens"] += resp.completion_tokens or 0

    def _decode(self, payload: Any) -> ChatResponse:
        try:
            choice = payload["choices"][0]
            content = choice["message"]["content"]
            finish_reason = choice.get("finish_reason", "stop")
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"chat completion body missing fields: {exc!r}") from exc
        if content is None:
            content = ""
        usage = payload.get("usage") or {}
        resp = ChatResponse(
            content=content,
            finish_reason=finish_reason,
            prompt_tokens=usage.get("prompt_tokens"),
            completion_tokens=usage.get("completion_tokens"),
        )
        if finish_reason in _TRUNCATION_REASONS:
            raise Truncated(finish_reason, content)
        if not content:
            raise ProtocolError(f"empty content with finish_reason={finish_reason!r}")
        return resp

    # -- public -------------------------------------------------------------

    def complete(self, request: ChatRequest, route: CallRoute | None = None) -> ChatResponse:
        body = request.body()
        _validate_body(body, self.cap)
        attempt = 0
        while True:
            failure: str
            try:
                started = time.monotonic()
                raw = self._session.post(
                    self.url, json=body, headers=self._headers, timeout=self.timeout_s
                )
                latency = time.monotonic() - started
            except (requests.ConnectionError, requests.Timeout) as exc:
                failure = f"transport: {exc.__class__.__name__}"
            else:
                if raw.status_code == 200:
                    try:
                        payload = raw.json()
                    except ValueError as exc:
                        raise ProtocolError("endpoint returned non-JSON body") from exc
                    resp = self._decode(payload)
                    self._record_usage(route, resp)
                    logger.debug(
                        "llm ok route=%s status=200 latency=%.3fs tokens=%s/%s",
                        route.flat() if route else "-",
                        latency,
                        resp.prompt_tokens,
                        resp.completion_tokens,
                    )
                    return resp
                if raw.status_code == 429 or raw.status_code >= 500:
                    failure = f"status {raw.status_code}"
                else:
                    raise BackendUnavailable(
                        f"endpoint rejected request with status {raw.status_code}"
                    )
            if attempt >= self.policy.max_retries:
                raise BackendUnavailable(
                    f"retry cap ({self.policy.max_retries}) exhausted; last failure: {failure}"
                )
            delay = self.policy.sleep_s(attempt, self._rng)
            logger.debug(
                "llm retry route=%s attempt=%d failure=%s sleep=%.2fs",
                route.flat() if route else "-",
                attempt,
                failure,
                delay,
            )
            self._sleep(delay)
            attempt += 1


# ---------------------------------------------------------------------------
# Scripted backend
# ---------------------------------------------------------------------------


@dataclass
class ScriptedBackend:
    """Deterministic canned responses keyed by (stage, key, attempt).

    Lookups are total: anything not in the script falls back to `default`.
    Every call is recorded (route plus prompt) so tests can assert budget
    bounds and prompt contents.
    """

    responses: Mapping[str, str] = field(default_factory=dict)
    default: str = ""

    def __post_init__(self) -> None:
        self._lock = threading.Lock()
        self.calls: list[tuple[CallRoute | None, ChatRequest]] = []

    @classmethod
    def from_file(cls, path: str) -> "ScriptedBackend":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        responses = raw.get("responses", {})
        if not isinstance(responses, Mapping):
            raise ValueError("mock llm script: 'responses' must be an object keyed stage|key|attempt")
        return cls(responses=dict(responses), default=raw.get("default", ""))

    def complete(self, request: ChatRequest, route: CallRoute | None = None) -> ChatResponse:
        with self._lock:
            self.calls.append((route, request))
        text = self.default
        if route is not None:
            text = self.responses.get(route.flat(), self.default)
        return ChatResponse(content=text, finish_reason="stop")
