"""Uniform chat-completion interface over remote providers and the synthetic backend."""
from __future__ import annotations

import json
import logging
import math
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol

import httpx

from .errors import CredentialError, RequestValidationError, TransientError, TransportError

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise RequestValidationError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[Message, ...]
    temperature: float = 1.0
    max_output: int = 4096
    seed: int | None = None
    options: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        msgs = tuple(m if isinstance(m, Message) else Message(*m) for m in self.messages)
        if not msgs:
            raise RequestValidationError("request needs at least one message")
        if not isinstance(self.temperature, (int, float)) or not math.isfinite(self.temperature):
            raise RequestValidationError(f"temperature must be finite, got {self.temperature!r}")
        if self.temperature < 0:
            raise RequestValidationError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_output < 1:
            raise RequestValidationError("max_output must be positive")
        if "/" not in self.model_id:
            raise RequestValidationError(f"model id {self.model_id!r} must look like 'provider/model'")
        object.__setattr__(self, "messages", msgs)

    @property
    def provider(self) -> str:
        return self.model_id.split("/", 1)[0]

    @property
    def model(self) -> str:
        return self.model_id.split("/", 1)[1]

    def payload_text(self) -> str:
        return "\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    model_id: str
    usage: Mapping[str, int] = field(default_factory=dict)
    latency: float = 0.0
    retry_count: int = 0
    refused: bool = False


class Backend(Protocol):
    def send(self, request: ChatRequest) -> ChatResponse: ...


_REFUSAL = re.compile(
    r"^\s*(i'?m sorry,? but|i am sorry,? but|i can(?:no|')t (?:help|assist|comply|create|write|provide)|"
    r"i (?:won'?t|will not) (?:be able to )?(?:help|assist|write|create)|as an ai\b)",
    re.IGNORECASE,
)


def looks_like_refusal(text: str) -> bool:
    return bool(_REFUSAL.search(text[:300]))


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    base_delay: float = 1.0
    max_delay: float = 30.0
    jitter: float = 0.25

    def delay(self, attempt: int, rand: Callable[[], float] = random.random) -> float:
        raw = min(self.base_delay * 2 ** (attempt - 1), self.max_delay)
        return max(0.0, raw * (1.0 + self.jitter * (2.0 * rand() - 1.0)))


class TokenBucket:
    """Blocking token bucket: ``rate`` tokens per second, burst ``capacity``."""

    def __init__(self, rate: float, capacity: float | None = None, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.capacity = capacity or max(1.0, rate)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


@dataclass(frozen=True)
class ProviderLimits:
    max_in_flight: int = 8
    rate_per_sec: float | None = None


class _Limiter:
    def __init__(self, limits: ProviderLimits):
        self.semaphore = threading.BoundedSemaphore(limits.max_in_flight)
        self.bucket = TokenBucket(limits.rate_per_sec) if limits.rate_per_sec else None

    def __enter__(self):
        self.semaphore.acquire()
        if self.bucket is not None:
            self.bucket.acquire()
        return self

    def __exit__(self, *exc):
        self.semaphore.release()


class Gateway:
    """Routes requests by provider prefix, applying retry, limits, and request logging.

    Transient backend failures are retried with jittered exponential backoff;
    credential failures are raised immediately. Refusals come back as
    responses with ``refused=True``.
    """

    def __init__(
        self,
        backends: Mapping[str, Backend] | None = None,
        retry: RetryPolicy = RetryPolicy(),
        limits: Mapping[str, ProviderLimits] | None = None,
        log_path: str | Path | None = None,
        config_hash: str = "",
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backends: dict[str, Backend] = dict(backends or {})
        self.retry = retry
        self._limits = dict(limits or {})
        self._limiters: dict[str, _Limiter] = {}
        self._limiter_lock = threading.Lock()
        self._log_path = Path(log_path) if log_path else None
        self._log_lock = threading.Lock()
        self.config_hash = config_hash
        self._sleep = sleep

    def register(self, provider: str, backend: Backend, limits: ProviderLimits | None = None) -> None:
        self.backends[provider] = backend
        if limits is not None:
            self._limits[provider] = limits

    def _limiter(self, provider: str) -> _Limiter:
        with self._limiter_lock:
            if provider not in self._limiters:
                self._limiters[provider] = _Limiter(self._limits.get(provider, ProviderLimits()))
            return self._limiters[provider]

    def complete(self, request: ChatRequest) -> ChatResponse:
        try:
            backend = self.backends[request.provider]
        except KeyError:
            raise RequestValidationError(f"no backend registered for provider {request.provider!r}") from None
        attempt = 0
        while True:
            attempt += 1
            try:
                with self._limiter(request.provider):
                    started = time.perf_counter()
                    response = backend.send(request)
                    latency = time.perf_counter() - started
            except TransientError as exc:
                if attempt >= self.retry.max_attempts:
                    self._log(request, None, attempt - 1, error=str(exc))
                    raise TransportError(
                        f"{request.model_id}: giving up after {attempt} attempts: {exc}", attempts=attempt
                    ) from exc
                delay = self.retry.delay(attempt)
                log.warning("%s: transient failure (%s); retry %d in %.2fs", request.model_id, exc, attempt, delay)
                self._sleep(delay)
                continue
            response = replace(
                response,
                retry_count=attempt - 1,
                latency=response.latency or latency,
                refused=response.refused or looks_like_refusal(response.text),
            )
            self._log(request, response, attempt - 1)
            return response

    def _log(self, request: ChatRequest, response: ChatResponse | None, retries: int, error: str = "") -> None:
        if self._log_path is None:
            return
        record = {
            "config_hash": self.config_hash,
            "model_id": request.model_id,
            "temperature": request.temperature,
            "seed": request.seed,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "attempts": retries + 1,
        }
        if response is not None:
            record.update(text=response.text, refused=response.refused, usage=dict(response.usage), latency=response.latency)
        if error:
            record["error"] = error
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        with self._log_lock:
            self._log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self._log_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


def _classify_http(resp: httpx.Response, model_id: str) -> None:
    if resp.status_code in (401, 403):
        raise CredentialError(f"{model_id}: authentication rejected (HTTP {resp.status_code})")
    if resp.status_code == 429 or resp.status_code >= 500:
        raise TransientError(f"{model_id}: HTTP {resp.status_code}")
    if resp.status_code >= 400:
        raise TransportError(f"{model_id}: HTTP {resp.status_code}: {resp.text[:200]}")


class _HttpBackend:
    api_key_env = ""
    base_url = ""

    def __init__(
        self,
        base_url: str | None = None,
        api_key_env: str | None = None,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
        options: Mapping[str, Any] | None = None,
    ):
        self.base_url = (base_url or self.base_url).rstrip("/")
        self.api_key_env = api_key_env or self.api_key_env
        self.options = dict(options or {})
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _key(self) -> str:
        key = os.environ.get(self.api_key_env, "")
        if not key:
            raise CredentialError(f"environment variable {self.api_key_env} is not set")
        return key

    def _post(self, url: str, headers: dict, body: dict, model_id: str) -> dict:
        try:
            resp = self._client.post(url, headers=headers, json=body)
        except (httpx.TimeoutException, httpx.NetworkError) as exc:
            raise TransientError(f"{model_id}: {type(exc).__name__}") from exc
        _classify_http(resp, model_id)
        return resp.json()


class OpenAICompatibleBackend(_HttpBackend):
    """Chat-completions wire format (OpenAI, xAI, Google's compatibility endpoint, OpenRouter, ...)."""

    api_key_env = "OPENAI_API_KEY"
    base_url = "https://api.openai.com/v1"

    def send(self, request: ChatRequest) -> ChatResponse:
        body = {
            "model": request.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output,
            **self.options,
            **request.options,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        data = self._post(
            f"{self.base_url}/chat/completions", {"Authorization": f"Bearer {self._key()}"}, body, request.model_id
        )
        choice = data["choices"][0]
        text = choice["message"].get("content") or ""
        refused = bool(choice["message"].get("refusal")) or choice.get("finish_reason") == "content_filter"
        usage = {k: int(v) for k, v in (data.get("usage") or {}).items() if isinstance(v, int)}
        return ChatResponse(text, request.model_id, usage, refused=refused)


class AnthropicBackend(_HttpBackend):
    api_key_env = "ANTHROPIC_API_KEY"
    base_url = "https://api.anthropic.com/v1"

    def send(self, request: ChatRequest) -> ChatResponse:
        system = "\n\n".join(m.content for m in request.messages if m.role == "system")
        body = {
            "model": request.model,
            "max_tokens": request.max_output,
            "temperature": request.temperature,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages if m.role != "system"],
            **self.options,
            **request.options,
        }
        if system:
            body["system"] = system
        headers = {"x-api-key": self._key(), "anthropic-version": "2023-06-01"}
        data = self._post(f"{self.base_url}/messages", headers, body, request.model_id)
        text = "".join(block.get("text", "") for block in data.get("content", []) if block.get("type") == "text")
        usage = {k: int(v) for k, v in (data.get("usage") or {}).items() if isinstance(v, int)}
        return ChatResponse(text, request.model_id, usage, refused=data.get("stop_reason") == "refusal")


# provider prefix -> (adapter class, default base url, credential env var)
PROVIDERS: dict[str, tuple[type[_HttpBackend], str, str]] = {
    "openai": (OpenAICompatibleBackend, "https://api.openai.com/v1", "OPENAI_API_KEY"),
    "anthropic": (AnthropicBackend, "https://api.anthropic.com/v1", "ANTHROPIC_API_KEY"),
    "xai": (OpenAICompatibleBackend, "https://api.x.ai/v1", "XAI_API_KEY"),
    "google": (OpenAICompatibleBackend, "https://generativelanguage.googleapis.com/v1beta/openai", "GEMINI_API_KEY"),
    "openrouter": (OpenAICompatibleBackend, "https://openrouter.ai/api/v1", "OPENROUTER_API_KEY"),
    "inception": (OpenAICompatibleBackend, "https://api.inceptionlabs.ai/v1", "INCEPTION_API_KEY"),
}


def build_gateway(
    provider_config: Mapping[str, Mapping[str, Any]] | None = None,
    synthetic_config=None,
    retry: RetryPolicy = RetryPolicy(),
    log_path: str | Path | None = None,
    config_hash: str = "",
) -> Gateway:
    """Gateway with the synthetic backend plus every known (or configured) provider.

    ``provider_config`` maps provider names to ``base_url``, ``api_key_env``,
    ``adapter`` (``openai`` or ``anthropic``), ``max_in_flight``,
    ``rate_per_sec`` and an opaque ``options`` map passed through to requests.
    """
    from .synthetic import SyntheticBackend, SyntheticPersonaConfig

    gateway = Gateway(retry=retry, log_path=log_path, config_hash=config_hash)
    gateway.register("synthetic", SyntheticBackend(synthetic_config or SyntheticPersonaConfig.default()))
    names = set(PROVIDERS) | set(provider_config or {})
    for name in sorted(names):
        cfg = dict((provider_config or {}).get(name, {}))
        cls, url, env = PROVIDERS.get(name, (OpenAICompatibleBackend, "", f"{name.upper()}_API_KEY"))
        if cfg.get("adapter") == "anthropic":
            cls = AnthropicBackend
        elif cfg.get("adapter") == "openai":
            cls = OpenAICompatibleBackend
        backend = cls(cfg.get("base_url", url), cfg.get("api_key_env", env), options=cfg.get("options"))
        limits = ProviderLimits(int(cfg.get("max_in_flight", 8)), cfg.get("rate_per_sec"))
        gateway.register(name, backend, limits)
    return gateway
