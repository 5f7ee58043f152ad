"""Chat-completion client with token guarding, retries and a replay cache.

Wire contract::

    POST <base>/chat
    {"model", "messages": [{"role", "content"}, ...], "temperature", "max_tokens"}
    -> {"text": str, "usage": {"input_tokens": int, "output_tokens": int}}

Cached exchanges live in ``<cache_dir>/llm/<sha256>.json``.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

from .errors import ConfigError, ContextOverflowError, ProviderError, ReplayMissError, ValidationError
from .transport import CacheMode, JsonCache, Transport, content_key, post_json

log = logging.getLogger(__name__)


def estimate_tokens(text: str) -> int:
    """Conservative token count: ceil(utf-8 bytes / 3)."""
    return math.ceil(len(text.encode("utf-8")) / 3)


@dataclass(frozen=True)
class ChatRequest:
    model_name: str
    system_text: str
    user_text: str
    temperature: float = 0.0
    max_output_tokens: int = 2048

    def __post_init__(self) -> None:
        if not self.system_text or not self.user_text:
            raise ValidationError("chat request texts must be non-empty")
        if self.max_output_tokens < 1:
            raise ValidationError("max_output_tokens must be positive")

    def prompt_tokens(self) -> int:
        return estimate_tokens(self.system_text) + estimate_tokens(self.user_text)

    def cache_key(self) -> str:
        return content_key(asdict(self))


@dataclass(frozen=True)
class ChatResponse:
    text: str
    input_tokens: int = 0
    output_tokens: int = 0
    cached: bool = False


@dataclass(frozen=True)
class ModelProfile:
    model_name: str
    context_window_tokens: int
    batch_threshold: int = 32000

    def __post_init__(self) -> None:
        if self.context_window_tokens <= 0:
            raise ValidationError("context_window_tokens must be positive")

    @property
    def supports_batch_cwe(self) -> bool:
        return self.context_window_tokens >= self.batch_threshold

    def check_fits(self, request: ChatRequest) -> None:
        est = request.prompt_tokens()
        if est > self.context_window_tokens:
            raise ContextOverflowError(
                f"prompt of ~{est} tokens exceeds {self.model_name} window of {self.context_window_tokens}",
                estimated=est,
                window=self.context_window_tokens,
            )


class LlmClient:
    """Shareable chat client. ``network_calls`` counts requests sent upstream."""

    def __init__(
        self,
        base_url: str,
        *,
        api_key: str | None = None,
        mode: CacheMode | str = CacheMode.RECORD,
        cache_dir: str | Path | None = None,
        transport: Transport | None = None,
        timeout: float = 120.0,
        max_in_flight: int = 4,
        backoff: float = 0.5,
    ) -> None:
        self.url = base_url.rstrip("/") + "/chat"
        self.api_key = api_key
        self.mode = CacheMode(mode)
        if self.mode is not CacheMode.PASSTHROUGH and cache_dir is None:
            raise ConfigError(f"{self.mode.value} mode needs a cache directory")
        self.cache = JsonCache(Path(cache_dir) / "llm") if cache_dir is not None else None
        self.transport = transport
        self.timeout = timeout
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._stats_lock = threading.Lock()
        self.network_calls = 0
        self.cache_hits = 0
        self.input_tokens = 0
        self.output_tokens = 0

    def complete(self, request: ChatRequest, profile: ModelProfile) -> ChatResponse:
        profile.check_fits(request)
        key = request.cache_key()
        if self.mode is not CacheMode.PASSTHROUGH:
            hit = self.cache.get(key)
            if hit is not None:
                r = hit["response"]
                with self._stats_lock:
                    self.cache_hits += 1
                return ChatResponse(r["text"], r["input_tokens"], r["output_tokens"], cached=True)
            if self.mode is CacheMode.REPLAY:
                raise ReplayMissError(f"no recorded response for request {key[:12]} ({request.model_name})")
        response = self._call(request)
        if self.mode is CacheMode.RECORD:
            self.cache.put(key, {
                "request": asdict(request),
                "response": {
                    "text": response.text,
                    "input_tokens": response.input_tokens,
                    "output_tokens": response.output_tokens,
                },
            })
        return response

    def _call(self, request: ChatRequest) -> ChatResponse:
        if not self.api_key:
            raise ConfigError("an LLM API key is required for network calls (set SRR_LLM_API_KEY)")
        payload = {
            "model": request.model_name,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        with self._slots:
            with self._stats_lock:
                self.network_calls += 1
            body = post_json(self.url, payload, headers=headers, timeout=self.timeout,
                             transport=self.transport, backoff=self.backoff)
        text, usage = _decode_body(body)
        in_tok = int(usage.get("input_tokens", request.prompt_tokens()))
        out_tok = int(usage.get("output_tokens", estimate_tokens(text)))
        with self._stats_lock:
            self.input_tokens += in_tok
            self.output_tokens += out_tok
        return ChatResponse(text, in_tok, out_tok, cached=False)

    def stats(self) -> dict[str, Any]:
        return {
            "mode": self.mode.value,
            "network_calls": self.network_calls,
            "cache_hits": self.cache_hits,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
        }


def _decode_body(body: Any) -> tuple[str, dict[str, Any]]:
    if not isinstance(body, dict) or not isinstance(body.get("text"), str):
        raise ProviderError("chat response lacks a 'text' field")
    usage = body.get("usage") or {}
    if not isinstance(usage, dict):
        usage = {}
    return body["text"], usage
