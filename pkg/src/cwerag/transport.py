"""JSON-over-HTTP calls with bounded retries, plus the on-disk replay cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping

import httpx

from .errors import ProviderError, ProviderTimeoutError

log = logging.getLogger(__name__)

# (url, payload, headers, timeout) -> (status_code, decoded JSON body or None)
Transport = Callable[[str, Mapping[str, Any], Mapping[str, str], float], "tuple[int, Any]"]

MAX_ATTEMPTS = 3
RETRYABLE_STATUS = frozenset({408, 425, 429, 500, 502, 503, 504})


class CacheMode(str, Enum):
    RECORD = "record"
    REPLAY = "replay"
    PASSTHROUGH = "passthrough"


def httpx_transport(url: str, payload: Mapping[str, Any], headers: Mapping[str, str], timeout: float):
    try:
        resp = httpx.post(url, json=dict(payload), headers=dict(headers), timeout=timeout)
    except httpx.TimeoutException as exc:
        raise TimeoutError(str(exc)) from exc
    except httpx.HTTPError as exc:
        raise ConnectionError(str(exc)) from exc
    try:
        body = resp.json()
    except ValueError:
        body = None
    return resp.status_code, body


def post_json(
    url: str,
    payload: Mapping[str, Any],
    *,
    headers: Mapping[str, str] | None = None,
    timeout: float = 60.0,
    transport: Transport | None = None,
    attempts: int = MAX_ATTEMPTS,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> Any:
    """POST ``payload`` and return the decoded body of a 200 response.

    Transient failures (connection errors, timeouts, 429/5xx) are retried
    with exponential backoff; other HTTP errors fail immediately.
    """
    transport = transport or httpx_transport
    headers = headers or {}
    last: Exception | None = None
    timed_out = False
    for attempt in range(attempts):
        if attempt:
            sleep(backoff * 2 ** (attempt - 1))
        try:
            status, body = transport(url, payload, headers, timeout)
        except TimeoutError as exc:
            last, timed_out = exc, True
            log.warning("timeout on %s (attempt %d/%d)", url, attempt + 1, attempts)
            continue
        except (ConnectionError, OSError) as exc:
            last, timed_out = exc, False
            log.warning("connection error on %s (attempt %d/%d): %s", url, attempt + 1, attempts, exc)
            continue
        if status == 200:
            return body
        last, timed_out = ProviderError(f"HTTP {status} from {url}"), False
        if status not in RETRYABLE_STATUS:
            raise last
        log.warning("HTTP %d on %s (attempt %d/%d)", status, url, attempt + 1, attempts)
    if timed_out:
        raise ProviderTimeoutError(f"{url}: timed out after {attempts} attempts") from last
    raise ProviderError(f"{url}: failed after {attempts} attempts: {last}") from last


def content_key(obj: Any) -> str:
    """sha256 of the canonical JSON encoding of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class JsonCache:
    """One JSON document per key under ``directory``; atomic writes."""

    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)
        self._lock = threading.Lock()

    def path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> Any | None:
        try:
            with open(self.path(key), encoding="utf-8") as fh:
                return json.load(fh)
        except FileNotFoundError:
            return None

    def put(self, key: str, value: Any) -> None:
        data = json.dumps(value, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
        with self._lock:
            self.directory.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(data)
            os.replace(tmp, self.path(key))
