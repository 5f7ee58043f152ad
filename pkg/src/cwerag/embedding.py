"""Embedding vectors and providers.

Providers implement ``embed(texts) -> list[list[float]]`` and expose ``name``
and ``dimension``. ``embed_text`` is the validated, normalizing entry point.
"""

from __future__ import annotations

import hashlib
import math
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import (
    DimensionMismatchError,
    EmbeddingDimensionError,
    EmbeddingError,
    ProviderError,
    ReplayMissError,
    ZeroVectorError,
)
from .transport import CacheMode, JsonCache, Transport, content_key, post_json


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    source_field: str = "text"

    def __post_init__(self) -> None:
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise EmbeddingError("embedding vector must have dimension >= 1")
        if not all(math.isfinite(v) for v in vals):
            raise EmbeddingError("embedding vector has non-finite components")
        object.__setattr__(self, "values", vals)

    @property
    def dimension(self) -> int:
        return len(self.values)

    def norm(self) -> float:
        return math.sqrt(math.fsum(v * v for v in self.values))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def scaled(self, c: float) -> EmbeddingVector:
        return EmbeddingVector(tuple(c * v for v in self.values), self.source_field)


def normalize(values: Sequence[float]) -> tuple[float, ...]:
    arr = np.asarray(values, dtype=np.float64)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise ZeroVectorError("cannot normalize a zero vector")
    return tuple(float(v) for v in arr / norm)


class EmbeddingProvider(Protocol):
    name: str
    dimension: int

    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


_WORD_RE = re.compile(r"[a-z0-9]+")


class HashingEmbedder:
    """Deterministic bag-of-words feature hashing; offline stand-in for a model.

    Each lower-cased alphanumeric word adds 1 to bucket ``blake2b(word) % dim``.
    Texts with no words embed to the zero vector, which ``embed_text`` rejects.
    """

    def __init__(self, dimension: int = 768) -> None:
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.name = f"hashing-bow-{dimension}"

    def bucket(self, word: str) -> int:
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.dimension

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        out = []
        for text in texts:
            vec = [0.0] * self.dimension
            for word in _WORD_RE.findall(text.lower()):
                vec[self.bucket(word)] += 1.0
            out.append(vec)
        return out


class HttpEmbedder:
    """Client for ``POST <base>/embed`` -> ``{"vectors": [...], "dimension": d}``."""

    def __init__(
        self,
        base_url: str,
        dimension: int,
        *,
        timeout: float = 60.0,
        transport: Transport | None = None,
        batch_size: int = 64,
        max_in_flight: int = 4,
        backoff: float = 0.5,
    ) -> None:
        self.url = base_url.rstrip("/") + "/embed"
        self.dimension = dimension
        self.name = f"http:{base_url}"
        self.timeout = timeout
        self.transport = transport
        self.batch_size = batch_size
        self.backoff = backoff
        self.network_calls = 0
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._count_lock = threading.Lock()

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        out: list[list[float]] = []
        for start in range(0, len(texts), self.batch_size):
            out.extend(self._embed_batch(list(texts[start:start + self.batch_size])))
        return out

    def _embed_batch(self, texts: list[str]) -> list[list[float]]:
        with self._slots:
            with self._count_lock:
                self.network_calls += 1
            try:
                body = post_json(self.url, {"texts": texts}, timeout=self.timeout,
                                 transport=self.transport, backoff=self.backoff)
            except ProviderError as exc:
                raise EmbeddingError(f"embedding request failed: {exc}") from exc
        if not isinstance(body, dict) or not isinstance(body.get("vectors"), list):
            raise EmbeddingError("embedding response lacks a 'vectors' array")
        vectors = body["vectors"]
        if len(vectors) != len(texts):
            raise EmbeddingError(f"asked for {len(texts)} vectors, got {len(vectors)}")
        if body.get("dimension") != self.dimension:
            raise EmbeddingDimensionError(
                f"provider dimension {body.get('dimension')!r} != configured {self.dimension}")
        for v in vectors:
            if not isinstance(v, list) or len(v) != self.dimension:
                raise EmbeddingDimensionError("provider returned a vector of the wrong length")
        return [[float(x) for x in v] for v in vectors]


class CachedEmbedder:
    """Record/replay cache in front of another provider (``<dir>/<sha256>.json``)."""

    def __init__(self, inner: EmbeddingProvider, directory: str | Path, mode: CacheMode = CacheMode.RECORD) -> None:
        self.inner = inner
        self.name = inner.name
        self.dimension = inner.dimension
        self.mode = CacheMode(mode)
        self.cache = JsonCache(directory)

    def _key(self, text: str) -> str:
        return content_key({"provider": self.inner.name, "dimension": self.dimension, "text": text})

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        if self.mode is CacheMode.PASSTHROUGH:
            return self.inner.embed(texts)
        found: dict[int, list[float]] = {}
        missing: list[int] = []
        for i, text in enumerate(texts):
            hit = self.cache.get(self._key(text))
            if hit is None:
                missing.append(i)
            else:
                found[i] = hit["vector"]
        if missing:
            if self.mode is CacheMode.REPLAY:
                raise ReplayMissError(f"embedding replay cache miss for {len(missing)} text(s)")
            fresh = self.inner.embed([texts[i] for i in missing])
            for i, vec in zip(missing, fresh):
                self.cache.put(self._key(texts[i]), {"text": texts[i], "vector": vec})
                found[i] = vec
        return [found[i] for i in range(len(texts))]


def vector_from_raw(raw: Sequence[float], dimension: int, source_field: str) -> EmbeddingVector:
    if len(raw) != dimension:
        raise DimensionMismatchError(f"expected dimension {dimension}, got {len(raw)}")
    try:
        return EmbeddingVector(normalize(raw), source_field)
    except ZeroVectorError as exc:
        raise EmbeddingError(f"provider returned a zero vector for field {source_field!r}") from exc


def embed_texts(texts: Sequence[str], provider: EmbeddingProvider, source_field: str = "text") -> list[EmbeddingVector]:
    """Embed and unit-normalize several texts in one provider call."""
    if any(not t or not t.strip() for t in texts):
        raise EmbeddingError("cannot embed empty text")
    if not texts:
        return []
    raw = provider.embed(list(texts))
    if len(raw) != len(texts):
        raise EmbeddingError(f"provider returned {len(raw)} vectors for {len(texts)} texts")
    return [vector_from_raw(r, provider.dimension, source_field) for r in raw]


def embed_text(text: str, provider: EmbeddingProvider, source_field: str = "text") -> EmbeddingVector:
    return embed_texts([text], provider, source_field)[0]
