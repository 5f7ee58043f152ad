"""Wiring of the two phases: retrieval (summary, signature, query, top-k) and detection."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Sequence

from .agents import DetectionAgent, DetectionRun, PromptSet, SummarizerAgent
from .config import API_KEY_ENV, PipelineConfig
from .embedding import CachedEmbedder, EmbeddingProvider, HashingEmbedder, HttpEmbedder, embed_text
from .errors import (
    AgentError,
    ConfigError,
    ContextOverflowError,
    DimensionMismatchError,
    EmbeddingError,
    ReplayMissError,
)
from .hdl import SignatureLexicon, extract_signature
from .kb import CweKnowledgeBase
from .llm import LlmClient, ModelProfile
from .model import RetrievalResult, RtlDesign
from .retrieval import compose_query, retrieve_top_k
from .transport import CacheMode, Transport

log = logging.getLogger(__name__)

FROZEN_TIMESTAMP = "1970-01-01T00:00:00Z"


def timestamp(frozen: bool = False) -> str:
    if frozen:
        return FROZEN_TIMESTAMP
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def config_hash(cfg: PipelineConfig) -> str:
    return sha256_text(json.dumps(cfg.to_dict(), sort_keys=True))[:16]


@dataclass
class Runtime:
    """Everything a stage needs: config plus live clients."""

    config: PipelineConfig
    mode: CacheMode
    llm: LlmClient
    summarizer: SummarizerAgent
    detector: DetectionAgent
    embedder: EmbeddingProvider
    lexicon: SignatureLexicon
    frozen_time: bool = False

    def stats(self) -> dict[str, Any]:
        out = {"llm": self.llm.stats(), "embedder": self.embedder.name}
        inner = getattr(self.embedder, "inner", self.embedder)
        if hasattr(inner, "network_calls"):
            out["embed_network_calls"] = inner.network_calls
        return out


def build_runtime(
    config: PipelineConfig,
    *,
    mode: CacheMode | str = CacheMode.RECORD,
    env: Mapping[str, str] | None = None,
    llm_transport: Transport | None = None,
    embed_transport: Transport | None = None,
    prompts: PromptSet | None = None,
    lexicon: SignatureLexicon | None = None,
    frozen_time: bool = False,
    backoff: float = 0.5,
) -> Runtime:
    mode = CacheMode(mode)
    env = env or {}
    api_key = env.get(API_KEY_ENV) or None
    if mode is CacheMode.PASSTHROUGH and not api_key:
        raise ConfigError(f"passthrough mode needs {API_KEY_ENV}")
    cache_dir = Path(config.cache_dir)
    llm = LlmClient(
        config.llm_base_url,
        api_key=api_key,
        mode=mode,
        cache_dir=cache_dir,
        transport=llm_transport,
        timeout=config.request_timeout,
        max_in_flight=config.max_parallel,
        backoff=backoff,
    )
    summarizer_profile = ModelProfile(config.summarizer_model, config.summarizer_context_window,
                                      config.context_window_threshold)
    detector_profile = ModelProfile(config.detector_model, config.detector_context_window,
                                    config.context_window_threshold)
    embedder: EmbeddingProvider
    if config.embed_provider == "hashing":
        embedder = HashingEmbedder(config.embedding_dimension)
    else:
        http = HttpEmbedder(config.embed_base_url, config.embedding_dimension, timeout=config.request_timeout,
                            transport=embed_transport, max_in_flight=config.max_parallel, backoff=backoff)
        embedder = CachedEmbedder(http, cache_dir / "embed", mode)
    return Runtime(
        config=config,
        mode=mode,
        llm=llm,
        summarizer=SummarizerAgent(llm, summarizer_profile, prompts),
        detector=DetectionAgent(llm, detector_profile, prompts),
        embedder=embedder,
        lexicon=lexicon or SignatureLexicon.default(),
        frozen_time=frozen_time,
    )


@dataclass
class DesignResult:
    design: RtlDesign
    retrieval: RetrievalResult | None = None
    detection: DetectionRun | None = None
    error: str | None = None
    error_kind: str | None = None
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.error is None and self.detection is not None

    def trace(self) -> dict[str, Any]:
        d = self.design
        return {
            "design_id": d.design_id,
            "signature": list(d.signature.keywords) if d.signature else [],
            "summary": d.summary,
            "ranked": self.retrieval.to_list() if self.retrieval else [],
            "detection_mode": self.detection.mode_used if self.detection else None,
            "fallback_reason": self.detection.fallback_reason if self.detection else None,
            "error": self.error,
        }


def retrieve_for_design(rt: Runtime, kb: CweKnowledgeBase, design: RtlDesign, top_k: int) -> tuple[RtlDesign, RetrievalResult]:
    """Summarize, extract the signature, compose the weighted query and rank CWEs."""
    summary = rt.summarizer.summarize_rtl(design)
    signature = extract_signature(design, rt.lexicon)
    design = replace(design, summary=summary, signature=signature)
    summary_emb = embed_text(summary, rt.embedder, "summary")
    signature_emb = embed_text(signature.as_text(), rt.embedder, "signature") if signature else None
    query = compose_query(summary_emb, signature_emb, rt.config.alpha, rt.config.beta)
    return design, retrieve_top_k(kb, query, top_k, rt.config.field_combiner)


def analyze_design(rt: Runtime, kb: CweKnowledgeBase, design: RtlDesign,
                   top_k: int | None = None, mode: str | None = None) -> DesignResult:
    result = DesignResult(design)
    clock = (lambda: 0.0) if rt.frozen_time else time.perf_counter
    t0 = clock()
    try:
        result.design, result.retrieval = retrieve_for_design(rt, kb, design, top_k or rt.config.top_k)
        t1 = clock()
        result.detection = rt.detector.run(result.design, result.design.summary, result.retrieval, kb,
                                           mode or rt.config.detection_mode)
        result.timings = {"retrieval_s": t1 - t0, "detection_s": clock() - t1}
    except ReplayMissError:
        # a stale cache is a configuration fault for the whole run
        raise
    except (AgentError, EmbeddingError, ContextOverflowError, DimensionMismatchError) as exc:
        log.error("%s: %s", design.design_id, exc)
        result.error, result.error_kind = str(exc), type(exc).__name__
    return result


def analyze_designs(rt: Runtime, kb: CweKnowledgeBase, designs: Sequence[RtlDesign], jobs: int = 1,
                    top_k: int | None = None, mode: str | None = None) -> list[DesignResult]:
    if kb.embedding_dimension != rt.embedder.dimension:
        raise ConfigError(
            f"knowledge base dimension {kb.embedding_dimension} != embedder dimension {rt.embedder.dimension}")
    built_with = kb.provenance.get("embedding_provider")
    if built_with and built_with != rt.embedder.name:
        log.warning("knowledge base was embedded with %s, querying with %s", built_with, rt.embedder.name)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(lambda d: analyze_design(rt, kb, d, top_k, mode), designs))
    return sorted(results, key=lambda r: r.design.design_id)
