"""Pipeline configuration: a flat JSON document plus environment overrides."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .errors import ParseError, ValidationError

DETECTION_MODES = ("iterative", "batch", "auto")
EMBED_PROVIDERS = ("http", "hashing")
FIELD_COMBINERS = ("max", "mean")

API_KEY_ENV = "SRR_LLM_API_KEY"

# env var -> config key; env wins over the file
ENV_OVERRIDES = {
    "SRR_LLM_BASE_URL": "llm_base_url",
    "SRR_EMBED_BASE_URL": "embed_base_url",
    "SRR_CACHE_DIR": "cache_dir",
}


@dataclass(frozen=True)
class PipelineConfig:
    alpha: float = 0.7
    beta: float = 0.3
    top_k: int = 10
    detection_mode: str = "auto"
    context_window_threshold: int = 32000
    embedding_dimension: int = 768
    llm_base_url: str = "http://127.0.0.1:8080"
    embed_base_url: str = "http://127.0.0.1:8081"
    cache_dir: str = ".cwerag-cache"
    summarizer_model: str = "summarizer"
    detector_model: str = "detector"
    summarizer_context_window: int = 128000
    detector_context_window: int = 8192
    embed_provider: str = "http"
    field_combiner: str = "max"
    request_timeout: float = 120.0
    max_parallel: int = 4

    def __post_init__(self) -> None:
        validate_config(self)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def validate_config(cfg: PipelineConfig) -> None:
    if not (_finite(cfg.alpha) and _finite(cfg.beta)):
        raise ValidationError("alpha and beta must be finite numbers")
    if cfg.alpha < 0 or cfg.beta < 0:
        raise ValidationError(f"alpha and beta must be >= 0 (got {cfg.alpha}, {cfg.beta})")
    if cfg.alpha + cfg.beta <= 0:
        raise ValidationError("alpha + beta must be > 0")
    for name in ("top_k", "context_window_threshold", "embedding_dimension",
                 "summarizer_context_window", "detector_context_window", "max_parallel"):
        value = getattr(cfg, name)
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            raise ValidationError(f"{name} must be a positive integer (got {value!r})")
    if cfg.detection_mode not in DETECTION_MODES:
        raise ValidationError(f"detection_mode must be one of {DETECTION_MODES}")
    if cfg.embed_provider not in EMBED_PROVIDERS:
        raise ValidationError(f"embed_provider must be one of {EMBED_PROVIDERS}")
    if cfg.field_combiner not in FIELD_COMBINERS:
        raise ValidationError(f"field_combiner must be one of {FIELD_COMBINERS}")
    if not _finite(cfg.request_timeout) or cfg.request_timeout <= 0:
        raise ValidationError("request_timeout must be positive")


def _finite(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and x == x and abs(x) != float("inf")


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _coerce(key: str, value: Any) -> Any:
    kind = _FIELD_TYPES[key]
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{key} must be a number")
        return float(value)
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{key} must be an integer")
        return value
    if not isinstance(value, str):
        raise ValidationError(f"{key} must be a string")
    return value


def config_from_mapping(data: Mapping[str, Any], env: Mapping[str, str] | None = None) -> PipelineConfig:
    unknown = sorted(set(data) - set(_FIELD_TYPES))
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _coerce(k, v) for k, v in data.items()}
    for var, key in ENV_OVERRIDES.items():
        if env and env.get(var):
            values[key] = env[var]
    return PipelineConfig(**values)


def load_config(path: str | Path | None, env: Mapping[str, str] | None = None) -> PipelineConfig:
    """Read a config file (or none), apply defaults and environment overrides."""
    if env is None:
        env = os.environ
    data: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ParseError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ParseError(f"{path}: config must be a flat JSON object")
        nested = [k for k, v in data.items() if isinstance(v, (dict, list))]
        if nested:
            raise ParseError(f"{path}: nested values not allowed ({', '.join(nested)})")
    return config_from_mapping(data, env)


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def with_overrides(cfg: PipelineConfig, **overrides: Any) -> PipelineConfig:
    """Apply non-None overrides (typically CLI flags)."""
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
