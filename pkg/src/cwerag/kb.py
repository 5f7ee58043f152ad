"""CWE knowledge base: raw ingest, LLM enrichment, field embeddings, persistence.

Persisted layout::

    <dir>/manifest.json   {"format_version", "dimension", "record_count", "provenance"}
    <dir>/records.jsonl   one enriched record per line, embeddings as float arrays
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .agents import SummarizerAgent
from .embedding import EmbeddingProvider, EmbeddingVector, vector_from_raw
from .errors import (
    DimensionMismatchError,
    DuplicateIdError,
    EmbeddingError,
    KbIoError,
    SchemaError,
    ValidationError,
    VersionError,
)
from .model import CWE_ID_RE, cwe_number
from .retrieval import SEARCH_FIELDS

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
RECORDS_FILE = "records.jsonl"


@dataclass(frozen=True)
class RawCweEntry:
    cwe_id: str
    title: str
    description: str
    extended_description: str = ""
    mitigations: tuple[str, ...] = ()
    modes_of_introduction: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not CWE_ID_RE.match(self.cwe_id):
            raise SchemaError(f"bad cwe_id {self.cwe_id!r}")
        if not self.title.strip() or not self.description.strip():
            raise SchemaError(f"{self.cwe_id}: title and description must be non-empty")
        object.__setattr__(self, "mitigations", tuple(self.mitigations))
        object.__setattr__(self, "modes_of_introduction", tuple(self.modes_of_introduction))


def _str_list(obj: Mapping[str, Any], key: str, where: str) -> tuple[str, ...]:
    value = obj.get(key, [])
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise SchemaError(f"{where}: {key} must be a list of strings")
    return tuple(value)


def ingest_raw(path: str | Path) -> list[RawCweEntry]:
    """Load a JSON array of raw CWE objects, sorted by numeric id."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise KbIoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise SchemaError(f"{path}: expected a JSON array of CWE objects")
    entries: dict[str, RawCweEntry] = {}
    for i, obj in enumerate(data):
        where = f"{path}[{i}]"
        if not isinstance(obj, dict):
            raise SchemaError(f"{where}: expected an object")
        for key in ("cwe_id", "title", "description"):
            if not isinstance(obj.get(key), str):
                raise SchemaError(f"{where}: {key} missing or not a string")
        ext = obj.get("extended_description", "")
        if not isinstance(ext, str):
            raise SchemaError(f"{where}: extended_description must be a string")
        entry = RawCweEntry(
            cwe_id=obj["cwe_id"],
            title=obj["title"],
            description=obj["description"],
            extended_description=ext,
            mitigations=_str_list(obj, "mitigations", where),
            modes_of_introduction=_str_list(obj, "modes_of_introduction", where),
        )
        if entry.cwe_id in entries:
            raise DuplicateIdError(f"{path}: duplicate {entry.cwe_id}")
        entries[entry.cwe_id] = entry
    return sorted(entries.values(), key=lambda e: cwe_number(e.cwe_id))


@dataclass(frozen=True)
class EnrichedCweRecord:
    cwe_id: str
    title: str
    summary: str
    keywords: tuple[str, ...]
    vulnerable_snippet: str
    secure_snippet: str
    field_embeddings: Mapping[str, EmbeddingVector] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "keywords", tuple(self.keywords))
        object.__setattr__(self, "field_embeddings", dict(self.field_embeddings))
        if not CWE_ID_RE.match(self.cwe_id):
            raise SchemaError(f"bad cwe_id {self.cwe_id!r}")
        for name in ("summary", "vulnerable_snippet", "secure_snippet"):
            if not getattr(self, name).strip():
                raise SchemaError(f"{self.cwe_id}: {name} is empty")
        if not self.keywords or any(not k or k != k.lower() for k in self.keywords):
            raise SchemaError(f"{self.cwe_id}: keywords must be non-empty lowercase terms")
        if self.field_embeddings and set(self.field_embeddings) != set(SEARCH_FIELDS):
            raise SchemaError(f"{self.cwe_id}: embeddings must cover exactly {SEARCH_FIELDS}")

    def field_text(self, name: str) -> str:
        if name == "keywords":
            return " ".join(self.keywords)
        return getattr(self, name)

    def to_dict(self, with_embeddings: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {
            "cwe_id": self.cwe_id,
            "title": self.title,
            "summary": self.summary,
            "keywords": list(self.keywords),
            "vulnerable_snippet": self.vulnerable_snippet,
            "secure_snippet": self.secure_snippet,
        }
        if with_embeddings:
            out["embeddings"] = {k: list(v.values) for k, v in sorted(self.field_embeddings.items())}
        return out


def enrich(entry: RawCweEntry, summarizer: SummarizerAgent) -> EnrichedCweRecord:
    """Summary/keywords and a vulnerable/secure snippet pair for one CWE (no embeddings)."""
    summary, keywords = summarizer.summarize_keywords(entry)
    vulnerable, secure = summarizer.snippet_pair(entry)
    return EnrichedCweRecord(
        cwe_id=entry.cwe_id,
        title=entry.title,
        summary=summary,
        keywords=tuple(keywords),
        vulnerable_snippet=vulnerable,
        secure_snippet=secure,
    )


def enrich_all(entries: Sequence[RawCweEntry], summarizer: SummarizerAgent, jobs: int = 1) -> list[EnrichedCweRecord]:
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        records = list(pool.map(lambda e: enrich(e, summarizer), entries))
    return sorted(records, key=lambda r: cwe_number(r.cwe_id))


@dataclass(frozen=True)
class CweKnowledgeBase:
    records: tuple[EnrichedCweRecord, ...]
    embedding_dimension: int
    provenance: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        records = tuple(sorted(self.records, key=lambda r: cwe_number(r.cwe_id)))
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "provenance", dict(self.provenance))
        if self.embedding_dimension < 1:
            raise ValidationError("embedding_dimension must be positive")
        seen: set[str] = set()
        for rec in records:
            if rec.cwe_id in seen:
                raise DuplicateIdError(f"duplicate {rec.cwe_id} in knowledge base")
            seen.add(rec.cwe_id)
            if set(rec.field_embeddings) != set(SEARCH_FIELDS):
                raise SchemaError(f"{rec.cwe_id}: missing field embeddings")
            for name, vec in rec.field_embeddings.items():
                if vec.dimension != self.embedding_dimension:
                    raise DimensionMismatchError(
                        f"{rec.cwe_id}.{name}: dimension {vec.dimension} != {self.embedding_dimension}")
        object.__setattr__(self, "_index", {r.cwe_id: r for r in records})
        object.__setattr__(self, "_matrices", None)

    def __len__(self) -> int:
        return len(self.records)

    def get(self, cwe_id: str) -> EnrichedCweRecord:
        try:
            return self._index[cwe_id]
        except KeyError:
            raise KeyError(f"{cwe_id} is not in the knowledge base") from None

    def field_matrices(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        """Per-field (n, d) embedding matrices and row norms, built once."""
        if self._matrices is None:
            mats = {
                f: np.array([r.field_embeddings[f].values for r in self.records], dtype=np.float64)
                for f in SEARCH_FIELDS
            }
            norms = {f: np.linalg.norm(m, axis=1) for f, m in mats.items()}
            object.__setattr__(self, "_matrices", (mats, norms))
        return self._matrices

    def vector_count(self) -> int:
        return sum(len(r.field_embeddings) for r in self.records)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CweKnowledgeBase):
            return NotImplemented
        return (self.records == other.records and self.embedding_dimension == other.embedding_dimension
                and self.provenance == other.provenance)

    __hash__ = None


def embed_records(
    records: Sequence[EnrichedCweRecord],
    embedder: EmbeddingProvider,
    provenance: Mapping[str, str] | None = None,
) -> CweKnowledgeBase:
    """Attach unit-normalized summary / keywords / vulnerable_snippet embeddings."""
    records = sorted(records, key=lambda r: cwe_number(r.cwe_id))
    texts = [r.field_text(f) for r in records for f in SEARCH_FIELDS]
    vectors: list[EmbeddingVector] = []
    if texts:
        raw = embedder.embed(texts)
        if len(raw) != len(texts):
            raise EmbeddingError(f"provider returned {len(raw)} vectors for {len(texts)} texts")
        dims = {len(v) for v in raw}
        if len(dims) != 1 or dims != {embedder.dimension}:
            raise DimensionMismatchError(
                f"provider returned dimensions {sorted(dims)}, expected {embedder.dimension}")
        vectors = [
            vector_from_raw(v, embedder.dimension, SEARCH_FIELDS[i % len(SEARCH_FIELDS)])
            for i, v in enumerate(raw)
        ]
    out = []
    for i, rec in enumerate(records):
        fields_ = {f: vectors[i * len(SEARCH_FIELDS) + j] for j, f in enumerate(SEARCH_FIELDS)}
        out.append(replace(rec, field_embeddings=fields_))
    prov = {"embedding_provider": embedder.name}
    prov.update(provenance or {})
    return CweKnowledgeBase(tuple(out), embedder.dimension, prov)


def save_kb(kb: CweKnowledgeBase, path: str | Path) -> None:
    directory = Path(path)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format_version": FORMAT_VERSION,
            "dimension": kb.embedding_dimension,
            "record_count": len(kb.records),
            "provenance": dict(sorted(kb.provenance.items())),
        }
        (directory / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")
        with open(directory / RECORDS_FILE, "w", encoding="utf-8", newline="\n") as fh:
            for rec in kb.records:
                # json emits repr(float), which round-trips exactly
                fh.write(json.dumps(rec.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
    except OSError as exc:
        raise KbIoError(f"cannot write knowledge base to {directory}: {exc}") from exc


def load_kb(path: str | Path) -> CweKnowledgeBase:
    directory = Path(path)
    try:
        manifest = json.loads((directory / MANIFEST_FILE).read_text(encoding="utf-8"))
        lines = (directory / RECORDS_FILE).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise KbIoError(f"cannot read knowledge base at {directory}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{directory / MANIFEST_FILE}: {exc}") from exc
    if not isinstance(manifest, dict):
        raise SchemaError("manifest must be an object")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported knowledge base format version {version!r} (expected {FORMAT_VERSION})")
    dimension = manifest.get("dimension")
    if not isinstance(dimension, int) or dimension < 1:
        raise SchemaError("manifest dimension must be a positive integer")
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            embeddings = obj["embeddings"]
            vectors = {}
            for name, values in embeddings.items():
                if len(values) != dimension:
                    raise DimensionMismatchError(
                        f"{RECORDS_FILE}:{lineno}: {obj['cwe_id']}.{name} has {len(values)} values, "
                        f"manifest says {dimension}")
                vectors[name] = EmbeddingVector(tuple(values), name)
            records.append(EnrichedCweRecord(
                cwe_id=obj["cwe_id"],
                title=obj["title"],
                summary=obj["summary"],
                keywords=tuple(obj["keywords"]),
                vulnerable_snippet=obj["vulnerable_snippet"],
                secure_snippet=obj["secure_snippet"],
                field_embeddings=vectors,
            ))
        except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
            raise SchemaError(f"{RECORDS_FILE}:{lineno}: malformed record ({exc})") from exc
    if manifest.get("record_count") != len(records):
        raise SchemaError(f"manifest record_count {manifest.get('record_count')} != {len(records)} records")
    return CweKnowledgeBase(tuple(records), dimension, manifest.get("provenance") or {})


def unit_norm_ok(vec: EmbeddingVector, tol: float = 1e-6) -> bool:
    return math.isclose(vec.norm(), 1.0, abs_tol=tol)
