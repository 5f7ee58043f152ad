"""Cosine similarity, weighted query composition and exhaustive top-k search."""

from __future__ import annotations

import math
from typing import TYPE_CHECKING

import numpy as np

from .embedding import EmbeddingVector
from .errors import DimensionMismatchError, PreconditionError, ValidationError, ZeroVectorError
from .model import RankedCwe, RetrievalResult, cwe_number

if TYPE_CHECKING:
    from .kb import CweKnowledgeBase

SEARCH_FIELDS = ("summary", "keywords", "vulnerable_snippet")
COMBINERS = ("max", "mean")


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.dimension != b.dimension:
        raise DimensionMismatchError(f"cosine of vectors with dimensions {a.dimension} and {b.dimension}")
    na, nb = a.norm(), b.norm()
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine is undefined for a zero vector")
    dot = math.fsum(x * y for x, y in zip(a.values, b.values))
    return max(-1.0, min(1.0, dot / (na * nb)))


def compose_query(
    summary_emb: EmbeddingVector,
    signature_emb: EmbeddingVector | None,
    alpha: float = 0.7,
    beta: float = 0.3,
) -> EmbeddingVector:
    """Weighted query ``alpha * summary + beta * signature``.

    A design with no signature (``signature_emb is None``) queries with the
    summary embedding alone, whatever ``beta`` is.
    """
    if alpha < 0 or beta < 0 or alpha + beta <= 0:
        raise ValidationError(f"invalid query weights alpha={alpha}, beta={beta}")
    if signature_emb is None:
        return EmbeddingVector(summary_emb.values, "query")
    if summary_emb.dimension != signature_emb.dimension:
        raise DimensionMismatchError(
            f"summary dimension {summary_emb.dimension} != signature dimension {signature_emb.dimension}")
    # zero weights short-circuit so the other side is returned bit-for-bit (keeps -0.0)
    if beta == 0:
        values = tuple(alpha * s for s in summary_emb.values) if alpha != 1 else summary_emb.values
    elif alpha == 0:
        values = tuple(beta * k for k in signature_emb.values) if beta != 1 else signature_emb.values
    else:
        values = tuple(alpha * s + beta * k for s, k in zip(summary_emb.values, signature_emb.values))
    return EmbeddingVector(values, "query")


def field_scores(kb: CweKnowledgeBase, query: EmbeddingVector) -> np.ndarray:
    """Cosine of ``query`` against every searchable field; shape (n_records, 3)."""
    if query.dimension != kb.embedding_dimension:
        raise DimensionMismatchError(
            f"query dimension {query.dimension} != knowledge base dimension {kb.embedding_dimension}")
    q = query.as_array()
    qn = float(np.linalg.norm(q))
    if qn == 0.0:
        raise ZeroVectorError("query vector is zero")
    matrices, norms = kb.field_matrices()
    cols = [(matrices[f] * q).sum(axis=1) / (norms[f] * qn) for f in SEARCH_FIELDS]
    return np.clip(np.stack(cols, axis=1), -1.0, 1.0)


def retrieve_top_k(
    kb: CweKnowledgeBase,
    query: EmbeddingVector,
    k: int = 10,
    combiner: str = "max",
) -> RetrievalResult:
    """Rank every record by its best (or mean) field cosine and keep the top k.

    Ties are broken by ascending numeric CWE id.
    """
    if k < 1:
        raise PreconditionError(f"k must be >= 1 (got {k})")
    if combiner not in COMBINERS:
        raise ValidationError(f"unknown field combiner {combiner!r}")
    if not kb.records:
        if query.dimension != kb.embedding_dimension:
            raise DimensionMismatchError("query dimension does not match knowledge base")
        return RetrievalResult(())
    scores = field_scores(kb, query)
    best = scores.argmax(axis=1)
    combined = scores.max(axis=1) if combiner == "max" else scores.mean(axis=1)
    order = sorted(
        range(len(kb.records)),
        key=lambda i: (-combined[i], cwe_number(kb.records[i].cwe_id)),
    )
    ranked = tuple(
        RankedCwe(kb.records[i].cwe_id, float(combined[i]), SEARCH_FIELDS[int(best[i])])
        for i in order[:k]
    )
    return RetrievalResult(ranked)
