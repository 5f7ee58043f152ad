"""Immutable domain records shared across modules."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .errors import SchemaError, ValidationError

CWE_ID_RE = re.compile(r"^CWE-(\d+)$")


def cwe_number(cwe_id: str) -> int:
    """Numeric part of ``"CWE-1234"``; raises ValidationError on anything else."""
    m = CWE_ID_RE.match(cwe_id)
    if m is None:
        raise ValidationError(f"not a CWE identifier: {cwe_id!r}")
    return int(m.group(1))


@dataclass(frozen=True)
class HardwareSignature:
    keywords: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        normalized = tuple(sorted(set(self.keywords)))
        if any(k != k.lower() or not k for k in normalized):
            raise ValidationError("signature keywords must be non-empty lowercase tokens")
        object.__setattr__(self, "keywords", normalized)

    def __bool__(self) -> bool:
        return bool(self.keywords)

    def as_text(self) -> str:
        return " ".join(self.keywords)


@dataclass(frozen=True)
class RtlDesign:
    design_id: str
    source_text: str
    summary: str | None = None
    signature: HardwareSignature | None = None

    def __post_init__(self) -> None:
        if not self.design_id:
            raise ValidationError("design_id must be non-empty")
        if not self.source_text:
            raise ValidationError(f"design {self.design_id!r} has empty source")


@dataclass(frozen=True)
class BenchmarkCase:
    case_id: str
    buggy_design: RtlDesign
    gold_snippet: str
    gold_cwe_id: str
    fixed_design: str | None = None
    description: str = ""

    def __post_init__(self) -> None:
        if not self.gold_snippet.strip():
            raise SchemaError(f"case {self.case_id!r}: gold snippet is empty")
        if not CWE_ID_RE.match(self.gold_cwe_id):
            raise SchemaError(f"case {self.case_id!r}: bad gold_cwe_id {self.gold_cwe_id!r}")


class Verdict(str, Enum):
    FOUND = "found"
    NOT_FOUND = "not_found"
    INDETERMINATE = "indeterminate"


@dataclass(frozen=True)
class DetectionFinding:
    design_id: str
    cwe_id: str
    verdict: Verdict
    snippet: str = ""
    rationale: str = ""
    raw_response: str = ""
    rank: int = 0
    snippet_in_design: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "verdict", Verdict(self.verdict))
        if self.verdict is Verdict.FOUND and not self.snippet.strip():
            raise ValidationError("a found verdict needs a snippet")
        if self.verdict is Verdict.NOT_FOUND and self.snippet:
            raise ValidationError("a not_found verdict carries no snippet")

    def to_dict(self) -> dict[str, Any]:
        return {
            "design_id": self.design_id,
            "cwe_id": self.cwe_id,
            "verdict": self.verdict.value,
            "snippet": self.snippet,
            "rationale": self.rationale,
            "raw_response": self.raw_response,
            "rank": self.rank,
            "snippet_in_design": self.snippet_in_design,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DetectionFinding:
        try:
            return cls(
                design_id=str(data["design_id"]),
                cwe_id=str(data["cwe_id"]),
                verdict=Verdict(data["verdict"]),
                snippet=str(data.get("snippet", "")),
                rationale=str(data.get("rationale", "")),
                raw_response=str(data.get("raw_response", "")),
                rank=int(data.get("rank", 0)),
                snippet_in_design=bool(data.get("snippet_in_design", False)),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise SchemaError(f"bad finding record: {exc}") from exc


@dataclass(frozen=True)
class RankedCwe:
    cwe_id: str
    score: float
    best_field: str


@dataclass(frozen=True)
class RetrievalResult:
    ranked: tuple[RankedCwe, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.ranked)

    def __iter__(self):
        return iter(self.ranked)

    def ids(self) -> list[str]:
        return [r.cwe_id for r in self.ranked]

    def rank_of(self, cwe_id: str) -> int | None:
        """1-based rank of ``cwe_id`` or None when it was not retrieved."""
        for i, r in enumerate(self.ranked, start=1):
            if r.cwe_id == cwe_id:
                return i
        return None

    def to_list(self) -> list[dict[str, Any]]:
        return [
            {"rank": i, "cwe_id": r.cwe_id, "score": r.score, "best_field": r.best_field}
            for i, r in enumerate(self.ranked, start=1)
        ]

    @classmethod
    def from_list(cls, rows: list[dict[str, Any]]) -> RetrievalResult:
        rows = sorted(rows, key=lambda r: int(r.get("rank", 0)))
        return cls(tuple(RankedCwe(str(r["cwe_id"]), float(r["score"]), str(r["best_field"])) for r in rows))
