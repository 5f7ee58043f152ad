"""Snippet localization (ROUGE-L), detection accuracy and retrieval hit counts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import EmptyDatasetError, SchemaError, ValidationError
from .model import BenchmarkCase, DetectionFinding, RetrievalResult, Verdict

HIT_THRESHOLDS = (1, 5, 10)


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f_lcs: float
    lcs_length: int
    beta_weight: float = 1.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f_lcs": self.f_lcs,
            "lcs_length": self.lcs_length,
            "beta_weight": self.beta_weight,
        }


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Length of the longest common subsequence, bit-parallel over ``a``.

    Each bit of ``row`` tracks one position of ``a``; after consuming ``b`` the
    number of cleared bits is the LCS length (Allison-Dix / Hyyro recurrence).
    """
    if not a or not b:
        return 0
    masks: dict[str, int] = {}
    for i, tok in enumerate(a):
        masks[tok] = masks.get(tok, 0) | (1 << i)
    full = (1 << len(a)) - 1
    row = full
    for tok in b:
        match = row & masks.get(tok, 0)
        row = ((row + match) | (row - match)) & full
    return len(a) - bin(row).count("1")


def f_measure(precision: float, recall: float, beta_weight: float = 1.0) -> float:
    if precision == 0.0 and recall == 0.0:
        return 0.0
    b2 = beta_weight * beta_weight
    return (1 + b2) * precision * recall / (recall + b2 * precision)


def rouge_l(reference: Sequence[str], candidate: Sequence[str], beta_weight: float = 1.0) -> RougeScore:
    if not beta_weight > 0:
        raise ValidationError(f"beta_weight must be > 0 (got {beta_weight})")
    lcs = lcs_length(reference, candidate)
    precision = lcs / len(candidate) if candidate else 0.0
    recall = lcs / len(reference) if reference else 0.0
    return RougeScore(precision, recall, f_measure(precision, recall, beta_weight), lcs, beta_weight)


def tokenize_snippet(text: str) -> list[str]:
    return text.split()


def percent(numerator: int | Fraction, denominator: int = 1) -> str:
    """Exact two-decimal percentage, rounding half up: ``percent(9, 14) == "64.29%"``."""
    value = Fraction(numerator) / denominator * 100
    hundredths = (value * 100 + Fraction(1, 2)).__floor__()
    sign = "-" if hundredths < 0 else ""
    hundredths = abs(hundredths)
    return f"{sign}{hundredths // 100}.{hundredths % 100:02d}%"


@dataclass(frozen=True)
class CaseScore:
    case_id: str
    gold_cwe_id: str
    detected: bool
    matched_cwe_rank: int | None = None
    rouge: RougeScore | None = None
    gold_retrieval_rank: int | None = None
    other_found: tuple[str, ...] = ()
    indeterminate: int = 0

    @property
    def rouge_f_zero_filled(self) -> float:
        return self.rouge.f_lcs if self.rouge else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "gold_cwe_id": self.gold_cwe_id,
            "detected": self.detected,
            "matched_cwe_rank": self.matched_cwe_rank,
            "rouge": self.rouge.to_dict() if self.rouge else None,
            "rouge_f_zero_filled": self.rouge_f_zero_filled,
            "gold_retrieval_rank": self.gold_retrieval_rank,
            "other_found": list(self.other_found),
            "indeterminate": self.indeterminate,
        }


def score_case(
    case: BenchmarkCase,
    findings: Sequence[DetectionFinding],
    retrieval: RetrievalResult | None = None,
) -> CaseScore:
    """Detected iff a FOUND finding names the gold CWE; the best-ranked such finding is scored."""
    ordered = sorted(enumerate(findings), key=lambda p: (p[1].rank or p[0] + 1, p[0]))
    found = [f for _, f in ordered if f.verdict is Verdict.FOUND]
    matches = [f for f in found if f.cwe_id == case.gold_cwe_id]
    others = tuple(dict.fromkeys(f.cwe_id for f in found if f.cwe_id != case.gold_cwe_id))
    indeterminate = sum(1 for f in findings if f.verdict is Verdict.INDETERMINATE)
    gold_rank = retrieval.rank_of(case.gold_cwe_id) if retrieval is not None else None
    if not matches:
        return CaseScore(case.case_id, case.gold_cwe_id, False, None, None, gold_rank, others, indeterminate)
    best = matches[0]
    score = rouge_l(tokenize_snippet(case.gold_snippet), tokenize_snippet(best.snippet), 1.0)
    rank = best.rank or None
    return CaseScore(case.case_id, case.gold_cwe_id, True, rank, score, gold_rank, others, indeterminate)


def detection_accuracy(records: Sequence[CaseScore]) -> float:
    if not records:
        raise EmptyDatasetError("detection accuracy over zero cases")
    return sum(1 for r in records if r.detected) / len(records)


@dataclass(frozen=True)
class RetrievalHits:
    t1: int
    t5: int
    t10: int

    def to_dict(self) -> dict[str, int]:
        return {"t1": self.t1, "t5": self.t5, "t10": self.t10}


def retrieval_hits(cases: Iterable[tuple[str, RetrievalResult | Sequence[str]]]) -> RetrievalHits:
    """Count cases whose gold CWE is among the first 1, 5 and 10 ranked ids."""
    counts = dict.fromkeys(HIT_THRESHOLDS, 0)
    for gold, ranking in cases:
        ids = ranking.ids() if isinstance(ranking, RetrievalResult) else list(ranking)
        for n in HIT_THRESHOLDS:
            if gold in ids[:n]:
                counts[n] += 1
    return RetrievalHits(counts[1], counts[5], counts[10])


@dataclass
class EvaluationReport:
    per_case: list[CaseScore]
    retrieval_hits: RetrievalHits | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.per_case = sorted(self.per_case, key=lambda c: c.case_id)

    @property
    def case_count(self) -> int:
        return len(self.per_case)

    @property
    def detected_count(self) -> int:
        return sum(1 for c in self.per_case if c.detected)

    @property
    def detection_accuracy(self) -> float:
        return detection_accuracy(self.per_case)

    @property
    def accuracy_percent(self) -> str:
        return percent(self.detected_count, self.case_count)

    def to_dict(self) -> dict[str, Any]:
        detected_f = [c.rouge.f_lcs for c in self.per_case if c.rouge]
        return {
            "case_count": self.case_count,
            "detected_count": self.detected_count,
            "detection_accuracy": self.detection_accuracy,
            "detection_accuracy_percent": self.accuracy_percent,
            "retrieval_hits": self.retrieval_hits.to_dict() if self.retrieval_hits else None,
            "mean_rouge_f_detected": sum(detected_f) / len(detected_f) if detected_f else None,
            "mean_rouge_f_zero_filled": sum(c.rouge_f_zero_filled for c in self.per_case) / self.case_count,
            "per_case": [c.to_dict() for c in self.per_case],
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def to_markdown(self) -> str:
        lines = [
            "# Evaluation report",
            "",
            f"Detection accuracy: **{self.accuracy_percent}** ({self.detected_count}/{self.case_count})",
            "",
        ]
        if self.retrieval_hits:
            h = self.retrieval_hits
            lines += ["| T1 | T5 | T10 |", "|---:|---:|---:|", f"| {h.t1} | {h.t5} | {h.t10} |", ""]
        lines += [
            "| Case | Gold CWE | Detected | Finding rank | Retrieval rank | ROUGE-L F (%) | Other CWEs found |",
            "|---|---|:---:|---:|---:|---:|---|",
        ]
        for c in self.per_case:
            lines.append(
                f"| {c.case_id} | {c.gold_cwe_id} | {'yes' if c.detected else 'no'} "
                f"| {c.matched_cwe_rank or '-'} | {c.gold_retrieval_rank or '-'} "
                f"| {f'{100 * c.rouge.f_lcs:.2f}' if c.rouge else '-'} "
                f"| {', '.join(c.other_found) or '-'} |"
            )
        meta = self.metadata
        if meta:
            lines += ["", "Run metadata:", ""]
            lines += [f"- {k}: {meta[k]}" for k in sorted(meta)]
        return "\n".join(lines) + "\n"


def build_report(
    cases: Sequence[BenchmarkCase],
    findings: Iterable[DetectionFinding],
    retrievals: Mapping[str, RetrievalResult] | None = None,
    metadata: Mapping[str, Any] | None = None,
) -> EvaluationReport:
    """Score every case against the findings whose design_id equals its case_id."""
    if not cases:
        raise EmptyDatasetError("no benchmark cases to evaluate")
    by_design: dict[str, list[DetectionFinding]] = {}
    for f in findings:
        by_design.setdefault(f.design_id, []).append(f)
    retrievals = retrievals or {}
    per_case = [score_case(c, by_design.get(c.case_id, []), retrievals.get(c.case_id)) for c in cases]
    hits = None
    if retrievals:
        hits = retrieval_hits((c.gold_cwe_id, retrievals[c.case_id]) for c in cases if c.case_id in retrievals)
    return EvaluationReport(per_case, hits, dict(metadata or {}))


def write_report(report: EvaluationReport, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path, md_path = out / "report.json", out / "report.md"
    json_path.write_text(report.to_json(), encoding="utf-8")
    md_path.write_text(report.to_markdown(), encoding="utf-8")
    return json_path, md_path


@dataclass(frozen=True)
class AccuracyRow:
    label: str
    before: int
    after: int
    total: int


def comparison_table(rows: Sequence[AccuracyRow], groups: Mapping[str, Sequence[str]] | None = None) -> str:
    """Before/after accuracy table with an Increase column and optional group averages."""
    lines = [
        "| Model | Accuracy (Before) | Accuracy (After) | Increase |",
        "|---|---:|---:|---:|",
    ]
    by_label = {r.label: r for r in rows}

    def fmt(label: str, before: Fraction, after: Fraction) -> str:
        return f"| {label} | {percent(before)} | {percent(after)} | {percent(after - before)} |"

    emitted: set[str] = set()
    for group, labels in (groups or {}).items():
        members = [by_label[l] for l in labels]
        for r in members:
            lines.append(fmt(r.label, Fraction(r.before, r.total), Fraction(r.after, r.total)))
            emitted.add(r.label)
        before = sum(Fraction(r.before, r.total) for r in members) / len(members)
        after = sum(Fraction(r.after, r.total) for r in members) / len(members)
        lines.append(fmt(f"**Avg. for {group}**", before, after))
    for r in rows:
        if r.label not in emitted:
            lines.append(fmt(r.label, Fraction(r.before, r.total), Fraction(r.after, r.total)))
    return "\n".join(lines) + "\n"


def compare_reports(before: EvaluationReport, after: EvaluationReport, label: str = "run") -> str:
    """Markdown before/after comparison: accuracy row plus per-case ROUGE-L ``before/after``."""
    if before.case_count != after.case_count:
        raise ValidationError("before and after reports cover different case counts")
    out = [
        "# Before / after comparison",
        "",
        comparison_table([AccuracyRow(label, before.detected_count, after.detected_count, after.case_count)]),
        "| Case | Detected (before/after) | ROUGE-L % (before/after) |",
        "|---|:---:|:---:|",
    ]
    prior = {c.case_id: c for c in before.per_case}
    for c in after.per_case:
        b = prior.get(c.case_id)
        b_det = "yes" if b and b.detected else "no"
        b_f = round(100 * b.rouge_f_zero_filled) if b else 0
        out.append(f"| {c.case_id} | {b_det}/{'yes' if c.detected else 'no'} "
                   f"| {b_f}/{round(100 * c.rouge_f_zero_filled)} |")
    return "\n".join(out) + "\n"


def load_findings(path: str | Path) -> list[DetectionFinding]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise SchemaError(f"{path}: findings file must be a JSON array")
    return [DetectionFinding.from_dict(d) for d in data]


def dump_findings(findings: Iterable[DetectionFinding]) -> str:
    return json.dumps([f.to_dict() for f in findings], indent=2, sort_keys=True, ensure_ascii=False) + "\n"
