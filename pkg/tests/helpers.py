"""Scripted stand-ins for the chat and embedding services.

``ScriptedLlm`` is a transport: it inspects the prompt it receives, works out
which agent task it is (CWE enrichment, RTL summary, merge, detection) and
answers from a script. Detection answers are keyed by the first module name
in the RTL, so fixtures name their top module after the case.
"""

from __future__ import annotations

import functools
import json
import re
import shutil
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

from cwerag.embedding import HashingEmbedder
from cwerag.hdl import VERILOG_KEYWORDS

FIXTURES = Path(__file__).parent / "fixtures"

_MODULE_RE = re.compile(r"\bmodule\s+([A-Za-z_][A-Za-z0-9_$]*)")
_CANDIDATE_RE = re.compile(r"^\[(CWE-\d+)\] ", re.M)
_ENTRY_ID_RE = re.compile(r"^CWE ID: (CWE-\d+)$", re.M)
_ENTRY_TITLE_RE = re.compile(r"^Title: (.*)$", re.M)
_DESIGN_RE = re.compile(r"^Design: (.*)$", re.M)
_RTL_RE = re.compile(r"```verilog\n(.*?)\n```", re.S)


@dataclass
class Script:
    """What the fake model says.

    summaries:  design_id -> summary text (otherwise a generic sentence)
    detections: top module name -> {cwe_id: vulnerable snippet}
    keywords:   cwe_id -> keyword list for enrichment
    overrides:  top module name -> raw detection reply (for malformed-output tests)
    """

    summaries: dict[str, str] = field(default_factory=dict)
    detections: dict[str, dict[str, str]] = field(default_factory=dict)
    keywords: dict[str, list[str]] = field(default_factory=dict)
    overrides: dict[str, str | Callable[[str], str]] = field(default_factory=dict)


class ScriptedLlm:
    def __init__(self, script: Script | None = None, status: int = 200) -> None:
        self.script = script or Script()
        self.status = status
        self.calls = 0
        self.kinds: list[str] = []
        self.payloads: list[Mapping[str, Any]] = []
        self._lock = threading.Lock()

    def __call__(self, url: str, payload: Mapping[str, Any], headers: Mapping[str, str], timeout: float):
        with self._lock:
            self.calls += 1
            self.payloads.append(payload)
        if self.status != 200:
            return self.status, None
        user = payload["messages"][1]["content"]
        kind, text = self.answer(user)
        with self._lock:
            self.kinds.append(kind)
        return 200, {"text": text, "usage": {"input_tokens": len(user) // 4, "output_tokens": len(text) // 4}}

    def answer(self, user: str) -> tuple[str, str]:
        if user.startswith("Read the CWE entry below and produce"):
            return "cwe_summary", self._summary_keywords(user)
        if user.startswith("Read the CWE entry below and write"):
            return "cwe_snippets", self._snippets(user)
        if user.startswith("Summarize the RTL design"):
            design = _DESIGN_RE.search(user).group(1).strip()
            return "rtl_summary", self.script.summaries.get(design, f"The design {design} implements control logic.")
        if user.startswith("The RTL design"):
            return "rtl_summary_merge", "Merged summary: " + " ".join(re.findall(r"Part \d+:\n([^\n]*)", user))
        if user.startswith("Task: decide"):
            return "detect", self._detect(user)
        raise AssertionError(f"unrecognised prompt: {user[:80]!r}")

    def _summary_keywords(self, user: str) -> str:
        cwe = _ENTRY_ID_RE.search(user).group(1)
        title = _ENTRY_TITLE_RE.search(user).group(1)
        words = self.script.keywords.get(cwe) or re.findall(r"[a-z]+", title.lower())[:6]
        return f"SUMMARY: {title}. This weakness appears in RTL as {title.lower()}.\nKEYWORDS: {', '.join(words)}\n"

    def _snippets(self, user: str) -> str:
        n = _ENTRY_ID_RE.search(user).group(1).split("-")[1]
        return (
            "VULNERABLE:\n```verilog\n"
            f"module vuln_{n}(input clk, input [7:0] d, output reg [7:0] q);\n"
            "  always @(posedge clk) q <= d;\nendmodule\n```\n"
            "SECURE:\n```verilog\n"
            f"module fixed_{n}(input clk, input en, input [7:0] d, output reg [7:0] q);\n"
            "  always @(posedge clk) if (en) q <= d;\nendmodule\n```\n"
        )

    def _detect(self, user: str) -> str:
        rtl = _RTL_RE.search(user).group(1)
        m = _MODULE_RE.search(rtl)
        top = m.group(1) if m else ""
        if top in self.script.overrides:
            o = self.script.overrides[top]
            return o(user) if callable(o) else o
        found = self.script.detections.get(top, {})
        blocks = []
        for cwe in _CANDIDATE_RE.findall(user):
            if cwe in found:
                blocks.append(f"VERDICT: FOUND\nCWE: {cwe}\n```verilog\n{found[cwe]}\n```\n"
                              "The listed lines exhibit the weakness.")
            else:
                blocks.append(f"VERDICT: NOT_FOUND\nCWE: {cwe}\nNo evidence of this weakness.")
        return "\n\n".join(blocks) + "\n"


class FakeEmbedService:
    """Transport for the ``/embed`` endpoint backed by the hashing embedder."""

    def __init__(self, dimension: int = 64, reported_dimension: int | None = None) -> None:
        self.inner = HashingEmbedder(dimension)
        self.reported = dimension if reported_dimension is None else reported_dimension
        self.calls = 0

    def __call__(self, url, payload, headers, timeout):
        self.calls += 1
        return 200, {"vectors": self.inner.embed(payload["texts"]), "dimension": self.reported}


def refuse_network(url, payload, headers, timeout):
    raise AssertionError(f"unexpected network call to {url}")


def copy_fixture(name: str, dest: Path) -> Path:
    target = dest / name
    shutil.copytree(FIXTURES / name, target)
    return target


def load_json(path: Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# -- acceptance bookkeeping ------------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, float, str]] = {}


def criterion(number: int, title: str):
    """Record a pass/fail line for an acceptance criterion (printed in the summary)."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                fn(*args, **kwargs)
            except BaseException as exc:
                ACCEPTANCE_RESULTS[number] = (title, False, time.perf_counter() - t0, f"{type(exc).__name__}")
                raise
            ACCEPTANCE_RESULTS[number] = (title, True, time.perf_counter() - t0, "")

        return wrapper

    return deco


# -- random knowledge bases ---------------------------------------------------------


def make_kb(vectors: list[tuple[list[float], list[float], list[float]]], ids: list[int], dimension: int):
    """Knowledge base whose records carry the given raw field vectors (not normalized)."""
    from cwerag.embedding import EmbeddingVector
    from cwerag.kb import CweKnowledgeBase, EnrichedCweRecord
    from cwerag.retrieval import SEARCH_FIELDS

    records = []
    for number, fields_ in zip(ids, vectors):
        records.append(EnrichedCweRecord(
            cwe_id=f"CWE-{number}",
            title=f"weakness {number}",
            summary=f"summary {number}",
            keywords=("k",),
            vulnerable_snippet="assign a = b;",
            secure_snippet="assign a = 0;",
            field_embeddings={f: EmbeddingVector(tuple(v), f) for f, v in zip(SEARCH_FIELDS, fields_)},
        ))
    return CweKnowledgeBase(tuple(records), dimension)


# -- grep-over-identifiers oracle for signatures --------------------------------------

CORPUS = sorted((FIXTURES / "verilog_corpus").glob("*.v"))
LEXICON_PATH = Path(__file__).parents[1] / "src" / "cwerag" / "data" / "default_lexicon.txt"

STRIP_RE = re.compile(r'//[^\n]*|/\*.*?(?:\*/|\Z)|"(?:[^"\\\n]|\\.)*"?', re.S)
_BASED_RE = re.compile(r"(?:\d[\d_]*)?'[sS]?[bBoOdDhH][0-9a-fA-FxXzZ?_]+")
_WORD_RE = re.compile(r"\\\S+|(?<![\w$])\$?[A-Za-z_][\w$]*")


def grep_signature(source: str) -> list[str]:
    patterns = {}
    for line in LEXICON_PATH.read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            name, _, rest = line.partition(":")
            patterns[name.strip()] = [p.strip() for p in rest.split(",")] if rest else [name.strip()]
    code = _BASED_RE.sub(" ", STRIP_RE.sub(" ", source))
    words = {w.lower() for w in _WORD_RE.findall(code)} - VERILOG_KEYWORDS
    return sorted(k for k, pats in patterns.items() if any(p in w for w in words for p in pats))
