"""Summarizer and Detection agents: prompt rendering and response contracts.

Detection responses follow a line-oriented contract, one block per CWE::

    VERDICT: FOUND | NOT_FOUND
    CWE: CWE-<n>
    ```verilog
    <vulnerable lines, FOUND only>
    ```
    <free-text rationale>
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

from .errors import (
    AgentError,
    ContextOverflowError,
    MalformedAgentOutputError,
    PreconditionError,
    ReplayMissError,
    ValidationError,
)
from .hdl import TokenKind, scan
from .llm import ChatRequest, LlmClient, ModelProfile, estimate_tokens
from .model import DetectionFinding, RetrievalResult, RtlDesign, Verdict

if TYPE_CHECKING:
    from .kb import CweKnowledgeBase, EnrichedCweRecord, RawCweEntry

log = logging.getLogger(__name__)

TEMPLATE_NAMES = ("rtl_summary", "rtl_summary_merge", "cwe_summary", "cwe_snippets", "detect")
# attempts per prompt when the reply breaks the output contract
MALFORMED_ATTEMPTS = 2
RETRY_NOTE = (
    "\n\nYour previous answer did not follow the required output format. "
    "Answer again and follow the format exactly."
)

_PLACEHOLDER_RE = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")
_SECTION_RE = re.compile(r"^###[ \t]*(system|user)[ \t]*$", re.M)


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system_text: str
    user_template: str

    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER_RE.findall(self.system_text + self.user_template))

    def render(self, **values: str) -> tuple[str, str]:
        """Substitute ``{{name}}`` placeholders in one pass; values are never re-expanded."""
        missing = self.placeholders() - set(values)
        if missing:
            raise ValidationError(f"template {self.name}: unbound placeholder(s) {sorted(missing)}")

        def sub(m: re.Match) -> str:
            return str(values[m.group(1)])

        system = _PLACEHOLDER_RE.sub(sub, self.system_text)
        user = _PLACEHOLDER_RE.sub(sub, self.user_template)
        if not system.strip() or not user.strip():
            raise ValidationError(f"template {self.name} rendered to empty text")
        return system, user

    @classmethod
    def parse(cls, name: str, text: str) -> PromptTemplate:
        parts = _SECTION_RE.split(text)
        sections = {parts[i]: parts[i + 1].strip("\n") for i in range(1, len(parts) - 1, 2)}
        if set(sections) != {"system", "user"}:
            raise ValidationError(f"template {name}: needs '### system' and '### user' sections")
        return cls(name, sections["system"].rstrip(), sections["user"].rstrip() + "\n")


@dataclass(frozen=True)
class PromptSet:
    templates: Mapping[str, PromptTemplate]

    def __getitem__(self, name: str) -> PromptTemplate:
        return self.templates[name]

    @classmethod
    def load(cls, directory: str | Path | None = None) -> PromptSet:
        """Packaged templates, with any ``<name>.txt`` in ``directory`` taking precedence."""
        pkg = resources.files("cwerag.prompts")
        out = {}
        for name in TEMPLATE_NAMES:
            override = Path(directory) / f"{name}.txt" if directory else None
            if override is not None and override.is_file():
                text = override.read_text(encoding="utf-8")
            else:
                text = pkg.joinpath(f"{name}.txt").read_text(encoding="utf-8")
            out[name] = PromptTemplate.parse(name, text)
        return cls(out)


_DEFAULT_PROMPTS: PromptSet | None = None


def default_prompts() -> PromptSet:
    global _DEFAULT_PROMPTS
    if _DEFAULT_PROMPTS is None:
        _DEFAULT_PROMPTS = PromptSet.load()
    return _DEFAULT_PROMPTS


# ---------------------------------------------------------------------------
# Response parsing
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"^[ \t]*```[^\n]*\n(.*?)^[ \t]*```[ \t]*$", re.M | re.S)
_VERDICT_RE = re.compile(r"^[ \t>*_#-]*VERDICT[ \t*_]*:[ \t*_]*(NOT[_ ]FOUND|FOUND)\b[^\n]*$", re.I | re.M)
_CWE_LINE_RE = re.compile(r"^[ \t>*_#-]*CWE(?:[ \t_-]*ID)?[ \t*_]*:[ \t*_]*CWE[-_ ]?(\d+)\b[^\n]*$", re.I | re.M)
_SUMMARY_RE = re.compile(r"^[ \t*_#]*SUMMARY[ \t*_]*:[ \t*_]*(.*?)(?=^[ \t*_#]*KEYWORDS[ \t*_]*:)", re.I | re.M | re.S)
_KEYWORDS_RE = re.compile(r"^[ \t*_#]*KEYWORDS[ \t*_]*:(.*?)(?:\n[ \t]*\n|\Z)", re.I | re.M | re.S)


@dataclass(frozen=True)
class ParsedDetection:
    verdict: Verdict
    cwe_id: str
    snippet: str
    rationale: str
    raw: str


def _clean_snippet(body: str) -> str:
    lines = body.splitlines()
    while lines and not lines[0].strip():
        lines.pop(0)
    return "\n".join(lines).rstrip()


def _fence_spans(text: str) -> list[tuple[int, int, str]]:
    return [(m.start(), m.end(), m.group(1)) for m in _FENCE_RE.finditer(text)]


def _parse_block(segment: str, preamble: str = "") -> ParsedDetection:
    vm = _VERDICT_RE.search(segment)
    if vm is None:
        raise MalformedAgentOutputError("no VERDICT line", raw=segment)
    verdict = Verdict.NOT_FOUND if vm.group(1).upper().startswith("NOT") else Verdict.FOUND
    fences = _fence_spans(segment)
    cm = next((m for m in _CWE_LINE_RE.finditer(segment)
               if not any(s <= m.start() < e for s, e, _ in fences)), None)
    if cm is None:
        raise MalformedAgentOutputError("no 'CWE: CWE-<n>' line", raw=segment)
    cwe_id = f"CWE-{int(cm.group(1))}"
    snippet = ""
    if verdict is Verdict.FOUND:
        if not fences:
            raise MalformedAgentOutputError("FOUND verdict without a fenced snippet", raw=segment)
        snippet = _clean_snippet(fences[0][2])
        if not snippet.strip():
            raise MalformedAgentOutputError("FOUND verdict with an empty snippet", raw=segment)
    # rationale is whatever prose remains once the structured parts are cut out
    cuts = sorted([(vm.start(), vm.end()), (cm.start(), cm.end())] + [(s, e) for s, e, _ in fences])
    pieces, pos = [], 0
    for s, e in cuts:
        if s >= pos:
            pieces.append(segment[pos:s])
            pos = e
    pieces.append(segment[pos:])
    rationale = "\n".join(p.strip() for p in [preamble, *pieces] if p.strip())
    return ParsedDetection(verdict, cwe_id, snippet, rationale, segment)


def _as_text(text: str | bytes) -> str:
    if isinstance(text, bytes):
        return text.decode("utf-8", errors="replace")
    return text


def parse_detection_blocks(text: str | bytes) -> list[ParsedDetection]:
    """Split a (batch) response into verdict blocks; any malformed block fails the lot."""
    text = _as_text(text)
    fences = _fence_spans(text)
    starts = [m.start() for m in _VERDICT_RE.finditer(text)
              if not any(s <= m.start() < e for s, e, _ in fences)]
    if not starts:
        raise MalformedAgentOutputError("no VERDICT line", raw=text)
    bounds = starts + [len(text)]
    return [
        _parse_block(text[bounds[i]:bounds[i + 1]], text[:starts[0]] if i == 0 else "")
        for i in range(len(starts))
    ]


def parse_detection_response(text: str | bytes) -> ParsedDetection:
    """Parse a single-CWE response (the first block when several are present)."""
    return parse_detection_blocks(text)[0]


def parse_summary_keywords(text: str) -> tuple[str, list[str]]:
    sm = _SUMMARY_RE.search(text)
    km = _KEYWORDS_RE.search(text)
    if sm is None or km is None:
        raise MalformedAgentOutputError("expected SUMMARY: and KEYWORDS: sections", raw=text)
    summary = " ".join(sm.group(1).split())
    keywords: list[str] = []
    for piece in re.split(r"[,;\n]", km.group(1)):
        kw = " ".join(piece.strip().strip("-*•`'\"[]. ").lower().split())
        if kw and kw not in keywords:
            keywords.append(kw)
    if not summary or not keywords:
        raise MalformedAgentOutputError("empty SUMMARY or KEYWORDS section", raw=text)
    return summary, keywords


def _fenced_after(text: str, label: str) -> str | None:
    m = re.search(rf"^[ \t*_#]*{label}[ \t*_]*:?[^\n]*\n", text, re.I | re.M)
    if m is None:
        return None
    fm = _FENCE_RE.search(text, m.end())
    return _clean_snippet(fm.group(1)) if fm else None


def parse_snippet_pair(text: str) -> tuple[str, str]:
    vulnerable = _fenced_after(text, "VULNERABLE")
    secure = _fenced_after(text, "SECURE")
    if not vulnerable or not secure:
        raise MalformedAgentOutputError("expected fenced VULNERABLE: and SECURE: snippets", raw=text)
    return vulnerable, secure


# ---------------------------------------------------------------------------
# Summarizer agent
# ---------------------------------------------------------------------------


def render_cwe_entry(entry: RawCweEntry) -> str:
    lines = [
        f"CWE ID: {entry.cwe_id}",
        f"Title: {entry.title}",
        f"Description: {entry.description}",
        f"Extended description: {entry.extended_description or '(none)'}",
        "Mitigations:",
        *([f"- {m}" for m in entry.mitigations] or ["- (none)"]),
        "Modes of introduction:",
        *([f"- {m}" for m in entry.modes_of_introduction] or ["- (none)"]),
    ]
    return "\n".join(lines)


def module_units(source: str) -> list[str]:
    """Split source after each ``endmodule`` line; concatenation equals ``source``."""
    cuts = []
    pos = 0
    for tok in scan(source)[0]:
        pos += len(tok.text)
        if tok.kind is TokenKind.KEYWORD and tok.text == "endmodule":
            nl = source.find("\n", pos)
            cuts.append(len(source) if nl < 0 else nl + 1)
    units, start = [], 0
    for c in cuts:
        if c > start:
            units.append(source[start:c])
            start = c
    if start < len(source):
        units.append(source[start:])
    return units


def _split_to_budget(text: str, budget: int) -> list[str]:
    if estimate_tokens(text) <= budget:
        return [text]
    lines = text.splitlines(keepends=True)
    if len(lines) > 1:
        return pack_chunks(lines, budget)
    # one enormous line: cut by characters
    out, cur = [], ""
    for ch in text:
        if cur and estimate_tokens(cur + ch) > budget:
            out.append(cur)
            cur = ""
        cur += ch
    if cur:
        out.append(cur)
    return out


def pack_chunks(units: Iterable[str], budget: int) -> list[str]:
    """Greedily pack text units into chunks of at most ``budget`` estimated tokens."""
    chunks: list[str] = []
    cur = ""
    for unit in units:
        for piece in _split_to_budget(unit, budget):
            if cur and estimate_tokens(cur + piece) > budget:
                chunks.append(cur)
                cur = ""
            cur += piece
    if cur:
        chunks.append(cur)
    return chunks


class SummarizerAgent:
    """Writes RTL summaries and enriches raw CWE entries."""

    def __init__(self, llm: LlmClient, profile: ModelProfile, prompts: PromptSet | None = None,
                 max_output_tokens: int = 2048) -> None:
        self.llm = llm
        self.profile = profile
        self.prompts = prompts or default_prompts()
        self.max_output_tokens = max_output_tokens

    @property
    def model_name(self) -> str:
        return self.profile.model_name

    def request(self, template: str, **values: str) -> ChatRequest:
        system, user = self.prompts[template].render(**values)
        return ChatRequest(self.profile.model_name, system, user, 0.0, self.max_output_tokens)

    def ask(self, request: ChatRequest, parse):
        """Run ``request`` and ``parse`` its text, re-asking once on a contract violation."""
        last: MalformedAgentOutputError | None = None
        for attempt in range(MALFORMED_ATTEMPTS):
            req = request if attempt == 0 else ChatRequest(
                request.model_name, request.system_text, request.user_text + RETRY_NOTE,
                request.temperature, request.max_output_tokens)
            text = self.llm.complete(req, self.profile).text
            try:
                return parse(text)
            except MalformedAgentOutputError as exc:
                log.warning("%s: malformed agent output (attempt %d): %s", request.model_name, attempt + 1, exc)
                last = exc
        raise MalformedAgentOutputError(
            f"agent output violated the contract {MALFORMED_ATTEMPTS} times: {last}", raw=last.raw if last else "")

    def summarize_keywords(self, entry: RawCweEntry) -> tuple[str, list[str]]:
        return self.ask(self.request("cwe_summary", cwe_entry=render_cwe_entry(entry)), parse_summary_keywords)

    def snippet_pair(self, entry: RawCweEntry) -> tuple[str, str]:
        return self.ask(self.request("cwe_snippets", cwe_entry=render_cwe_entry(entry)), parse_snippet_pair)

    def summarize_rtl(self, design: RtlDesign) -> str:
        if not design.source_text.strip():
            raise PreconditionError(f"design {design.design_id!r} has no source to summarize")
        request = self.request("rtl_summary", design_id=design.design_id, part_note="", rtl=design.source_text)
        if request.prompt_tokens() <= self.profile.context_window_tokens:
            return self.ask(request, _nonempty_summary)

        overhead = self.request(
            "rtl_summary", design_id=design.design_id, part_note=" (part 9999 of 9999)", rtl="x").prompt_tokens()
        # -1 absorbs rounding: ceil(a/3) + ceil(b/3) can exceed ceil((a+b)/3)
        budget = self.profile.context_window_tokens - overhead - 1
        if budget < 1:
            raise ContextOverflowError("context window too small for the summary prompt",
                                       estimated=overhead, window=self.profile.context_window_tokens)
        chunks = [c for c in pack_chunks(module_units(design.source_text), budget) if c.strip()]
        log.info("%s: summarizing in %d chunks", design.design_id, len(chunks))
        partials = [
            self.ask(self.request("rtl_summary", design_id=design.design_id,
                                  part_note=f" (part {i} of {len(chunks)})", rtl=chunk), _nonempty_summary)
            for i, chunk in enumerate(chunks, start=1)
        ]
        return self._merge(design.design_id, partials)

    def _merge(self, design_id: str, partials: list[str]) -> str:
        def render(group: Sequence[str]) -> ChatRequest:
            body = "\n\n".join(f"Part {i}:\n{s}" for i, s in enumerate(group, start=1))
            return self.request("rtl_summary_merge", design_id=design_id, part_count=str(len(group)),
                                partial_summaries=body)

        while True:
            groups: list[list[str]] = []
            for s in partials:
                if groups and render(groups[-1] + [s]).prompt_tokens() <= self.profile.context_window_tokens:
                    groups[-1].append(s)
                else:
                    groups.append([s])
            if len(groups) == len(partials) and len(partials) > 1:
                raise ContextOverflowError("partial summaries are too long to merge",
                                           window=self.profile.context_window_tokens)
            partials = [self.ask(render(g), _nonempty_summary) for g in groups]
            if len(partials) == 1:
                return partials[0]


def _nonempty_summary(text: str) -> str:
    text = text.strip()
    if not text:
        raise MalformedAgentOutputError("empty summary", raw=text)
    return text


def summarize_rtl(design: RtlDesign, summarizer: SummarizerAgent) -> str:
    return summarizer.summarize_rtl(design)


# ---------------------------------------------------------------------------
# Detection agent
# ---------------------------------------------------------------------------


def render_cwe_details(records: Sequence[EnrichedCweRecord]) -> str:
    blocks = []
    for rec in records:
        blocks.append("\n".join([
            f"[{rec.cwe_id}] {rec.title}",
            f"Summary: {rec.summary}",
            f"Keywords: {', '.join(rec.keywords)}",
            "Vulnerable example:",
            "```verilog",
            rec.vulnerable_snippet,
            "```",
            "Secure example:",
            "```verilog",
            rec.secure_snippet,
            "```",
        ]))
    return "\n\n".join(blocks)


def render_detection_prompt(
    design: RtlDesign,
    summary: str | None,
    cwes: Sequence[EnrichedCweRecord],
    mode: str,
    *,
    model_name: str,
    profile: ModelProfile | None = None,
    prompts: PromptSet | None = None,
    max_output_tokens: int = 2048,
) -> list[ChatRequest]:
    """One request per CWE (iterative) or one request for all of them (batch)."""
    if not cwes:
        raise PreconditionError("detection needs at least one candidate CWE")
    if mode not in ("iterative", "batch"):
        raise ValidationError(f"render mode must be iterative or batch, not {mode!r}")
    template = (prompts or default_prompts())["detect"]
    groups = [[c] for c in cwes] if mode == "iterative" else [list(cwes)]
    requests = []
    for group in groups:
        system, user = template.render(
            rtl=design.source_text,
            summary=summary or "(no summary available)",
            cwe_count=str(len(group)),
            cwe_details=render_cwe_details(group),
        )
        requests.append(ChatRequest(model_name, system, user, 0.0, max_output_tokens))
    if mode == "batch" and profile is not None:
        profile.check_fits(requests[0])
    return requests


def snippet_occurs_in(snippet: str, source: str) -> bool:
    """Whether ``snippet`` appears in ``source`` once all whitespace is ignored."""
    needle = "".join(snippet.split())
    return bool(needle) and needle in "".join(source.split())


@dataclass
class DetectionRun:
    findings: list[DetectionFinding]
    requested_mode: str
    mode_used: str
    fallback_reason: str | None = None
    llm_requests: int = 0
    notes: list[str] = field(default_factory=list)


def _finding(design: RtlDesign, rank: int, cwe_id: str, parsed: ParsedDetection | None,
             *, raw: str = "", error: str = "") -> DetectionFinding:
    if parsed is None:
        return DetectionFinding(design.design_id, cwe_id, Verdict.INDETERMINATE,
                                rationale=error, raw_response=raw, rank=rank)
    return DetectionFinding(
        design_id=design.design_id,
        cwe_id=cwe_id,
        verdict=parsed.verdict,
        snippet=parsed.snippet,
        rationale=parsed.rationale,
        raw_response=raw or parsed.raw,
        rank=rank,
        snippet_in_design=parsed.verdict is Verdict.FOUND and snippet_occurs_in(parsed.snippet, design.source_text),
    )


class DetectionAgent:
    def __init__(self, llm: LlmClient, profile: ModelProfile, prompts: PromptSet | None = None,
                 max_output_tokens: int = 2048) -> None:
        self.llm = llm
        self.profile = profile
        self.prompts = prompts or default_prompts()
        self.max_output_tokens = max_output_tokens

    def _render(self, design, summary, records, mode, check=False) -> list[ChatRequest]:
        return render_detection_prompt(
            design, summary, records, mode, model_name=self.profile.model_name,
            profile=self.profile if check else None, prompts=self.prompts,
            max_output_tokens=self.max_output_tokens)

    def run(self, design: RtlDesign, summary: str | None, retrieved: RetrievalResult,
            kb: CweKnowledgeBase, mode: str = "auto") -> DetectionRun:
        if not len(retrieved):
            raise PreconditionError(f"no CWEs retrieved for {design.design_id!r}; is the knowledge base empty?")
        if mode not in ("iterative", "batch", "auto"):
            raise ValidationError(f"unknown detection mode {mode!r}")
        records = [kb.get(r.cwe_id) for r in retrieved]
        run = DetectionRun([], requested_mode=mode, mode_used="iterative")

        want_batch = mode == "batch" or (mode == "auto" and self.profile.supports_batch_cwe)
        if want_batch:
            try:
                request = self._render(design, summary, records, "batch", check=True)[0]
            except ContextOverflowError as exc:
                run.fallback_reason = f"batch prompt does not fit: {exc}"
            else:
                findings = self._batch(design, records, request, run)
                if findings is not None:
                    run.findings, run.mode_used = findings, "batch"
                    return run
        if run.fallback_reason:
            log.info("%s: falling back to iterative detection (%s)", design.design_id, run.fallback_reason)
        run.findings = self._iterative(design, summary, records, run)
        return run

    def _batch(self, design, records, request, run) -> list[DetectionFinding] | None:
        run.llm_requests += 1
        try:
            text = self.llm.complete(request, self.profile).text
            blocks = parse_detection_blocks(text)
        except ReplayMissError:
            raise
        except AgentError as exc:
            run.fallback_reason = f"batch response unusable: {exc}"
            return None
        by_id: dict[str, ParsedDetection] = {}
        for b in blocks:
            by_id.setdefault(b.cwe_id, b)
        missing = [r.cwe_id for r in records if r.cwe_id not in by_id]
        if missing:
            run.fallback_reason = f"batch response has no verdict for {', '.join(missing)}"
            return None
        return [_finding(design, rank, rec.cwe_id, by_id[rec.cwe_id]) for rank, rec in enumerate(records, start=1)]

    def _iterative(self, design, summary, records, run) -> list[DetectionFinding]:
        requests = self._render(design, summary, records, "iterative")
        findings = []
        for rank, (rec, request) in enumerate(zip(records, requests), start=1):
            findings.append(self._one(design, rank, rec.cwe_id, request, run))
        return findings

    def _one(self, design, rank, cwe_id, request, run) -> DetectionFinding:
        raw = ""
        problem = ""
        for attempt in range(MALFORMED_ATTEMPTS):
            req = request if attempt == 0 else ChatRequest(
                request.model_name, request.system_text, request.user_text + RETRY_NOTE,
                request.temperature, request.max_output_tokens)
            run.llm_requests += 1
            try:
                raw = self.llm.complete(req, self.profile).text
            except ReplayMissError:
                raise
            except (AgentError, ContextOverflowError) as exc:
                return _finding(design, rank, cwe_id, None, raw=raw, error=f"agent error: {exc}")
            try:
                parsed = parse_detection_response(raw)
            except MalformedAgentOutputError as exc:
                problem = str(exc)
                continue
            if parsed.cwe_id != cwe_id:
                problem = f"response names {parsed.cwe_id}, expected {cwe_id}"
                continue
            return _finding(design, rank, cwe_id, parsed, raw=raw)
        return _finding(design, rank, cwe_id, None, raw=raw,
                        error=f"malformed output after {MALFORMED_ATTEMPTS} attempts: {problem}")


def detect(design: RtlDesign, summary: str | None, retrieved: RetrievalResult, kb: CweKnowledgeBase,
           llm: LlmClient, profile: ModelProfile, mode: str = "auto",
           prompts: PromptSet | None = None) -> list[DetectionFinding]:
    return DetectionAgent(llm, profile, prompts).run(design, summary, retrieved, kb, mode).findings
