"""Command-line entry point: ``cwerag kb build|inspect``, ``scan``, ``bench``, ``eval``.

Exit codes
    0  success
    1  unexpected internal error
    2  parse or usage error (bad flags, malformed input files)
    3  configuration or credential fault (includes replay-cache misses and an empty KB)
    4  empty dataset or every design failed
    5  provider failure in passthrough mode
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from . import __version__
from .config import DETECTION_MODES, EMBED_PROVIDERS, PipelineConfig, load_config, with_overrides
from .dataset import load_dataset, read_text_exact
from .errors import (
    ConfigError,
    CweragError,
    DimensionMismatchError,
    EmbeddingError,
    EmptyDatasetError,
    KbIoError,
    MissingFileError,
    ParseError,
    PreconditionError,
    ProviderError,
    ReplayMissError,
    SchemaError,
    ValidationError,
    VersionError,
)
from .evaluation import build_report, compare_reports, dump_findings, load_findings, write_report
from .kb import embed_records, enrich_all, ingest_raw, load_kb, save_kb
from .model import RetrievalResult, RtlDesign
from .pipeline import DesignResult, Runtime, analyze_designs, build_runtime, sha256_text, timestamp
from .transport import CacheMode, Transport

log = logging.getLogger("cwerag")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_EMPTY = 4
EXIT_PROVIDER = 5

RUN_MANIFEST = "run_manifest.json"


def _dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def digest_inputs(paths: Sequence[Path]) -> str:
    """Content hash over files (directories are walked in sorted order)."""
    h = hashlib.sha256()
    for root in paths:
        files = sorted(p for p in root.rglob("*") if p.is_file()) if root.is_dir() else [root]
        for p in files:
            if p.name == RUN_MANIFEST:
                continue
            rel = p.relative_to(root).as_posix() if root.is_dir() else p.name
            h.update(rel.encode("utf-8") + b"\0")
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


@dataclass
class RunManifest:
    """Provenance for one command; ``run_id`` hashes inputs and config, never timings."""

    command: str
    config: dict[str, Any]
    input_digest: str
    provider_modes: dict[str, str]
    artifacts: list[str] = field(default_factory=list)
    stage_timings: dict[str, float] = field(default_factory=dict)
    detection: dict[str, Any] = field(default_factory=dict)
    stats: dict[str, Any] = field(default_factory=dict)
    started_at: str = ""

    @property
    def run_id(self) -> str:
        # cache location and record/replay mode do not change what was computed
        basis = {
            "command": self.command,
            "config": {k: v for k, v in self.config.items() if k != "cache_dir"},
            "inputs": self.input_digest,
            "embedder": self.provider_modes.get("embedder"),
        }
        return sha256_text(_dump_json(basis))[:16]

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "command": self.command,
            "tool_version": __version__,
            "started_at": self.started_at,
            "config": self.config,
            "input_digest": self.input_digest,
            "provider_modes": self.provider_modes,
            "artifacts": sorted(set(self.artifacts) | {RUN_MANIFEST}),
            "stage_timings": self.stage_timings,
            "detection": self.detection,
            "stats": self.stats,
        }

    def write(self, out_dir: Path) -> Path:
        return _write(out_dir / RUN_MANIFEST, _dump_json(self.to_dict()))


@dataclass
class Context:
    """Resolved global options plus injectable transports for tests."""

    args: argparse.Namespace
    config: PipelineConfig
    env: Mapping[str, str]
    llm_transport: Transport | None = None
    embed_transport: Transport | None = None

    @property
    def mode(self) -> CacheMode:
        return CacheMode(self.args.llm)

    @property
    def frozen(self) -> bool:
        return bool(self.args.frozen_time)

    def runtime(self) -> Runtime:
        return build_runtime(self.config, mode=self.mode, env=self.env, llm_transport=self.llm_transport,
                             embed_transport=self.embed_transport, frozen_time=self.frozen)

    def clock(self) -> Callable[[], float]:
        return (lambda: 0.0) if self.frozen else time.perf_counter

    def manifest(self, command: str, inputs: Sequence[Path], rt: Runtime | None = None) -> RunManifest:
        modes = {"llm": self.mode.value, "embedder": rt.embedder.name if rt else self.config.embed_provider}
        return RunManifest(command, self.config.to_dict(), digest_inputs(inputs), modes,
                           started_at=timestamp(self.frozen))


# -- commands -----------------------------------------------------------------


def cmd_kb_build(ctx: Context) -> int:
    a = ctx.args
    clock = ctx.clock()
    rt = ctx.runtime()
    out = Path(a.out)
    manifest = ctx.manifest("kb build", [Path(a.cwe_input)], rt)
    t0 = clock()
    entries = ingest_raw(a.cwe_input)
    t1 = clock()
    records = enrich_all(entries, rt.summarizer, jobs=ctx.config.max_parallel if a.jobs is None else a.jobs)
    t2 = clock()
    kb = embed_records(records, rt.embedder, {"enrichment_model": ctx.config.summarizer_model})
    t3 = clock()
    save_kb(kb, out)
    manifest.stage_timings = {"ingest_s": t1 - t0, "enrich_s": t2 - t1, "embed_s": t3 - t2}
    manifest.artifacts = ["manifest.json", "records.jsonl"]
    manifest.stats = {**rt.stats(), "record_count": len(kb), "vector_count": kb.vector_count()}
    manifest.write(out)
    print(f"wrote {len(kb)} records ({kb.vector_count()} vectors) to {out}")
    return EXIT_OK


def cmd_kb_inspect(ctx: Context) -> int:
    a = ctx.args
    kb = load_kb(a.kb)
    ids = a.cwe_ids or [r.cwe_id for r in kb.records]
    try:
        dump = [kb.get(i).to_dict(with_embeddings=a.embeddings) for i in ids]
    except KeyError as exc:
        raise PreconditionError(str(exc.args[0])) from None
    header = {"dimension": kb.embedding_dimension, "record_count": len(kb), "provenance": dict(kb.provenance)}
    sys.stdout.write(_dump_json({"knowledge_base": header, "records": dump}))
    return EXIT_OK


def _scan_designs(ctx: Context, designs: list[RtlDesign], kb_path: Path, command: str,
                  inputs: list[Path]) -> tuple[list[DesignResult], RunManifest, Runtime]:
    clock = ctx.clock()
    t0 = clock()
    kb = load_kb(kb_path)
    if len(kb) == 0:
        raise PreconditionError(f"knowledge base at {kb_path} is empty")
    rt = ctx.runtime()
    manifest = ctx.manifest(command, inputs + [kb_path], rt)
    t1 = clock()
    results = analyze_designs(rt, kb, designs, jobs=ctx.args.jobs or 1, top_k=ctx.args.top_k,
                              mode=ctx.args.mode)
    manifest.stage_timings = {"load_kb_s": t1 - t0, "analyze_s": clock() - t1}
    manifest.detection = {
        r.design.design_id: {
            "requested_mode": r.detection.requested_mode if r.detection else (ctx.args.mode or ctx.config.detection_mode),
            "mode_used": r.detection.mode_used if r.detection else None,
            "fallback_reason": r.detection.fallback_reason if r.detection else None,
            "notes": list(r.detection.notes) if r.detection else [],
            "error": r.error,
        }
        for r in results
    }
    manifest.stats = {**rt.stats(), "designs": len(results), "failed": sum(1 for r in results if not r.ok)}
    return results, manifest, rt


def _write_scan_artifacts(out: Path, results: list[DesignResult]) -> list[str]:
    findings = [f for r in results if r.detection for f in r.detection.findings]
    _write(out / "findings.json", dump_findings(findings))
    _write(out / "retrieval_trace.json", _dump_json([r.trace() for r in results]))
    return ["findings.json", "retrieval_trace.json"]


def _run_status(ctx: Context, results: list[DesignResult]) -> int:
    if any(r.ok for r in results):
        return EXIT_OK
    for r in results:
        log.error("%s failed: %s", r.design.design_id, r.error)
    if ctx.mode is CacheMode.PASSTHROUGH and any(r.error_kind and "Provider" in r.error_kind for r in results):
        return EXIT_PROVIDER
    return EXIT_EMPTY


def _design_from_file(path: Path) -> RtlDesign:
    if not path.is_file():
        raise MissingFileError(f"design file not found: {path}")
    try:
        source = read_text_exact(path)
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not UTF-8 ({exc})") from exc
    return RtlDesign(path.stem, source)


def cmd_scan(ctx: Context) -> int:
    a = ctx.args
    paths = [Path(p) for p in a.designs]
    designs = [_design_from_file(p) for p in paths]
    ids = [d.design_id for d in designs]
    if len(set(ids)) != len(ids):
        raise ValidationError("design files must have distinct base names")
    out = Path(a.out)
    results, manifest, _ = _scan_designs(ctx, designs, Path(a.kb), "scan", paths)
    manifest.artifacts = _write_scan_artifacts(out, results)
    manifest.write(out)
    for r in results:
        found = [f.cwe_id for f in r.detection.findings if f.verdict.value == "found"] if r.detection else []
        status = r.error or (", ".join(found) if found else "no weakness found")
        print(f"{r.design.design_id}: {status}")
    return _run_status(ctx, results)


def _baseline_report(cases, baseline_path: Path):
    return build_report(cases, load_findings(baseline_path))


def cmd_bench(ctx: Context) -> int:
    a = ctx.args
    cases = load_dataset(a.dataset)
    if not cases:
        raise EmptyDatasetError(f"no cases under {a.dataset}")
    designs = [c.buggy_design for c in cases]
    inputs = [Path(a.dataset)] + ([Path(a.compare)] if a.compare else [])
    out = Path(a.out)
    results, manifest, _ = _scan_designs(ctx, designs, Path(a.kb), "bench", inputs)
    artifacts = _write_scan_artifacts(out, results)
    findings = [f for r in results if r.detection for f in r.detection.findings]
    retrievals = {r.design.design_id: r.retrieval for r in results if r.retrieval is not None}
    meta = {"run_id": manifest.run_id, "generated_at": timestamp(ctx.frozen),
            "failed_cases": sorted(r.design.design_id for r in results if not r.ok)}
    report = build_report(cases, findings, retrievals, meta)
    write_report(report, out)
    artifacts += ["report.json", "report.md"]
    if a.compare:
        _write(out / "comparison.md", compare_reports(_baseline_report(cases, Path(a.compare)), report,
                                                      label=ctx.config.detector_model))
        artifacts.append("comparison.md")
    manifest.artifacts = artifacts
    manifest.write(out)
    print(f"detection accuracy {report.accuracy_percent} ({report.detected_count}/{report.case_count})")
    if report.retrieval_hits:
        h = report.retrieval_hits
        print(f"retrieval hits T1={h.t1} T5={h.t5} T10={h.t10}")
    return _run_status(ctx, results)


def cmd_eval(ctx: Context) -> int:
    a = ctx.args
    cases = load_dataset(a.dataset)
    if not cases:
        raise EmptyDatasetError(f"no cases under {a.dataset}")
    findings = load_findings(a.findings)
    retrievals: dict[str, RetrievalResult] = {}
    inputs = [Path(a.dataset), Path(a.findings)]
    if a.trace:
        inputs.append(Path(a.trace))
        try:
            trace = json.loads(Path(a.trace).read_text(encoding="utf-8"))
            for entry in trace:
                retrievals[entry["design_id"]] = RetrievalResult.from_list(entry["ranked"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise SchemaError(f"{a.trace}: malformed retrieval trace ({exc})") from exc
    if a.compare:
        inputs.append(Path(a.compare))
    manifest = ctx.manifest("eval", inputs)
    report = build_report(cases, findings, retrievals, {"run_id": manifest.run_id,
                                                        "generated_at": timestamp(ctx.frozen)})
    out = Path(a.out)
    write_report(report, out)
    manifest.artifacts = ["report.json", "report.md"]
    if a.compare:
        _write(out / "comparison.md", compare_reports(_baseline_report(cases, Path(a.compare)), report,
                                                      label=ctx.config.detector_model))
        manifest.artifacts.append("comparison.md")
    manifest.write(out)
    print(f"detection accuracy {report.accuracy_percent} ({report.detected_count}/{report.case_count})")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 as well; keep the message on stderr
        self.print_usage(sys.stderr)
        raise ParseError(message)


def _global_options() -> argparse.ArgumentParser:
    # SUPPRESS defaults let the flags appear before or after the subcommand
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    s = argparse.SUPPRESS
    g.add_argument("--config", metavar="PATH", default=s, help="JSON config file")
    g.add_argument("--llm", choices=[m.value for m in CacheMode], default=s, help="LLM cache mode")
    g.add_argument("--cache-dir", metavar="PATH", default=s)
    g.add_argument("--jobs", type=int, metavar="N", default=s, help="concurrent designs / CWE entries")
    g.add_argument("--top-k", type=int, metavar="K", default=s)
    g.add_argument("--mode", choices=DETECTION_MODES, default=s, help="detection mode")
    g.add_argument("--embedder", choices=EMBED_PROVIDERS, default=s, help="embedding provider")
    g.add_argument("--frozen-time", action="store_true", default=s, help="fixed timestamps and zero timings")
    g.add_argument("-v", "--verbose", action="store_true", default=s)
    return p


GLOBAL_DEFAULTS = {
    "config": None, "llm": "record", "cache_dir": None, "jobs": None, "top_k": None,
    "mode": None, "embedder": None, "frozen_time": False, "verbose": False,
}


def build_parser() -> argparse.ArgumentParser:
    common = _global_options()
    parser = _ArgumentParser(prog="cwerag", parents=[common],
                             description="Retrieval-augmented CWE detection for Verilog RTL.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    kb = sub.add_parser("kb", help="build or inspect the CWE knowledge base")
    kb_sub = kb.add_subparsers(dest="kb_command", required=True, parser_class=_ArgumentParser)
    build = kb_sub.add_parser("build", parents=[common], help="enrich and embed raw CWE entries")
    build.add_argument("--cwe-input", required=True, metavar="FILE")
    build.add_argument("--out", required=True, metavar="DIR")
    build.set_defaults(func=cmd_kb_build)
    inspect = kb_sub.add_parser("inspect", parents=[common], help="dump enriched records as JSON")
    inspect.add_argument("--kb", required=True, metavar="DIR")
    inspect.add_argument("cwe_ids", nargs="*", metavar="CWE-ID")
    inspect.add_argument("--embeddings", action="store_true", help="include embedding vectors")
    inspect.set_defaults(func=cmd_kb_inspect)

    scan = sub.add_parser("scan", parents=[common], help="scan Verilog files for retrieved CWEs")
    scan.add_argument("designs", nargs="+", metavar="DESIGN")
    scan.add_argument("--kb", required=True, metavar="DIR")
    scan.add_argument("--out", required=True, metavar="DIR")
    scan.set_defaults(func=cmd_scan)

    bench = sub.add_parser("bench", parents=[common], help="scan and score a benchmark dataset")
    bench.add_argument("--dataset", required=True, metavar="DIR")
    bench.add_argument("--kb", required=True, metavar="DIR")
    bench.add_argument("--out", required=True, metavar="DIR")
    bench.add_argument("--compare", metavar="FINDINGS", help="baseline findings for a before/after table")
    bench.set_defaults(func=cmd_bench)

    ev = sub.add_parser("eval", parents=[common], help="score existing findings against a dataset")
    ev.add_argument("--dataset", required=True, metavar="DIR")
    ev.add_argument("--findings", required=True, metavar="FILE")
    ev.add_argument("--trace", metavar="FILE", help="retrieval trace for T1/T5/T10")
    ev.add_argument("--compare", metavar="FINDINGS")
    ev.add_argument("--out", required=True, metavar="DIR")
    ev.set_defaults(func=cmd_eval)
    return parser


def _resolve(args: argparse.Namespace, env: Mapping[str, str]) -> PipelineConfig:
    for name, default in GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.jobs is not None and args.jobs < 1:
        raise ParseError("--jobs must be >= 1")
    if args.top_k is not None and args.top_k < 1:
        raise ParseError("--top-k must be >= 1")
    cfg = load_config(args.config, env)
    return with_overrides(cfg, cache_dir=args.cache_dir, top_k=args.top_k, detection_mode=args.mode,
                          embed_provider=args.embedder)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ReplayMissError, ConfigError, PreconditionError, ValidationError,
                        DimensionMismatchError, VersionError)):
        return EXIT_CONFIG
    if isinstance(exc, EmptyDatasetError):
        return EXIT_EMPTY
    if isinstance(exc, (ProviderError, EmbeddingError)):
        return EXIT_PROVIDER
    if isinstance(exc, (ParseError, SchemaError, MissingFileError, KbIoError)):
        return EXIT_USAGE
    return EXIT_INTERNAL


def main(argv: Sequence[str] | None = None, *, env: Mapping[str, str] | None = None,
         llm_transport: Transport | None = None, embed_transport: Transport | None = None) -> int:
    env = dict(os.environ) if env is None else dict(env)
    try:
        args = build_parser().parse_args(argv)
    except ParseError as exc:
        print(f"cwerag: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        config = _resolve(args, env)
    except CweragError as exc:
        print(f"cwerag: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    ctx = Context(args, config, env, llm_transport, embed_transport)
    try:
        return args.func(ctx)
    except CweragError as exc:
        print(f"cwerag: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


def main_entry() -> None:
    sys.exit(main())
