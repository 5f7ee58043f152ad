"""Benchmark dataset loader.

Layout, one directory per case::

    <root>/<case_id>/design.v         buggy HDL
    <root>/<case_id>/gold_snippet.v   gold vulnerable snippet
    <root>/<case_id>/fixed.v          optional corrected design
    <root>/<case_id>/meta.json        {"case_id", "gold_cwe_id", "description"}
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import MissingFileError, SchemaError
from .model import CWE_ID_RE, BenchmarkCase, RtlDesign

DESIGN_FILE = "design.v"
GOLD_FILE = "gold_snippet.v"
FIXED_FILE = "fixed.v"
META_FILE = "meta.json"


def read_text_exact(path: Path) -> str:
    # newline="" keeps CRLF intact so round-trips are byte-exact
    with open(path, encoding="utf-8", newline="") as fh:
        return fh.read()


def write_text_exact(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _load_case(case_dir: Path) -> BenchmarkCase:
    name = case_dir.name
    for required in (DESIGN_FILE, GOLD_FILE, META_FILE):
        if not (case_dir / required).is_file():
            raise MissingFileError(f"case {name!r}: missing {required}")
    try:
        meta = json.loads(read_text_exact(case_dir / META_FILE))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"case {name!r}: meta.json is not valid JSON: {exc}") from exc
    if not isinstance(meta, dict):
        raise SchemaError(f"case {name!r}: meta.json must be an object")
    for key in ("case_id", "gold_cwe_id"):
        if not isinstance(meta.get(key), str):
            raise SchemaError(f"case {name!r}: meta.json field {key!r} missing or not a string")
    if meta["case_id"] != name:
        raise SchemaError(f"case {name!r}: meta case_id {meta['case_id']!r} does not match directory")
    if not CWE_ID_RE.match(meta["gold_cwe_id"]):
        raise SchemaError(f"case {name!r}: gold_cwe_id {meta['gold_cwe_id']!r} is not CWE-<n>")
    description = meta.get("description", "")
    if not isinstance(description, str):
        raise SchemaError(f"case {name!r}: description must be a string")

    source = read_text_exact(case_dir / DESIGN_FILE)
    if not source:
        raise SchemaError(f"case {name!r}: design.v is empty")
    fixed_path = case_dir / FIXED_FILE
    return BenchmarkCase(
        case_id=name,
        buggy_design=RtlDesign(design_id=name, source_text=source),
        gold_snippet=read_text_exact(case_dir / GOLD_FILE),
        gold_cwe_id=meta["gold_cwe_id"],
        fixed_design=read_text_exact(fixed_path) if fixed_path.is_file() else None,
        description=description,
    )


def load_dataset(root: str | Path) -> list[BenchmarkCase]:
    root = Path(root)
    if not root.is_dir():
        raise MissingFileError(f"dataset root {root} is not a directory")
    case_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    return [_load_case(d) for d in case_dirs]


def save_case(case: BenchmarkCase, root: str | Path) -> Path:
    """Write ``case`` in the on-disk layout; returns the case directory."""
    case_dir = Path(root) / case.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    write_text_exact(case_dir / DESIGN_FILE, case.buggy_design.source_text)
    write_text_exact(case_dir / GOLD_FILE, case.gold_snippet)
    if case.fixed_design is not None:
        write_text_exact(case_dir / FIXED_FILE, case.fixed_design)
    meta = {"case_id": case.case_id, "gold_cwe_id": case.gold_cwe_id, "description": case.description}
    write_text_exact(case_dir / META_FILE, json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return case_dir
