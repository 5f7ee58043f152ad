"""Acceptance gate: one test per criterion, each reported as a PASS/FAIL line
in the pytest terminal summary."""

from __future__ import annotations

import math
import random
import re
import struct
import time
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from helpers import CORPUS, STRIP_RE, criterion, grep_signature, load_json, make_kb, refuse_network

from cwerag.agents import parse_detection_response
from cwerag.cli import main
from cwerag.embedding import EmbeddingVector, HashingEmbedder
from cwerag.errors import MalformedAgentOutputError
from cwerag.evaluation import build_report, percent, retrieval_hits, rouge_l
from cwerag.hdl import SignatureLexicon, TokenKind, extract_signature, scan
from cwerag.kb import EnrichedCweRecord, embed_records, load_kb, save_kb, unit_norm_ok
from cwerag.model import (
    BenchmarkCase,
    DetectionFinding,
    RankedCwe,
    RetrievalResult,
    RtlDesign,
    Verdict,
)
from cwerag.retrieval import compose_query, retrieve_top_k

# ---------------------------------------------------------------------------
# 1. ROUGE-L against a dynamic-programming oracle
# ---------------------------------------------------------------------------


def dp_lcs(a, b) -> int:
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[len(a)][len(b)]


@criterion(1, "ROUGE-L equals the LCS oracle on 1,000 random pairs; worked example F = 6/7")
def test_criterion_1_rouge_l_oracle():
    start = time.perf_counter()
    rng = random.Random(20240601)
    alphabet = [f"t{i}" for i in range(10)]
    for _ in range(1000):
        ref = [rng.choice(alphabet) for _ in range(rng.randint(0, 50))]
        cand = [rng.choice(alphabet) for _ in range(rng.randint(0, 50))]
        got = rouge_l(ref, cand)
        lcs = dp_lcs(ref, cand)
        assert got.lcs_length == lcs
        p = lcs / len(cand) if cand else 0.0
        r = lcs / len(ref) if ref else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        assert abs(got.precision - p) <= 1e-9
        assert abs(got.recall - r) <= 1e-9
        assert abs(got.f_lcs - f) <= 1e-9
    example = rouge_l("a b c d".split(), "a c d".split())
    assert example.lcs_length == 3
    assert abs(example.f_lcs - 6 / 7) <= 1e-6
    assert time.perf_counter() - start < 5.0


# ---------------------------------------------------------------------------
# 2. Retrieval against an exhaustive linear scan
# ---------------------------------------------------------------------------


def scan_ranking(vectors, ids, query, k):
    qn = math.sqrt(math.fsum(x * x for x in query))
    scored = []
    for number, fields_ in zip(ids, vectors):
        best = max(
            math.fsum(a * b for a, b in zip(v, query)) / (math.sqrt(math.fsum(a * a for a in v)) * qn)
            for v in fields_
        )
        scored.append((-best, number))
    scored.sort()
    return [(f"CWE-{n}", -s) for s, n in scored[:k]]


@criterion(2, "top-k equals the exhaustive scan on 200 random KBs; ranking invariant to query scaling")
def test_criterion_2_retrieval_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    ties_seen = 0
    for _ in range(200):
        n = int(rng.integers(1, 201))
        dim = int(rng.integers(2, 65))
        ids = [int(x) for x in rng.choice(np.arange(1, 5000), size=n, replace=False)]
        vectors = []
        for i in range(n):
            if i and rng.random() < 0.15:
                # duplicate an earlier record: an exact tie broken by CWE number
                vectors.append(vectors[int(rng.integers(0, i))])
                ties_seen += 1
            else:
                vectors.append(tuple(rng.normal(size=dim).tolist() for _ in range(3)))
        kb = make_kb(vectors, ids, dim)
        query_values = rng.normal(size=dim).tolist()
        k = int(rng.integers(1, n + 6))
        expected = scan_ranking(vectors, ids, query_values, k)
        got = retrieve_top_k(kb, EmbeddingVector(tuple(query_values)), k)
        assert got.ids() == [cwe for cwe, _ in expected]
        for r, (_, score) in zip(got.ranked, expected):
            assert abs(r.score - score) <= 1e-9
        for c in (0.5, 2.0, 10.0):
            scaled = retrieve_top_k(kb, EmbeddingVector(tuple(c * x for x in query_values)), k)
            assert scaled.ids() == got.ids()
    assert ties_seen > 0
    assert time.perf_counter() - start < 10.0


# ---------------------------------------------------------------------------
# 3. Weighted query composition
# ---------------------------------------------------------------------------


def _bits(values):
    return [struct.pack("<d", v) for v in values]


@criterion(3, "weighted query of basis vectors is exactly [0.7, 0.3]; alpha=1, beta=0 is bit-identical")
def test_criterion_3_weighted_query():
    e1, e2 = EmbeddingVector((1.0, 0.0)), EmbeddingVector((0.0, 1.0))
    assert compose_query(e1, e2, 0.7, 0.3).values == (0.7, 0.3)
    assert compose_query(e1, e2).values == (0.7, 0.3)

    rng = random.Random(3)
    for _ in range(200):
        dim = rng.randint(1, 64)
        summary = [rng.uniform(-1e3, 1e3) for _ in range(dim)]
        summary[rng.randrange(dim)] = -0.0
        signature = [rng.uniform(-1, 1) for _ in range(dim)]
        q = compose_query(EmbeddingVector(tuple(summary)), EmbeddingVector(tuple(signature)), 1.0, 0.0)
        assert _bits(q.values) == _bits(summary)


# ---------------------------------------------------------------------------
# 4. Accuracy and hit-count arithmetic
# ---------------------------------------------------------------------------


def _oracle_percent(num: int, den: int) -> str:
    value = (Decimal(num) / Decimal(den) * 100).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{value}%"


def _cases(n: int) -> list[BenchmarkCase]:
    return [
        BenchmarkCase(f"case{i:02d}", RtlDesign(f"case{i:02d}", "module m; endmodule\n"), "assign x = y;",
                      "CWE-1191")
        for i in range(n)
    ]


@criterion(4, "detection bitmaps 9/14, 7/14, 14/14 give 64.29%, 50.00%, 100.00%; hits {T1:5, T5:13, T10:14}")
def test_criterion_4_accuracy_arithmetic():
    cases = _cases(14)
    for detected, published in ((9, "64.29%"), (7, "50.00%"), (14, "100.00%")):
        findings = [
            DetectionFinding(c.case_id, "CWE-1191", Verdict.FOUND, "assign x = y;", rank=1)
            if i < detected
            else DetectionFinding(c.case_id, "CWE-1191", Verdict.NOT_FOUND, rank=1)
            for i, c in enumerate(cases)
        ]
        report = build_report(cases, findings)
        assert report.detected_count == detected
        assert report.accuracy_percent == published
        assert percent(detected, 14) == _oracle_percent(detected, 14) == published

    # gold rank per case: five at rank 1, eight within ranks 2..5, one at rank 8
    gold_ranks = [1] * 5 + [2, 3, 4, 5, 2, 3, 4, 5] + [8]
    retrievals = {}
    for case, rank in zip(cases, gold_ranks):
        ids = [f"CWE-{2000 + j}" for j in range(10)]
        ids[rank - 1] = case.gold_cwe_id
        retrievals[case.case_id] = RetrievalResult(tuple(RankedCwe(c, 1.0 - j / 10, "summary")
                                                         for j, c in enumerate(ids)))
    hits = retrieval_hits((c.gold_cwe_id, retrievals[c.case_id]) for c in cases)
    assert (hits.t1, hits.t5, hits.t10) == (5, 13, 14)
    assert build_report(cases, [], retrievals).retrieval_hits == hits


# ---------------------------------------------------------------------------
# 5. Signature extraction against a grep-over-identifiers oracle
# ---------------------------------------------------------------------------

EXPECTED_CORPUS = {
    "c01_jtag_tap.v": ["jtag", "tap"],
    "c02_aes_core.v": ["aes", "crypto", "key"],
    "c03_lock_regs.v": ["csr", "lock", "reset"],
    "c04_dram_ctrl.v": ["dram", "pcie"],
    "c05_boot_rom.v": ["rom", "secure"],
    "c06_escaped.v": ["auth", "debug", "privilege"],
    "c07_spi_i2c.v": ["i2c", "scan", "spi"],
    "c08_otp_fuse.v": ["fuse", "lock", "otp"],
    "c09_rsa_sha.v": ["acl", "crypto", "rsa", "sha"],
    "c10_plain.v": [],
}

COMMENT_WORDS = ["jtag", "key", "password", "debug", "LOCK_bit", "*", "/", "\"", "module", "aes_key", "x"]


@st.composite
def commented(draw):
    original = source = CORPUS[draw(st.integers(0, len(CORPUS) - 1))].read_text(encoding="utf-8")
    # insertion points: starts of whitespace tokens, i.e. outside comments and strings
    points, pos = [], 0
    for tok in scan(source)[0]:
        if tok.kind is TokenKind.WHITESPACE:
            points.append(pos)
        pos += len(tok.text)
    chosen = sorted(set(draw(st.lists(st.sampled_from(points), min_size=1, max_size=6))), reverse=True)
    for at in chosen:
        words = draw(st.lists(st.sampled_from(COMMENT_WORDS), min_size=0, max_size=5))
        text = " ".join(words).replace("*/", "* /")
        comment = f"// {text}\n" if draw(st.booleans()) else f"/* {text} */"
        source = source[:at] + " " + comment + source[at:]
    return original, source


@st.composite
def recased(draw):
    source = CORPUS[draw(st.integers(0, len(CORPUS) - 1))].read_text(encoding="utf-8")
    rng = random.Random(draw(st.integers(0, 2**32 - 1)))
    return source, "".join(ch.upper() if rng.random() < 0.5 else ch.lower() for ch in source)


@criterion(5, "signature matches the grep oracle on a 10-file corpus; comment blindness and case-insensitivity")
def test_criterion_5_signature_extraction():
    assert len(CORPUS) == 10
    default = SignatureLexicon.default()
    for path in CORPUS:
        source = path.read_text(encoding="utf-8")
        got = list(extract_signature(RtlDesign(path.stem, source), default).keywords)
        assert got == grep_signature(source), path.name
        assert got == EXPECTED_CORPUS[path.name], path.name

    baseline = {p.read_text(encoding="utf-8"): extract_signature(p.read_text(encoding="utf-8")) for p in CORPUS}

    @settings(max_examples=500, deadline=None)
    @given(commented())
    def comment_blind(pair):
        original, mutated = pair
        assert extract_signature(mutated) == baseline[original]

    @settings(max_examples=500, deadline=None)
    @given(recased())
    def case_insensitive(pair):
        original, mutated = pair
        assert extract_signature(mutated) == baseline[original]

    comment_blind()
    case_insensitive()


# ---------------------------------------------------------------------------
# 6. End-to-end replay determinism
# ---------------------------------------------------------------------------


@criterion(6, "3-case bench replayed twice: byte-identical report.json, 66.67%, zero network calls")
def test_criterion_6_replay_determinism(bench3):
    start = time.perf_counter()
    reports = []
    for run in ("first", "second"):
        out = bench3 / run
        rc = main(["bench", "--dataset", str(bench3 / "dataset"), "--kb", str(bench3 / "kb"),
                   "--out", str(out), "--config", str(bench3 / "config.json"),
                   "--cache-dir", str(bench3 / "cache"), "--llm", "replay", "--frozen-time"],
                  env={}, llm_transport=refuse_network, embed_transport=refuse_network)
        assert rc == 0
        manifest = load_json(out / "run_manifest.json")
        assert manifest["stats"]["llm"]["network_calls"] == 0
        assert manifest["stats"]["llm"]["cache_hits"] > 0
        assert manifest["provider_modes"]["embedder"].startswith("hashing")
        reports.append((out / "report.json").read_bytes())
    assert reports[0] == reports[1]
    report = load_json(bench3 / "first" / "report.json")
    assert report["detection_accuracy_percent"] == "66.67%"
    assert report["detected_count"] == 2 and report["case_count"] == 3
    assert time.perf_counter() - start < 30.0


# ---------------------------------------------------------------------------
# 7. Knowledge base round trip
# ---------------------------------------------------------------------------


@criterion(7, "50-record KB survives save/load exactly; 150 unit-norm vectors")
def test_criterion_7_kb_round_trip(tmp_path):
    rng = random.Random(50)
    vocab = "jtag debug lock key fuse reset privilege dram uart aes register bus access control".split()
    records = [
        EnrichedCweRecord(
            cwe_id=f"CWE-{1190 + i * 3}",
            title=f"Hardware weakness {i}",
            summary=" ".join(rng.choice(vocab) for _ in range(30)),
            keywords=tuple(sorted(set(rng.sample(vocab, 5)))),
            vulnerable_snippet=f"assign out_{i} = {rng.choice(vocab)}_in;",
            secure_snippet=f"assign out_{i} = 1'b0;",
        )
        for i in range(50)
    ]
    kb = embed_records(records, HashingEmbedder(384), {"enrichment_model": "fixture"})
    save_kb(kb, tmp_path / "kb")
    loaded = load_kb(tmp_path / "kb")
    assert loaded == kb
    assert len(loaded) == 50
    vectors = [v for r in loaded.records for v in r.field_embeddings.values()]
    assert len(vectors) == loaded.vector_count() == 150
    assert all(unit_norm_ok(v, 1e-6) for v in vectors)
    for a, b in zip(kb.records, loaded.records):
        for name in a.field_embeddings:
            assert _bits(a.field_embeddings[name].values) == _bits(b.field_embeddings[name].values)
    assert load_json(tmp_path / "kb" / "manifest.json")["record_count"] == 50


# ---------------------------------------------------------------------------
# 8. Detection parser totality
# ---------------------------------------------------------------------------

_FRAGMENTS = [b"VERDICT: FOUND", b"VERDICT: NOT_FOUND", b"verdict:found", b"CWE: CWE-1191", b"CWE: CWE-",
              b"CWE-ID: cwe_12", b"```verilog\n", b"```", b"\n", b"  ", b"**", b"\xff\xfe", b"\x00",
              b"assign a = b;", b"VERDICT:", b":", b"NOT FOUND"]


def _fuzz_input(rng: random.Random) -> bytes:
    if rng.random() < 0.5:
        return bytes(rng.randrange(256) for _ in range(rng.randint(0, 200)))
    parts = [rng.choice(_FRAGMENTS) if rng.random() < 0.8 else bytes([rng.randrange(256)])
             for _ in range(rng.randint(0, 25))]
    return b"".join(parts)


@criterion(8, "detection parser over 10,000 random byte strings: a valid finding or a malformed-output error")
def test_criterion_8_parser_totality():
    rng = random.Random(8)
    parsed = malformed = 0
    for _ in range(10_000):
        data = _fuzz_input(rng)
        try:
            result = parse_detection_response(data)
        except MalformedAgentOutputError:
            malformed += 1
            continue
        assert isinstance(result.verdict, Verdict) and result.verdict is not Verdict.INDETERMINATE
        assert re.fullmatch(r"CWE-\d+", result.cwe_id)
        if result.verdict is Verdict.FOUND:
            assert result.snippet.strip()
        DetectionFinding("fuzz", result.cwe_id, result.verdict, result.snippet, result.rationale)
        parsed += 1
    assert parsed > 0 and malformed > 0


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
