"""Retrieval-augmented detection of hardware CWEs in Verilog RTL."""

from __future__ import annotations

__version__ = "0.1.0"

from .model import (  # noqa: E402
    BenchmarkCase,
    DetectionFinding,
    HardwareSignature,
    RankedCwe,
    RetrievalResult,
    RtlDesign,
    Verdict,
)

__all__ = [
    "BenchmarkCase",
    "DetectionFinding",
    "HardwareSignature",
    "RankedCwe",
    "RetrievalResult",
    "RtlDesign",
    "Verdict",
    "__version__",
]
