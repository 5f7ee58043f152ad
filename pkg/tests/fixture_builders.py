"""Builders for the checked-in fixtures under ``tests/fixtures``.

Run ``python3 tests/fixture_builders.py`` to regenerate them after a prompt
change (the recorded LLM cache is keyed by prompt text).
"""

from __future__ import annotations

import json
import shutil
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from helpers import FIXTURES, Script, ScriptedLlm  # noqa: E402

from cwerag.cli import main  # noqa: E402
from cwerag.dataset import save_case  # noqa: E402
from cwerag.model import BenchmarkCase, RtlDesign  # noqa: E402

KEY_ENV = {"SRR_LLM_API_KEY": "fixture-key"}

RAW_CWES = [
    {
        "cwe_id": "CWE-1191",
        "title": "On-Chip Debug and Test Interface With Improper Access Control",
        "description": "The chip does not implement or does not correctly perform access control to check "
                       "whether users are authorized to access internal registers and test modes through "
                       "the physical debug/test interface.",
        "extended_description": "JTAG access is granted without a password check.",
        "mitigations": ["Gate debug access behind authentication."],
        "modes_of_introduction": ["Architecture and Design"],
    },
    {
        "cwe_id": "CWE-1231",
        "title": "Improper Prevention of Lock Bit Modification",
        "description": "The product uses a trusted lock bit for restricting access to registers, address "
                       "regions, or other resources, but the product does not prevent the value of the lock "
                       "bit from being modified after it has been set.",
        "mitigations": ["Make the lock bit sticky until reset."],
        "modes_of_introduction": ["Implementation"],
    },
    {
        "cwe_id": "CWE-1234",
        "title": "Hardware Internal or Debug Modes Allow Override of Locks",
        "description": "System configuration protection may be bypassed during debug mode.",
        "modes_of_introduction": ["Architecture and Design"],
    },
    {
        "cwe_id": "CWE-1244",
        "title": "Internal Asset Exposed to Unsafe Debug Access Level or State",
        "description": "The product uses physical debug or test interfaces with support for multiple access "
                       "levels, but it assigns the wrong debug access level to an internal asset.",
    },
    {
        "cwe_id": "CWE-1271",
        "title": "Uninitialized Value on Reset for Registers Holding Security Settings",
        "description": "Security-critical logic is not set to a known value on reset.",
        "mitigations": ["Assign a secure default to every security register on reset."],
    },
]

JTAG_SRC = """\
// debug access unit
module case_a_jtag (
  input  wire       tck,
  input  wire       rst_n,
  input  wire [7:0] tdi_word,
  output reg        debug_unlocked
);
  always @(posedge tck or negedge rst_n) begin
    if (!rst_n)
      debug_unlocked <= 1'b0;
    else
      debug_unlocked <= 1'b1;
  end
endmodule
"""
JTAG_GOLD = "      debug_unlocked <= 1'b1;"

LOCK_SRC = """\
module case_b_lock (
  input  wire       clk,
  input  wire       rst_n,
  input  wire       we,
  input  wire       lock_in,
  input  wire [7:0] cfg_in,
  output reg        lock_bit,
  output reg  [7:0] cfg_reg
);
  always @(posedge clk or negedge rst_n) begin
    if (!rst_n) begin
      lock_bit <= 1'b0;
      cfg_reg  <= 8'h00;
    end else if (we) begin
      lock_bit <= lock_in;
      if (!lock_bit) cfg_reg <= cfg_in;
    end
  end
endmodule
"""
LOCK_GOLD = "      lock_bit <= lock_in;"

RESET_SRC = """\
module case_c_reset (
  input  wire       clk,
  input  wire       rst_n,
  input  wire [3:0] priv_in,
  output reg  [3:0] priv_level
);
  always @(posedge clk) begin
    priv_level <= priv_in;
  end
endmodule
"""
RESET_GOLD = "    priv_level <= priv_in;"

BENCH3_CASES = [
    ("case_a_jtag", JTAG_SRC, JTAG_GOLD, "CWE-1191", "JTAG unlock without password"),
    ("case_b_lock", LOCK_SRC, LOCK_GOLD, "CWE-1231", "lock bit can be cleared after being set"),
    ("case_c_reset", RESET_SRC, RESET_GOLD, "CWE-1271", "privilege register has no reset value"),
]

# two of three detected
BENCH3_SCRIPT = Script(
    summaries={
        "case_a_jtag": "A JTAG debug unit that unlocks debug access on the test clock without any password "
                       "or authentication check.",
        "case_b_lock": "A configuration register protected by a lock bit; the lock bit itself stays writable "
                       "after it has been set.",
        "case_c_reset": "A privilege level register updated every clock with no reset value.",
    },
    detections={
        "case_a_jtag": {"CWE-1191": JTAG_GOLD.strip()},
        "case_b_lock": {"CWE-1231": LOCK_GOLD.strip()},
    },
    keywords={
        "CWE-1191": ["jtag", "debug", "password", "access", "test"],
        "CWE-1231": ["lock", "bit", "register", "write"],
        "CWE-1234": ["debug", "lock", "override", "mode"],
        "CWE-1244": ["debug", "asset", "level", "access"],
        "CWE-1271": ["reset", "register", "privilege", "uninitialized"],
    },
)

BENCH3_CONFIG = {"embed_provider": "hashing", "embedding_dimension": 256}


def write_bench3_inputs(root: Path) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    for case_id, src, gold, cwe, desc in BENCH3_CASES:
        save_case(BenchmarkCase(case_id, RtlDesign(case_id, src), gold, cwe, None, desc), root / "dataset")
    (root / "cwe_raw.json").write_text(json.dumps(RAW_CWES, indent=2) + "\n", encoding="utf-8")
    (root / "config.json").write_text(json.dumps(BENCH3_CONFIG, indent=2) + "\n", encoding="utf-8")
    (root / "baseline_findings.json").write_text("[]\n", encoding="utf-8")
    return root


def record_bench3(root: Path) -> ScriptedLlm:
    """Build the KB and run the benchmark once in record mode, filling ``root/cache``."""
    llm = ScriptedLlm(BENCH3_SCRIPT)
    common = ["--config", str(root / "config.json"), "--cache-dir", str(root / "cache"), "--llm", "record",
              "--frozen-time"]
    rc = main(["kb", "build", "--cwe-input", str(root / "cwe_raw.json"), "--out", str(root / "kb"), *common],
              env=KEY_ENV, llm_transport=llm)
    assert rc == 0, rc
    rc = main(["bench", "--dataset", str(root / "dataset"), "--kb", str(root / "kb"),
               "--out", str(root / "recorded_run"), *common], env=KEY_ENV, llm_transport=llm)
    assert rc == 0, rc
    shutil.rmtree(root / "recorded_run")
    return llm


def rebuild_bench3(target: Path = FIXTURES / "bench3") -> None:
    if target.exists():
        shutil.rmtree(target)
    write_bench3_inputs(target)
    record_bench3(target)


if __name__ == "__main__":
    rebuild_bench3()
    print(f"rebuilt {FIXTURES / 'bench3'}")
