"""Lossless Verilog-2005 lexical scanner and hardware-signature extraction.

Only lexical structure is recovered; there is no parser. Preprocessor
directives are scanned as ordinary text (a backtick operator followed by an
identifier).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from .errors import SchemaError, UnterminatedConstructError
from .model import HardwareSignature, RtlDesign


class TokenKind(str, Enum):
    IDENTIFIER = "identifier"
    KEYWORD = "keyword"
    NUMBER = "number"
    OPERATOR = "operator"
    STRING_LITERAL = "string_literal"
    COMMENT = "comment"
    WHITESPACE = "whitespace"


@dataclass(frozen=True)
class HdlToken:
    kind: TokenKind
    text: str
    line: int
    column: int


VERILOG_KEYWORDS = frozenset("""
always and assign automatic begin buf bufif0 bufif1 case casex casez cell cmos
config deassign default defparam design disable edge else end endcase
endconfig endfunction endgenerate endmodule endprimitive endspecify endtable
endtask event for force forever fork function generate genvar highz0 highz1 if
ifnone incdir include initial inout input instance integer join large liblist
library localparam macromodule medium module nand negedge nmos nor
noshowcancelled not notif0 notif1 or output parameter pmos posedge primitive
pull0 pull1 pulldown pullup pulsestyle_onevent pulsestyle_ondetect rcmos real
realtime reg release repeat rnmos rpmos rtran rtranif0 rtranif1 scalared
showcancelled signed small specify specparam strong0 strong1 supply0 supply1
table task time tran tranif0 tranif1 tri tri0 tri1 triand trior trireg
unsigned use uwire vectored wait wand weak0 weak1 while wire wor xnor xor
""".split())

_OPERATORS = sorted(
    """<<< >>> === !== == != && || ** <= >= << >> ~& ~| ~^ ^~ -> +: -:""".split(),
    key=len,
    reverse=True,
)

# Order matters: terminated forms are tried before their unterminated fallbacks.
_RULES: list[tuple[str, str]] = [
    ("ws", r"[ \t\r\n\f\v]+"),
    ("line_comment", r"//[^\n]*"),
    ("block_comment", r"/\*.*?\*/"),
    ("open_block_comment", r"/\*.*"),
    ("string", r'"(?:[^"\\\n]|\\.)*"'),
    ("open_string", r'"(?:[^"\\\n]|\\.)*'),
    ("escaped_ident", r"\\[^ \t\r\n\f\v]+"),
    ("system_ident", r"\$[A-Za-z0-9_$]+"),
    ("ident", r"[A-Za-z_][A-Za-z0-9_$]*"),
    ("based_number", r"(?:[0-9][0-9_]*)?'[sS]?[bBoOdDhH][0-9a-fA-FxXzZ?_]+"),
    ("unbased_unsized", r"'[01xXzZ](?![0-9A-Za-z_])"),
    ("real_number", r"[0-9][0-9_]*(?:\.[0-9][0-9_]*(?:[eE][+-]?[0-9][0-9_]*)?|[eE][+-]?[0-9][0-9_]*)"),
    ("decimal", r"[0-9][0-9_]*"),
    ("operator", "|".join(re.escape(op) for op in _OPERATORS)),
    ("any", r"."),
]
_MASTER = re.compile("|".join(f"(?P<{name}>{pat})" for name, pat in _RULES), re.DOTALL)

_KIND_BY_RULE = {
    "ws": TokenKind.WHITESPACE,
    "line_comment": TokenKind.COMMENT,
    "block_comment": TokenKind.COMMENT,
    "open_block_comment": TokenKind.COMMENT,
    "string": TokenKind.STRING_LITERAL,
    "open_string": TokenKind.STRING_LITERAL,
    "escaped_ident": TokenKind.IDENTIFIER,
    "system_ident": TokenKind.IDENTIFIER,
    "ident": TokenKind.IDENTIFIER,
    "based_number": TokenKind.NUMBER,
    "unbased_unsized": TokenKind.NUMBER,
    "real_number": TokenKind.NUMBER,
    "decimal": TokenKind.NUMBER,
    "operator": TokenKind.OPERATOR,
    "any": TokenKind.OPERATOR,
}


def scan(source: str) -> tuple[list[HdlToken], list[UnterminatedConstructError]]:
    """Tokenize without raising; unterminated constructs are returned as errors.

    An unclosed block comment runs to end of input, an unclosed string to end
    of its line, so the token stream is always lossless.
    """
    tokens: list[HdlToken] = []
    errors: list[UnterminatedConstructError] = []
    pos, line, col = 0, 1, 1
    n = len(source)
    while pos < n:
        m = _MASTER.match(source, pos)
        assert m is not None  # the "any" rule matches every character
        rule = m.lastgroup
        text = m.group()
        kind = _KIND_BY_RULE[rule]
        if rule == "ident" and text in VERILOG_KEYWORDS:
            kind = TokenKind.KEYWORD
        tokens.append(HdlToken(kind, text, line, col))
        if rule == "open_block_comment":
            errors.append(UnterminatedConstructError("unterminated block comment", line=line, column=col))
        elif rule == "open_string":
            errors.append(UnterminatedConstructError("unterminated string literal", line=line, column=col))
        newlines = text.count("\n")
        if newlines:
            line += newlines
            col = len(text) - text.rfind("\n")
        else:
            col += len(text)
        pos = m.end()
    for err in errors:
        err.tokens = tokens
    return tokens, errors


def tokenize(source: str) -> list[HdlToken]:
    """Lossless token stream; raises UnterminatedConstructError on the first
    unclosed comment or string (the exception carries the full stream)."""
    tokens, errors = scan(source)
    if errors:
        raise errors[0]
    return tokens


def identifiers(source: str) -> list[str]:
    return [t.text for t in scan(source)[0] if t.kind is TokenKind.IDENTIFIER]


@dataclass(frozen=True)
class SignatureLexicon:
    entries: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for canonical, patterns in self.entries:
            if not canonical or canonical != canonical.lower() or any(c.isspace() for c in canonical):
                raise SchemaError(f"bad canonical keyword {canonical!r}")
            if canonical in seen:
                raise SchemaError(f"duplicate canonical keyword {canonical!r}")
            seen.add(canonical)
            if not patterns or any(not p or p != p.lower() for p in patterns):
                raise SchemaError(f"{canonical}: patterns must be non-empty lowercase strings")

    @property
    def keywords(self) -> list[str]:
        return [c for c, _ in self.entries]

    @classmethod
    def parse(cls, text: str) -> SignatureLexicon:
        """Parse ``canonical: pattern1,pattern2`` lines; ``#`` starts a comment line."""
        entries = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            canonical, sep, rest = line.partition(":")
            canonical = canonical.strip().lower()
            if sep:
                patterns = tuple(p.strip().lower() for p in rest.split(",") if p.strip())
            else:
                patterns = (canonical,)
            if not canonical or not patterns:
                raise SchemaError(f"lexicon line {lineno}: expected 'canonical: pattern,...'")
            entries.append((canonical, patterns))
        return cls(tuple(entries))

    @classmethod
    def load(cls, path: str | Path) -> SignatureLexicon:
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> SignatureLexicon:
        return cls.parse(resources.files("cwerag.data").joinpath("default_lexicon.txt").read_text(encoding="utf-8"))


def extract_signature(design: RtlDesign | str, lexicon: SignatureLexicon | None = None) -> HardwareSignature:
    """Lexicon keywords whose patterns occur inside identifier tokens.

    Matching is case-insensitive. Identifiers whose lower-case form is a
    reserved word (``MODULE`` after upper-casing, say) are skipped so the
    result does not depend on source case.
    """
    if lexicon is None:
        lexicon = SignatureLexicon.default()
    source = design.source_text if isinstance(design, RtlDesign) else design
    names = {
        t.text.lower()
        for t in scan(source)[0]
        if t.kind is TokenKind.IDENTIFIER and t.text.lower() not in VERILOG_KEYWORDS
    }
    hits = [
        canonical
        for canonical, patterns in lexicon.entries
        if any(p in name for name in names for p in patterns)
    ]
    return HardwareSignature(tuple(hits))
