"""Tokenizer for the policy language."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

from .model import Span

KEYWORDS = frozenset("""
AS ASIP AEIP AES AE ASSLO AESLO ASSELF_MANAGEMENT AESELF_MANAGEMENT ASARCHITECTURE GROUP MEMBERS
SELF_HEALING SELF_PROTECTING SELF_OPTIMIZING SELF_CONFIGURING
FLUENT INITIATED_BY TERMINATED_BY MAPPING CONDITIONS DO_ACTIONS
EVENTS EVENT GUARDS ACTIVATION DEGRADED NORMALIZED OCCURRED SENT CHANGED
METRICS METRIC METRIC_TYPE RESOURCE PLAIN VALUE THRESHOLD_CLASS METRIC_SOURCE
ACTIONS ACTION IMPL PARAMETERS RETURNS DOES TRIGGERS ONERR_TRIGGERS
MESSAGES MESSAGE CHANNELS CHANNEL ACCESS DIRECTION FUNCTIONS FUNCTION
MANAGED_ELEMENTS MANAGED_ELEMENT INTERFACE_FUNCTION FRIENDS
RECOVERY_PROTOCOL BEHAVIOR_MODELS OUTCOMES
SLO FOREACH IN IF THEN END CALL SET TRIGGER RETURN AND OR NOT
""".split())

# lowercase spellings used in the published listings
ALIASES = {"call": "CALL", "set": "SET", "in": "IN"}
BOOLEANS = {"true": True, "TRUE": True, "false": False, "FALSE": False}

PUNCT = {
    "<<": "LSHIFT", ">>": "RSHIFT", "..": "DOTDOT",
    "{": "LBRACE", "}": "RBRACE", "(": "LPAREN", ")": "RPAREN",
    "[": "LBRACKET", "]": "RBRACKET", ",": "COMMA", ";": "SEMI", "=": "EQ", ".": "DOT",
}


@dataclass(frozen=True)
class Token:
    kind: str  # KW, IDENT, PATH, INT, BOOL, punctuation name, EOF
    value: Union[str, int, bool, tuple, None]
    span: Span

    @property
    def text(self) -> str:
        if self.kind == "PATH":
            return ".".join(self.value)
        if self.kind == "BOOL":
            return "TRUE" if self.value else "FALSE"
        if self.kind == "EOF":
            return "end-of-file"
        if self.kind in ("KW", "IDENT", "INT"):
            return str(self.value)
        return next(k for k, v in PUNCT.items() if v == self.kind)

    def is_kw(self, *words) -> bool:
        return self.kind == "KW" and self.value in words


class LexError(Exception):
    def __init__(self, span: Span, message: str):
        super().__init__(message)
        self.span = span
        self.message = message


def _is_word_start(c: str) -> bool:
    return c == "_" or ("a" <= c <= "z") or ("A" <= c <= "Z")


def _is_word_char(c: str) -> bool:
    return _is_word_start(c) or ("0" <= c <= "9")


def tokenize(src: str, file: str = "<input>", errors: Optional[list] = None) -> list[Token]:
    """Split ``src`` into tokens; ``//`` comments are dropped.

    Illegal characters raise :class:`LexError`, unless ``errors`` is given, in
    which case they are appended there and skipped.  The returned list never
    includes an EOF token.
    """
    out: list[Token] = []
    i, n = 0, len(src)
    line, col = 1, 1

    def span(length):
        return Span(file, line, col, length)

    while i < n:
        c = src[i]
        if c == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if c in " \t\r\f\v":
            i += 1
            col += 1
            continue
        if src.startswith("//", i):
            while i < n and src[i] != "\n":
                i += 1
                col += 1
            continue
        if _is_word_start(c):
            j = i
            segs = []
            while True:
                k = j
                while k < n and _is_word_char(src[k]):
                    k += 1
                segs.append(src[j:k])
                if k + 1 < n and src[k] == "." and _is_word_start(src[k + 1]):
                    j = k + 1
                    continue
                break
            length = k - i
            if len(segs) > 1:
                tok = Token("PATH", tuple(segs), span(length))
            else:
                w = segs[0]
                if w in BOOLEANS:
                    tok = Token("BOOL", BOOLEANS[w], span(length))
                elif w in KEYWORDS:
                    tok = Token("KW", w, span(length))
                elif w in ALIASES:
                    tok = Token("KW", ALIASES[w], span(length))
                else:
                    tok = Token("IDENT", w, span(length))
            out.append(tok)
            col += length
            i = k
            continue
        if "0" <= c <= "9":
            k = i
            while k < n and "0" <= src[k] <= "9":
                k += 1
            out.append(Token("INT", int(src[i:k]), span(k - i)))
            col += k - i
            i = k
            continue
        two = src[i:i + 2]
        if two in PUNCT:
            out.append(Token(PUNCT[two], None, span(2)))
            i += 2
            col += 2
            continue
        if c in PUNCT:
            out.append(Token(PUNCT[c], None, span(1)))
            i += 1
            col += 1
            continue
        err = LexError(span(1), f"illegal character {c!r}")
        if errors is None:
            raise err
        errors.append(err)
        i += 1
        col += 1
    return out
