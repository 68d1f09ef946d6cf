"""Lexer for the Java subset handled by the shipped grammar."""
from __future__ import annotations

import re
from typing import NamedTuple

KEYWORDS = frozenset("""
abstract assert boolean break byte case catch char class const continue default
do double else enum extends final finally float for goto if implements import
instanceof int interface long native new package private protected public return
short static strictfp super switch synchronized this throw throws transient try
void volatile while true false null
""".split())

IDENT, KEYWORD, INT, FLOAT, CHAR, STRING, OP, PUNCT = (
    "IDENT", "KEYWORD", "INT", "FLOAT", "CHAR", "STRING", "OP", "PUNCT")

_OPERATORS = sorted("""
>>>= <<= >>= >>> ... -> :: ++ -- && || == != <= >= += -= *= /= %= &= |= ^= << >>
+ - * / % = < > ! ~ ? : & | ^ .
""".split(), key=len, reverse=True)
_PUNCT = set("(){}[];,@")

_TOKEN_PATTERNS = [
    ("ws", r"\s+"),
    ("comment", r"//[^\n]*|/\*.*?\*/"),
    (FLOAT, r"(?:\d+\.\d*|\.\d+)(?:[eE][+-]?\d+)?[fFdD]?|\d+[eE][+-]?\d+[fFdD]?|\d+[fFdD]"),
    (INT, r"0[xX][0-9a-fA-F_]+[lL]?|\d[\d_]*[lL]?"),
    (CHAR, r"'(?:\\.|[^'\\\n])'"),
    (STRING, r'"(?:\\.|[^"\\\n])*"'),
    ("word", r"[A-Za-z_$][A-Za-z0-9_$]*"),
    (OP, "|".join(re.escape(o) for o in _OPERATORS)),
    (PUNCT, r"[(){}\[\];,@]"),
]
_MASTER = re.compile("|".join(f"(?P<{n}>{p})" for n, p in _TOKEN_PATTERNS), re.S)
# Uppercase type name with a balanced generic argument list, e.g. Map<String, List<Integer>>
_GENERIC_BODY = re.compile(r"[A-Za-z0-9_$\s,.?\[\]]*")


class LexError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class Token(NamedTuple):
    kind: str
    text: str
    offset: int = -1

    def __str__(self):
        return self.text


def _generic_end(text, pos):
    """End offset of a balanced ``<...>`` starting at ``pos``, or -1."""
    depth, i = 0, pos
    while i < len(text):
        ch = text[i]
        if ch == "<":
            depth += 1
        elif ch == ">":
            depth -= 1
            if depth == 0:
                return i + 1
        else:
            m = _GENERIC_BODY.match(text, i)
            if m.end() == i:
                return -1
            i = m.end()
            continue
        i += 1
    return -1


def tokenize_code(text: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _MASTER.match(text, pos)
        if m is None:
            ch = text[pos]
            if ch in "\"'":
                raise LexError("unterminated string or char literal", pos)
            raise LexError(f"illegal character {ch!r}", pos)
        kind = m.lastgroup
        start, end = m.start(), m.end()
        if kind == "word":
            word = m.group()
            if word in KEYWORDS:
                tokens.append(Token(KEYWORD, word, start))
            else:
                if word[0].isupper() and end < len(text) and text[end] == "<":
                    gend = _generic_end(text, end)
                    if gend > 0:
                        word = re.sub(r"\s+", "", text[start:gend])
                        end = gend
                tokens.append(Token(IDENT, word, start))
        elif kind not in ("ws", "comment"):
            if kind == OP and m.group() in _PUNCT:
                kind = PUNCT
            tokens.append(Token(kind, m.group(), start))
        pos = end
    return tokens


def classify(text: str) -> str:
    """Token kind of a single token string."""
    toks = tokenize_code(text)
    if len(toks) == 1 and toks[0].text == text:
        return toks[0].kind
    return OP


def is_identifier(text: str) -> bool:
    try:
        return classify(text) == IDENT
    except LexError:
        return False
