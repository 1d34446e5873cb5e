"""Tiny tokenizer shared by the DDL and query parsers.

Single-quoted strings with '' escaping, `--` line comments, signed integer
literals, and multi-character comparison operators. Every token carries its
line/column so parse errors can point at the offending text.
"""

from __future__ import annotations

from dataclasses import dataclass


class ParseError(ValueError):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.message = message
        self.line = line
        self.col = col
        super().__init__(f"line {line}, col {col}: {message}" if line else message)


@dataclass(frozen=True)
class Token:
    kind: str  # IDENT | INT | STRING | PUNCT | EOF
    text: str
    line: int
    col: int

    def upper(self) -> str:
        return self.text.upper()


_PUNCT_TWO = ("<=", ">=", "<>", "!=")
_PUNCT_ONE = "(),;=<>.*[]:%"


def tokenize(source: str) -> list[Token]:
    tokens: list[Token] = []
    line, col = 1, 1
    i, n = 0, len(source)

    def err(msg):
        raise ParseError(msg, line, col)

    while i < n:
        ch = source[i]
        if ch == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if source.startswith("--", i):
            while i < n and source[i] != "\n":
                i += 1
            continue
        start_line, start_col = line, col
        if ch == "'":
            i += 1
            col += 1
            buf = []
            while True:
                if i >= n:
                    raise ParseError("unterminated string literal", start_line, start_col)
                c = source[i]
                if c == "'":
                    if i + 1 < n and source[i + 1] == "'":
                        buf.append("'")
                        i += 2
                        col += 2
                        continue
                    i += 1
                    col += 1
                    break
                if c == "\n":
                    raise ParseError("newline in string literal", start_line, start_col)
                buf.append(c)
                i += 1
                col += 1
            tokens.append(Token("STRING", "".join(buf), start_line, start_col))
            continue
        if ch.isdigit() or (ch == "-" and i + 1 < n and source[i + 1].isdigit()):
            j = i + 1
            while j < n and source[j].isdigit():
                j += 1
            tokens.append(Token("INT", source[i:j], start_line, start_col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i + 1
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            tokens.append(Token("IDENT", source[i:j], start_line, start_col))
            col += j - i
            i = j
            continue
        two = source[i : i + 2]
        if two in _PUNCT_TWO:
            tokens.append(Token("PUNCT", two, start_line, start_col))
            i += 2
            col += 2
            continue
        if ch in _PUNCT_ONE:
            tokens.append(Token("PUNCT", ch, start_line, start_col))
            i += 1
            col += 1
            continue
        err(f"unexpected character {ch!r}")
    tokens.append(Token("EOF", "", line, col))
    return tokens


class TokenStream:
    """Cursor over a token list with the usual peek/expect helpers."""

    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self, ahead: int = 0) -> Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def next(self) -> Token:
        tok = self.peek()
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def at_keyword(self, *words: str) -> bool:
        tok = self.peek()
        return tok.kind == "IDENT" and tok.upper() in words

    def accept_keyword(self, *words: str) -> Token | None:
        if self.at_keyword(*words):
            return self.next()
        return None

    def expect_keyword(self, word: str) -> Token:
        tok = self.peek()
        if tok.kind == "IDENT" and tok.upper() == word:
            return self.next()
        raise ParseError(f"expected {word}, found {tok.text or 'end of input'!r}",
                         tok.line, tok.col)

    def at_punct(self, *symbols: str) -> bool:
        tok = self.peek()
        return tok.kind == "PUNCT" and tok.text in symbols

    def accept_punct(self, *symbols: str) -> Token | None:
        if self.at_punct(*symbols):
            return self.next()
        return None

    def expect_punct(self, symbol: str) -> Token:
        tok = self.peek()
        if tok.kind == "PUNCT" and tok.text == symbol:
            return self.next()
        raise ParseError(f"expected {symbol!r}, found {tok.text or 'end of input'!r}",
                         tok.line, tok.col)

    def expect_ident(self, what: str = "identifier") -> Token:
        tok = self.peek()
        if tok.kind != "IDENT":
            raise ParseError(f"expected {what}, found {tok.text or 'end of input'!r}",
                             tok.line, tok.col)
        return self.next()

    def expect_int(self, what: str = "integer") -> int:
        tok = self.peek()
        if tok.kind != "INT":
            raise ParseError(f"expected {what}, found {tok.text or 'end of input'!r}",
                             tok.line, tok.col)
        self.next()
        return int(tok.text)

    def error(self, message: str) -> ParseError:
        tok = self.peek()
        return ParseError(message, tok.line, tok.col)
