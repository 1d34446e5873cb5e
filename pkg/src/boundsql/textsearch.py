"""Tokenizer shared by the inverted full-text index and LIKE probes."""

from __future__ import annotations

import re

_TOKEN_RE = re.compile(r"[0-9a-z]+")


def tokenize_text(text: str) -> list[str]:
    """Lowercase, split on non-alphanumeric runs, drop empty tokens."""
    return _TOKEN_RE.findall(text.lower())
