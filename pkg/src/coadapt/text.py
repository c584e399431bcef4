"""Tokenization helpers shared by the retrieval channels, metrics and guardrail."""

from __future__ import annotations

import re
from typing import Callable

_TOKEN_RE = re.compile(r"[^\W_]+")

# Small function-word list. Used only where "content terms" matter (routing,
# summary/query overlap, synthetic-corpus checks); BM25 indexes every token.
STOPWORDS = frozenset(
    """
    a an and are as at be but by can do does for from has have how i if in into is it
    its my of on or our should so than that the their them then there these they this
    to was we were what when where which who why will with you your see about after
    per any all also not no yes me us
    """.split()
)

Tokenizer = Callable[[str], list[str]]


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _TOKEN_RE.findall(text.lower())


def content_terms(text: str, tokenizer: Tokenizer = tokenize) -> set[str]:
    return {t for t in tokenizer(text) if t not in STOPWORDS}


def whitespace_token_count(text: str) -> int:
    return len(text.split())
