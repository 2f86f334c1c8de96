"""Sentence splitting and tokenisation shared by the leakage scanner and structural features.

Rules are deliberately simple so results are reproducible bit-for-bit:
sentences end at ``.``, ``!`` or ``?`` followed by whitespace; tokens are
whitespace-separated, lowercased, with every non-word character removed.
"""
from __future__ import annotations

import re

_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")
_NON_WORD = re.compile(r"[^\w\s]")


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_END.split(text.strip()) if s.strip()]


def tokenize(text: str) -> list[str]:
    return _NON_WORD.sub("", text.lower()).split()


def token_set(text: str) -> frozenset[str]:
    return frozenset(tokenize(text))


def jaccard(a: frozenset[str] | set[str], b: frozenset[str] | set[str]) -> float:
    union = len(a | b)
    return len(a & b) / union if union else 0.0
