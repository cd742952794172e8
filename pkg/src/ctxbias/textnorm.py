"""Text normalization shared by the corpus, pruning, and scoring layers.

All keyword matching and error-rate attribution runs over the same token
stream: case-folded, punctuation-stripped words. Apostrophes and hyphens
survive only when they sit inside a word ("it's", "a-b"); everything else
non-alphanumeric is dropped.
"""

from __future__ import annotations

_KEEP = "'-"


def normalize_word(word: str) -> str:
    """Normalize a single word; returns "" when nothing survives."""
    kept = "".join(ch for ch in word.casefold() if ch.isalnum() or ch in _KEEP)
    return kept.strip(_KEEP)


def tokenize(text: str) -> list[str]:
    """Split text into normalized tokens; empty input gives an empty list."""
    tokens = []
    for chunk in text.split():
        word = normalize_word(chunk)
        if word:
            tokens.append(word)
    return tokens


def normalize_keyword(keyword: str) -> str:
    """Canonical form of a keyword: its normalized tokens joined by spaces.

    Keywords are single words in practice, but OCR occasionally glues
    phrases together; joining keeps those matchable.
    """
    return " ".join(tokenize(keyword))


def contains_sequence(haystack: list[str], needle: list[str]) -> bool:
    """True when ``needle`` occurs as a contiguous run inside ``haystack``."""
    if not needle:
        return False
    n = len(needle)
    if n == 1:
        return needle[0] in haystack
    return any(haystack[i : i + n] == needle for i in range(len(haystack) - n + 1))
