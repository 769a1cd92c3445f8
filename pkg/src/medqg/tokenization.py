"""Pluggable tokenizers.

Corpus statistics and loss-masked exports both count tokens.  The default
``WordPunctTokenizer`` splits text into runs of word characters and single
punctuation marks, so it can report character offsets for every token; that
is what the exporter needs to express loss spans in token indices.

``ScaledWordCounter`` only estimates a count (words x factor, rounded up) and
is meant for approximating a BPE vocabulary's totals when no real BPE is
installed.  Any object exposing ``name``, ``offsets`` and ``count`` can be
plugged in instead, e.g. ``HFTokenizerAdapter`` around a fast tokenizer.
"""
from __future__ import annotations

import math
import re
from typing import Protocol, runtime_checkable

_WORD_PUNCT = re.compile(r"\w+|[^\w\s]")
_WORD = re.compile(r"\S+")


@runtime_checkable
class Tokenizer(Protocol):
    name: str

    def offsets(self, text: str) -> list[tuple[int, int]]: ...

    def count(self, text: str) -> int: ...


class WordPunctTokenizer:
    name = "word-punct-v1"

    def offsets(self, text: str) -> list[tuple[int, int]]:
        return [m.span() for m in _WORD_PUNCT.finditer(text)]

    def count(self, text: str) -> int:
        return sum(1 for _ in _WORD_PUNCT.finditer(text))

    def __repr__(self) -> str:
        return "WordPunctTokenizer()"


class ScaledWordCounter:
    """Count-only estimate: ``ceil(words * factor)``.

    Has no token boundaries, so ``offsets`` raises; do not use it for exports.
    """

    def __init__(self, factor: float = 1.33):
        if not factor > 0:
            raise ValueError("factor must be positive")
        self.factor = factor
        self.name = f"scaled-words-x{factor:g}"

    def offsets(self, text: str) -> list[tuple[int, int]]:
        raise NotImplementedError(f"{self.name} estimates counts only")

    def count(self, text: str) -> int:
        words = count_words(text)
        # round() first to keep e.g. 100 * 1.33 from ceiling to 134
        return math.ceil(round(words * self.factor, 9))

    def __repr__(self) -> str:
        return f"ScaledWordCounter(factor={self.factor!r})"


class HFTokenizerAdapter:
    """Wrap a Hugging Face *fast* tokenizer (needs offset mapping support)."""

    def __init__(self, hf_tokenizer, name: str | None = None):
        self.tok = hf_tokenizer
        self.name = name or getattr(hf_tokenizer, "name_or_path", "hf-tokenizer")

    def offsets(self, text: str) -> list[tuple[int, int]]:
        enc = self.tok(text, add_special_tokens=False, return_offsets_mapping=True)
        return [tuple(o) for o in enc["offset_mapping"]]

    def count(self, text: str) -> int:
        return len(self.tok(text, add_special_tokens=False)["input_ids"])


DEFAULT_TOKENIZER: Tokenizer = WordPunctTokenizer()


def count_words(text: str) -> int:
    """A word is a maximal run of non-whitespace characters."""
    return sum(1 for _ in _WORD.finditer(text))


def word_spans(text: str) -> list[tuple[int, int]]:
    return [m.span() for m in _WORD.finditer(text)]


def count_tokens(text: str, tokenizer: Tokenizer | None = None) -> int:
    return (tokenizer or DEFAULT_TOKENIZER).count(text)


def get_tokenizer(name: str) -> Tokenizer:
    if name in ("default", WordPunctTokenizer.name):
        return DEFAULT_TOKENIZER
    m = re.fullmatch(r"scaled-words(?:-x([0-9.]+))?", name)
    if m:
        return ScaledWordCounter(float(m.group(1)) if m.group(1) else 1.33)
    raise ValueError(f"unknown tokenizer {name!r}")
