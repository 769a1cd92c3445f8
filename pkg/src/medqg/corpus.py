"""Textbook corpus ingestion and segmentation.

Input is the paragraph stream produced by a PDF layout extractor (one JSON
dump per document).  The stream is filtered, grouped into sections at title
elements, and then normalized so that sections are between ``min_words`` and
``max_words`` long.
"""
from __future__ import annotations

import json
import math
import os
import re
from collections import OrderedDict, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from sklearn.base import BaseEstimator, TransformerMixin

from ._io import iter_jsonl, write_json, write_jsonl
from .tokenization import Tokenizer, count_tokens, count_words, word_spans

ELEMENT_KINDS = ("paragraph", "title", "table", "figure")
PREAMBLE = "<preamble>"
_ID_WIDTH = 5


@dataclass(frozen=True)
class RawElement:
    kind: str
    text: str
    page: int

    def __post_init__(self):
        if self.kind not in ELEMENT_KINDS:
            raise ValueError(f"unknown element kind {self.kind!r}")
        if not isinstance(self.page, int) or self.page < 1:
            raise ValueError(f"page must be an integer >= 1, got {self.page!r}")


@dataclass(frozen=True)
class RawDocument:
    doc_id: str
    title: str
    elements: tuple[RawElement, ...]

    def __post_init__(self):
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")

    @classmethod
    def from_dict(cls, d: dict) -> "RawDocument":
        return cls(
            doc_id=str(d["doc_id"]),
            title=d.get("title", ""),
            elements=tuple(RawElement(e["kind"], e["text"], e["page"]) for e in d.get("elements", [])),
        )

    def to_dict(self) -> dict:
        return {"doc_id": self.doc_id, "title": self.title, "elements": [asdict(e) for e in self.elements]}


@dataclass(frozen=True)
class Section:
    section_id: str
    doc_id: str
    title_path: tuple[str, ...]
    text: str
    word_count: int
    token_count: int

    @classmethod
    def build(cls, section_id: str, doc_id: str, title_path: Sequence[str], text: str,
              tokenizer: Tokenizer | None = None) -> "Section":
        return cls(section_id, doc_id, tuple(title_path), text, count_words(text), count_tokens(text, tokenizer))

    @property
    def index(self) -> int:
        return int(self.section_id.rsplit("/", 1)[1])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["title_path"] = list(self.title_path)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Section":
        return cls(d["section_id"], d["doc_id"], tuple(d["title_path"]), d["text"],
                   int(d["word_count"]), int(d["token_count"]))


@dataclass(frozen=True)
class FilterPolicy:
    min_chars: int = 20
    header_repeat_threshold: int = 3


@dataclass(frozen=True)
class CorpusStats:
    document_count: int = 0
    section_count: int = 0
    total_tokens: int = 0
    total_words: int = 0
    # sections under the minimum length (terminal remainders)
    short_sections: int = 0

    def __add__(self, other: "CorpusStats") -> "CorpusStats":
        return CorpusStats(*(a + b for a, b in zip(astuple_stats(self), astuple_stats(other))))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusStats":
        return cls(**{k: int(d.get(k, 0)) for k in cls.__dataclass_fields__})


def astuple_stats(s: CorpusStats) -> tuple[int, ...]:
    return (s.document_count, s.section_count, s.total_tokens, s.total_words, s.short_sections)


# ---------------------------------------------------------------------------
# filtering

def _header_key(e: RawElement) -> str:
    # page numbers inside running headers differ from page to page; titles
    # keep their digits so numbered headings ("2.1 Diagnosis") stay distinct
    key = " ".join(e.text.lower().split())
    return key if e.kind == "title" else re.sub(r"\d+", "#", key)


def filter_paragraphs(doc: RawDocument, policy: FilterPolicy | None = None) -> list[RawElement]:
    """Drop tables, figures, tiny paragraphs and repeated headers/footers."""
    policy = policy or FilterPolicy()
    textual = [e for e in doc.elements if e.kind in ("paragraph", "title")]
    pages: dict[str, set[int]] = defaultdict(set)
    for e in textual:
        pages[(e.kind, _header_key(e))].add(e.page)

    kept = []
    for e in textual:
        stripped = e.text.strip()
        if not stripped:
            continue
        if e.kind == "paragraph" and len(stripped) < policy.min_chars:
            continue
        if len(pages[(e.kind, _header_key(e))]) >= policy.header_repeat_threshold:
            continue
        kept.append(e)
    return kept


# ---------------------------------------------------------------------------
# grouping

_COMPONENT = r"(?:\d+|[A-Za-z]|[IVXLCDM]+)"
_OUTLINE_LABEL = re.compile(rf"^\s*({_COMPONENT}(?:\.{_COMPONENT})*)[.)]?(?=\s|$)")


def _outline_label(title: str) -> str | None:
    m = _OUTLINE_LABEL.match(title)
    return m.group(1) if m else None


def _section_id(doc_id: str, index: int) -> str:
    return f"{doc_id}/{index:0{_ID_WIDTH}d}"


def group_sections(elements: Sequence[RawElement], doc_id: str,
                   tokenizer: Tokenizer | None = None) -> list[Section]:
    """Start a new section at every title element.

    Nesting comes from element order and the title text only: a title with a
    dotted outline label (``A.1``, ``2.3.1``) nests under the closest open
    title whose label is its prefix; any other title that directly follows a
    title (no paragraph in between) nests under it; everything else is top
    level.  Paragraphs before the first title go to a ``<preamble>`` section.
    Sections without any paragraph are not emitted.
    """
    # stack of (label, path) for the currently open title chain
    stack: list[tuple[str | None, tuple[str, ...]]] = []
    groups: list[tuple[tuple[str, ...], list[str]]] = []
    current_path: tuple[str, ...] = (PREAMBLE,)
    current: list[str] = []
    last_was_title = False

    for e in elements:
        if e.kind == "paragraph":
            current.append(e.text)
            last_was_title = False
            continue
        if e.kind != "title":
            raise ValueError(f"group_sections expects paragraphs and titles only, got {e.kind!r}")
        if current:
            groups.append((current_path, current))
        current = []

        title = e.text.strip()
        label = _outline_label(title)
        parent_at = None
        if label and "." in label:
            for i in range(len(stack) - 1, -1, -1):
                plabel = stack[i][0]
                if plabel and label.startswith(plabel + "."):
                    parent_at = i
                    break
        elif last_was_title and stack:
            parent_at = len(stack) - 1

        if parent_at is None:
            path = (title,)
            stack = [(label, path)]
        else:
            path = stack[parent_at][1] + (title,)
            stack = stack[: parent_at + 1] + [(label, path)]
        current_path = path
        last_was_title = True

    if current:
        groups.append((current_path, current))

    return [
        Section.build(_section_id(doc_id, i), doc_id, path, "\n\n".join(paras), tokenizer)
        for i, (path, paras) in enumerate(groups)
    ]


# ---------------------------------------------------------------------------
# length normalization

_SENTENCE_END = re.compile(r"[.!?][\"'”’)\]]*$")

PARAGRAPH_BREAK, SENTENCE_BREAK, WORD_BREAK = 2, 1, 0


@dataclass
class _Unit:
    """Working text unit: text plus word-offset markers for title paths."""

    text: str
    words: int
    paths: list[tuple[int, tuple[str, ...]]] = field(default_factory=list)

    @property
    def title_path(self) -> tuple[str, ...]:
        return self.paths[0][1]

    def join(self, other: "_Unit") -> "_Unit":
        return _Unit(
            self.text + "\n\n" + other.text,
            self.words + other.words,
            self.paths + [(off + self.words, p) for off, p in other.paths],
        )


def _break_kinds(text: str, spans: list[tuple[int, int]]) -> list[int]:
    """kinds[i] is the quality of a cut placed before word i (i >= 1)."""
    kinds = [WORD_BREAK] * (len(spans) + 1)
    for i in range(1, len(spans)):
        gap = text[spans[i - 1][1]: spans[i][0]]
        if gap.count("\n") >= 2:
            kinds[i] = PARAGRAPH_BREAK
        elif _SENTENCE_END.search(text[spans[i - 1][0]: spans[i - 1][1]]):
            kinds[i] = SENTENCE_BREAK
    return kinds


def _plan_cuts(n: int, kinds: list[int], min_words: int, max_words: int) -> list[int]:
    """Word indices at which to cut ``n`` words into pieces of at most ``max_words``.

    Uses the fewest pieces possible; each cut is taken from the window that
    keeps the remaining pieces feasible, preferring paragraph breaks, then
    sentence breaks, then the position closest to an even split.
    """
    cuts: list[int] = []
    start, remaining = 0, n
    while remaining > max_words:
        pieces = math.ceil(remaining / max_words)
        lo = max(min_words, remaining - (pieces - 1) * max_words)
        hi = min(max_words, remaining - (pieces - 1) * min_words)
        if lo > hi:
            # min_words > max_words / 2 can make the bounds unsatisfiable
            lo, hi = max(1, remaining - (pieces - 1) * max_words), max_words
        target = remaining / pieces
        best = max(range(lo, hi + 1), key=lambda p: (kinds[start + p], -abs(p - target), -p))
        cuts.append(start + best)
        start += best
        remaining -= best
    return cuts


def _split_unit(unit: _Unit, min_words: int, max_words: int) -> list[_Unit]:
    if unit.words <= max_words:
        return [unit]
    spans = word_spans(unit.text)
    cuts = _plan_cuts(len(spans), _break_kinds(unit.text, spans), min_words, max_words)
    bounds = [0] + cuts + [len(spans)]
    out = []
    for a, b in zip(bounds, bounds[1:]):
        path = [p for off, p in unit.paths if off <= a][-1]
        markers = [(0, path)] + [(off - a, p) for off, p in unit.paths if a < off < b]
        out.append(_Unit(unit.text[spans[a][0]: spans[b - 1][1]], b - a, markers))
    return out


def _normalize_doc(units: list[_Unit], min_words: int, max_words: int) -> list[_Unit]:
    split: list[_Unit] = []
    for u in units:
        split.extend(_split_unit(u, min_words, max_words))

    out: list[_Unit] = []
    buf: _Unit | None = None
    for u in split:
        if buf is None:
            buf = u
        elif buf.words < min_words:
            merged = buf.join(u)
            if merged.words <= max_words:
                buf = merged
            else:
                pieces = _split_unit(merged, min_words, max_words)
                out.extend(pieces[:-1])
                buf = pieces[-1]
        else:
            out.append(buf)
            buf = u
    if buf is not None:
        if buf.words < min_words and out:
            # terminal remainder: fold back into the previous section
            merged = out.pop().join(buf)
            out.extend(_split_unit(merged, min_words, max_words))
        else:
            out.append(buf)
    return out


def normalize_section_lengths(sections: Sequence[Section], min_words: int = 500, max_words: int = 1000,
                              tokenizer: Tokenizer | None = None) -> list[Section]:
    """Split oversized sections and merge undersized ones, per document.

    Total word count per document is conserved.  Every output section has at
    most ``max_words`` words; a document shorter than ``min_words`` yields a
    single short section.  Applying the function twice equals applying it once.
    """
    if not 0 < min_words < max_words:
        raise ValueError(f"need 0 < min_words < max_words, got {min_words}, {max_words}")
    by_doc: OrderedDict[str, list[Section]] = OrderedDict()
    for s in sections:
        by_doc.setdefault(s.doc_id, []).append(s)

    out = []
    for doc_id, secs in by_doc.items():
        units = [_Unit(s.text, s.word_count, [(0, s.title_path)]) for s in secs if s.word_count > 0]
        for i, u in enumerate(_normalize_doc(units, min_words, max_words)):
            out.append(Section.build(_section_id(doc_id, i), doc_id, u.title_path, u.text, tokenizer))
    return out


# ---------------------------------------------------------------------------
# stats

def corpus_stats(sections: Iterable[Section], min_words: int = 500) -> CorpusStats:
    docs, n, toks, words, short = set(), 0, 0, 0, 0
    for s in sections:
        docs.add(s.doc_id)
        n += 1
        toks += s.token_count
        words += s.word_count
        short += s.word_count < min_words
    return CorpusStats(len(docs), n, toks, words, short)


# ---------------------------------------------------------------------------
# I/O

def load_document(path: str | os.PathLike) -> RawDocument:
    return RawDocument.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_documents(directory: str | os.PathLike) -> list[RawDocument]:
    """Load every ``*.json`` extraction dump in *directory* (sorted by name)."""
    docs = [load_document(p) for p in sorted(Path(directory).glob("*.json"))]
    seen = set()
    for d in docs:
        if d.doc_id in seen:
            raise ValueError(f"duplicate doc_id {d.doc_id!r} in {directory}")
        seen.add(d.doc_id)
    return docs


def write_sections(path: str | os.PathLike, sections: Iterable[Section]) -> int:
    return write_jsonl(path, (s.to_dict() for s in sections))


def read_sections(path: str | os.PathLike) -> list[Section]:
    return [Section.from_dict(obj) for _, obj in iter_jsonl(path)]


def write_stats(path: str | os.PathLike, stats: CorpusStats, **extra) -> None:
    write_json(path, {**stats.to_dict(), **extra})


class SectionSegmenter(TransformerMixin, BaseEstimator):
    """Documents in, length-normalized sections out.

    Stateless: ``fit`` only validates the parameters, so the segmenter can sit
    in a ``Pipeline`` or be cloned by model-selection utilities.
    """

    def __init__(self, min_chars=20, header_repeat_threshold=3, min_words=500, max_words=1000,
                 tokenizer=None):
        self.min_chars = min_chars
        self.header_repeat_threshold = header_repeat_threshold
        self.min_words = min_words
        self.max_words = max_words
        self.tokenizer = tokenizer

    def _check_params(self):
        if self.min_chars < 0:
            raise ValueError("min_chars must be >= 0")
        if self.header_repeat_threshold < 1:
            raise ValueError("header_repeat_threshold must be >= 1")
        if not 0 < self.min_words < self.max_words:
            raise ValueError("need 0 < min_words < max_words")

    def fit(self, X=None, y=None):
        self._check_params()
        self.policy_ = FilterPolicy(self.min_chars, self.header_repeat_threshold)
        return self

    def group(self, X: Iterable[RawDocument]) -> list[Section]:
        """Filter and group without length normalization."""
        policy = FilterPolicy(self.min_chars, self.header_repeat_threshold)
        out = []
        for doc in _as_documents(X):
            out.extend(group_sections(filter_paragraphs(doc, policy), doc.doc_id, self.tokenizer))
        return out

    def transform(self, X: Iterable[RawDocument]) -> list[Section]:
        self._check_params()
        return normalize_section_lengths(self.group(X), self.min_words, self.max_words, self.tokenizer)

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X)


def _as_documents(X) -> list[RawDocument]:
    if isinstance(X, RawDocument):
        X = [X]
    docs = [d if isinstance(d, RawDocument) else RawDocument.from_dict(d) for d in X]
    ids = [d.doc_id for d in docs]
    if len(set(ids)) != len(ids):
        raise ValueError("doc_id values must be unique within one run")
    return docs
