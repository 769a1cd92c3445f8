"""Training-corpus exports.

Three record kinds: plain pre-training text (one record per section),
generated cases rendered to one training text with token-level loss spans on
the answer and justification, and true/false classification records.
Loss spans are token indices under the exporter's tokenizer, whose name is
written into the manifest.
"""
from __future__ import annotations

import bisect
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ._io import write_json, write_jsonl
from .corpus import Section
from .generator import GeneratedCase, GeneratedQuestion
from .qadata import DEFAULT_CONTEXT_POLICY, ContextPolicy, Dataset, render_statement, to_eval_items
from .tokenization import DEFAULT_TOKENIZER, Tokenizer

DEFAULT_CONTEXT_LIMIT = 2048

# recommended-training metadata only; nothing here trains a model
RECOMMENDED_TRAINING = {
    "pretrain": {"epochs": 3, "learning_rate": 1e-4},
    "case_sft": {"epochs": 2, "learning_rate": 1e-4},
    "classification": {"epochs": 20, "learning_rate": 2e-6},
}


@dataclass(frozen=True)
class PretrainRecord:
    record_id: str
    text: str

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SFTRecord:
    record_id: str
    text: str
    loss_spans: tuple[tuple[int, int], ...]
    truncated: bool
    token_count: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_spans"] = [list(s) for s in self.loss_spans]
        return d


@dataclass(frozen=True)
class ClsRecord:
    record_id: str
    context: str
    proposition: str
    label: bool
    variant_true: str
    variant_false: str

    def to_dict(self) -> dict:
        return asdict(self)


def manifest(kind: str, tokenizer: Tokenizer | None, counts: dict, context_limit: int | None = None,
             epochs: int | None = None, **extra) -> dict:
    rec = dict(RECOMMENDED_TRAINING[kind])
    if epochs is not None:
        rec["epochs"] = epochs
    return {
        "kind": kind,
        "tokenizer_name": (tokenizer or DEFAULT_TOKENIZER).name,
        "context_limit": context_limit,
        "epochs": rec["epochs"],
        "recommended_training": rec,
        "counts": counts,
        **extra,
    }


# ---------------------------------------------------------------------------
# pre-training

def export_pretrain(sections: Iterable[Section], epochs: int = 3,
                    tokenizer: Tokenizer | None = None) -> tuple[list[PretrainRecord], dict]:
    """One record per section, text untouched, ordered by (doc_id, section index).

    ``epochs`` is recorded in the manifest; records are not repeated.
    """
    ordered = sorted(sections, key=lambda s: (s.doc_id, s.index))
    records = [PretrainRecord(s.section_id, s.text) for s in ordered]
    tokens = sum(s.token_count for s in ordered)
    return records, manifest("pretrain", tokenizer, {"records": len(records), "tokens": tokens}, epochs=epochs)


# ---------------------------------------------------------------------------
# generated cases

def _render_question(n: int, q: GeneratedQuestion, include_choice_text: bool,
                     parts: list[str], spans: list[tuple[int, int]], pos: int) -> int:
    """Append one question's text to *parts*; record target char spans; return new position."""

    def add(s: str, target: bool = False) -> None:
        nonlocal pos
        if target and s:
            spans.append((pos, pos + len(s)))
        parts.append(s)
        pos += len(s)

    add(f"Question {n}: {q.stem.strip()}\n")
    for c in q.choices:
        add("- ")
        add(c.text.strip(), include_choice_text)
        add("\nAnswer: ")
        add("true" if c.correct else "false", True)
        add(". Justification: ")
        add(c.justification.strip(), True)
        add("\n")
    return pos


def render_case(case: GeneratedCase, include_choice_text: bool = False,
                n_questions: int | None = None) -> tuple[str, list[tuple[int, int]]]:
    """Training text for *case* plus the character spans that carry the loss.

    Targets are each choice's correctness word and justification (and the
    choice text itself when ``include_choice_text``).
    """
    parts: list[str] = []
    spans: list[tuple[int, int]] = []
    head = f"Introduction:\n{case.introduction.strip()}\n\n"
    parts.append(head)
    pos = len(head)
    qs = case.questions if n_questions is None else case.questions[:n_questions]
    for n, q in enumerate(qs, start=1):
        pos = _render_question(n, q, include_choice_text, parts, spans, pos)
    return "".join(parts), spans


def char_spans_to_token_spans(offsets: Sequence[tuple[int, int]],
                              char_spans: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    """Token index ranges ``[start, end)`` covering each character span.

    A token belongs to a span when it overlaps it; with a tokenizer whose
    boundaries fall on the span edges this is an exact cover.
    """
    out = []
    starts = [s for s, _ in offsets]
    for a, b in char_spans:
        i = bisect.bisect_right(starts, a) - 1
        if i < 0 or offsets[i][1] <= a:
            i += 1
        j = bisect.bisect_left(starts, b)
        if i < j:
            out.append((i, j))
    return out


def _clip(spans: Iterable[tuple[int, int]], limit: int) -> tuple[tuple[int, int], ...]:
    return tuple((s, min(e, limit)) for s, e in spans if s < limit)


def case_to_sft(case: GeneratedCase, context_limit: int = DEFAULT_CONTEXT_LIMIT,
                tokenizer: Tokenizer | None = None, include_choice_text: bool = False,
                drop_tail_questions: bool = False) -> SFTRecord:
    tok = tokenizer or DEFAULT_TOKENIZER
    text, char_spans = render_case(case, include_choice_text)
    offsets = tok.offsets(text)

    if len(offsets) > context_limit and drop_tail_questions:
        for n in range(len(case.questions) - 1, 0, -1):
            t2, c2 = render_case(case, include_choice_text, n)
            o2 = tok.offsets(t2)
            if len(o2) <= context_limit:
                return SFTRecord(case.case_id, t2, tuple(char_spans_to_token_spans(o2, c2)), True, len(o2))

    spans = char_spans_to_token_spans(offsets, char_spans)
    if len(offsets) <= context_limit:
        return SFTRecord(case.case_id, text, tuple(spans), False, len(offsets))
    cut = offsets[context_limit - 1][1]
    return SFTRecord(case.case_id, text[:cut], _clip(spans, context_limit), True, context_limit)


def export_case_sft(cases: Iterable[GeneratedCase], context_limit: int = DEFAULT_CONTEXT_LIMIT,
                    tokenizer: Tokenizer | None = None, include_choice_text: bool = False,
                    drop_tail_questions: bool = False) -> tuple[list[SFTRecord], dict]:
    """One loss-masked record per case, truncated to ``context_limit`` tokens.

    By default truncation drops trailing tokens; ``drop_tail_questions``
    instead removes whole trailing questions until the case fits (falling
    back to token truncation when even one question is too long).
    """
    records = [case_to_sft(c, context_limit, tokenizer, include_choice_text, drop_tail_questions) for c in cases]
    counts = {
        "records": len(records),
        "truncated": sum(r.truncated for r in records),
        "tokens": sum(r.token_count for r in records),
        "loss_tokens": sum(e - s for r in records for s, e in r.loss_spans),
    }
    return records, manifest("case_sft", tokenizer, counts, context_limit,
                             include_choice_text=include_choice_text, drop_tail_questions=drop_tail_questions)


# ---------------------------------------------------------------------------
# classification

def export_classification(ds: Dataset, policy: ContextPolicy | str = DEFAULT_CONTEXT_POLICY,
                          candidates: tuple[str, str] = (" true", " false")) -> tuple[list[ClsRecord], dict]:
    records = []
    for it in to_eval_items(ds, policy):
        statement = render_statement(it.context, it.proposition_text)
        records.append(ClsRecord(it.item_id, it.context, it.proposition_text, it.gold,
                                 statement + candidates[0], statement + candidates[1]))
    counts = {"records": len(records), "questions": ds.question_count,
              "positive": sum(r.label for r in records)}
    return records, manifest("classification", None, counts, context_policy=ContextPolicy(policy).value)


def write_export(directory: str | os.PathLike, kind: str, records: Sequence, meta: dict) -> tuple[str, str]:
    directory = Path(directory)
    data_path = directory / f"{kind}.jsonl"
    write_jsonl(data_path, (r.to_dict() for r in records))
    write_json(directory / f"{kind}.manifest.json", meta)
    return str(data_path), str(directory / f"{kind}.manifest.json")
