"""Individual / progressive question datasets.

Individual questions (IQ) are a stem with five labeled propositions, one to
five of them correct.  A progressive case (PQ) is an introduction followed by
ordered sub-questions of the same shape that build on each other.
"""
from __future__ import annotations

import enum
import json
import math
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from ._io import dumps_line

LABELS = ("a", "b", "c", "d", "e")
ORIGINS = ("historical", "custom", "generated")
UNKNOWN_SUBJECT = "unknown"


class ContextPolicy(str, enum.Enum):
    STEM_ONLY = "stem_only"
    INTRO_PLUS_STEMS = "intro_plus_stems"
    INTRO_STEMS_AND_GOLD = "intro_stems_and_gold"


DEFAULT_CONTEXT_POLICY = ContextPolicy.INTRO_STEMS_AND_GOLD


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class InvariantError(ValueError):
    """A record parsed but breaks a dataset rule (``rule`` is a stable code)."""

    def __init__(self, rule: str, record_id: str | None, message: str = "", line: int | None = None):
        self.rule = rule
        self.record_id = record_id
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{rule}: record {record_id!r}{where}{': ' + message if message else ''}")


class EmptyDataset(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


@dataclass(frozen=True)
class Proposition:
    label: str
    text: str
    correct: bool


@dataclass(frozen=True)
class Question:
    id: str
    stem: str
    propositions: tuple[Proposition, ...]
    subject: str = UNKNOWN_SUBJECT
    origin: str = "historical"

    def __post_init__(self):
        _check_question(self)

    @property
    def gold(self) -> list[bool]:
        return [p.correct for p in self.propositions]

    @property
    def correct_texts(self) -> list[str]:
        return [p.text for p in self.propositions if p.correct]


@dataclass(frozen=True)
class ProgressiveCase:
    case_id: str
    introduction: str
    questions: tuple[Question, ...]

    def __post_init__(self):
        if not self.introduction.strip():
            raise InvariantError("empty_introduction", self.case_id)
        if not self.questions:
            raise InvariantError("empty_case", self.case_id, "a progressive case needs at least one question")


@dataclass(frozen=True)
class Dataset:
    iq: tuple[Question, ...] = ()
    pq: tuple[ProgressiveCase, ...] = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        seen: set[str] = set()
        for rid in self._all_ids():
            if rid in seen:
                raise InvariantError("duplicate_id", rid)
            seen.add(rid)

    def _all_ids(self) -> Iterator[str]:
        for q in self.iq:
            yield q.id
        for case in self.pq:
            yield case.case_id
            for q in case.questions:
                yield q.id

    @property
    def question_count(self) -> int:
        return len(self.iq) + sum(len(c.questions) for c in self.pq)

    def __len__(self) -> int:
        return self.question_count


@dataclass(frozen=True)
class EvalItem:
    item_id: str
    context: str
    proposition_text: str
    gold: bool
    subject: str
    question_id: str
    proposition_label: str


def _check_question(q: Question) -> None:
    if len(q.propositions) != 5:
        raise InvariantError("proposition_count", q.id, f"expected 5 propositions, got {len(q.propositions)}")
    labels = [p.label for p in q.propositions]
    if sorted(labels) != list(LABELS):
        raise InvariantError("proposition_labels", q.id, f"labels must be a..e once each, got {labels}")
    if any(not p.text.strip() for p in q.propositions):
        raise InvariantError("empty_proposition", q.id)
    if not any(p.correct for p in q.propositions):
        raise InvariantError("correct_count", q.id, "at least one proposition must be correct")
    if not q.stem.strip():
        raise InvariantError("empty_stem", q.id)
    if q.origin not in ORIGINS:
        raise InvariantError("origin", q.id, f"origin must be one of {ORIGINS}")


# ---------------------------------------------------------------------------
# (de)serialization

def _question_from_obj(obj: dict, line: int | None) -> Question:
    try:
        qid = str(obj["id"])
        props = tuple(
            Proposition(str(p["label"]).lower(), str(p["text"]), _as_bool(p["correct"]))
            for p in obj["propositions"]
        )
        # ordering by label keeps a..e order whatever the file order was
        props = tuple(sorted(props, key=lambda p: p.label))
        return Question(
            id=qid,
            stem=str(obj["stem"]),
            propositions=props,
            subject=str(obj.get("subject") or UNKNOWN_SUBJECT),
            origin=str(obj.get("origin") or "historical"),
        )
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]!r}", line) from None
    except InvariantError as exc:
        raise InvariantError(exc.rule, exc.record_id, line=line) from None
    except (TypeError, AttributeError) as exc:
        raise ParseError(f"malformed question record: {exc}", line) from None


def _as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    raise TypeError(f"'correct' must be a boolean, got {v!r}")


def question_to_obj(q: Question, index: int | None = None) -> dict:
    obj = {
        "id": q.id,
        "type": "IQ",
        "subject": q.subject,
        "origin": q.origin,
        "stem": q.stem,
        "propositions": [{"label": p.label, "text": p.text, "correct": p.correct} for p in q.propositions],
    }
    if index is not None:
        obj["index"] = index
    return obj


def case_to_obj(case: ProgressiveCase) -> dict:
    return {
        "case_id": case.case_id,
        "type": "PQ",
        "introduction": case.introduction,
        "questions": [question_to_obj(q, i) for i, q in enumerate(case.questions)],
    }


def iter_records(ds: Dataset) -> Iterator[dict]:
    if ds.metadata:
        yield {"type": "META", "metadata": dict(ds.metadata)}
    for q in ds.iq:
        yield question_to_obj(q)
    for c in ds.pq:
        yield case_to_obj(c)


def serialize(ds: Dataset) -> str:
    return "".join(dumps_line(r) for r in iter_records(ds))


def parse_records(lines: Iterable[str]) -> Dataset:
    iq: list[Question] = []
    pq: list[ProgressiveCase] = []
    meta: dict = {}
    where: dict[str, int] = {}

    def claim(rid: str, line: int):
        if rid in where:
            raise InvariantError("duplicate_id", rid, f"first seen on line {where[rid]}", line)
        where[rid] = line

    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
        if not isinstance(obj, dict):
            raise ParseError("record must be a JSON object", lineno)
        kind = obj.get("type", "IQ")
        if kind == "META":
            meta.update({str(k): str(v) for k, v in obj.get("metadata", {}).items()})
        elif kind == "IQ":
            q = _question_from_obj(obj, lineno)
            claim(q.id, lineno)
            iq.append(q)
        elif kind == "PQ":
            try:
                case_id = str(obj["case_id"])
                raw_qs = sorted(enumerate(obj["questions"]), key=lambda t: (t[1].get("index", t[0]), t[0]))
                intro = str(obj["introduction"])
            except KeyError as exc:
                raise ParseError(f"missing field {exc.args[0]!r}", lineno) from None
            claim(case_id, lineno)
            questions = tuple(_question_from_obj(qo, lineno) for _, qo in raw_qs)
            for q in questions:
                claim(q.id, lineno)
            try:
                pq.append(ProgressiveCase(case_id, intro, questions))
            except InvariantError as exc:
                raise InvariantError(exc.rule, exc.record_id, line=lineno) from None
        else:
            raise ParseError(f"unknown record type {kind!r}", lineno)
    return Dataset(tuple(iq), tuple(pq), meta)


def parse_dataset(path: str | os.PathLike) -> Dataset:
    """Read and fully validate a JSONL dataset file."""
    with open(path, encoding="utf-8") as fh:
        return parse_records(fh)


def write_dataset(path: str | os.PathLike, ds: Dataset) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(ds))


# ---------------------------------------------------------------------------
# splitting

def _pick_test(n: int, test_fraction: float, rng: random.Random) -> set[int]:
    k = math.floor(test_fraction * n + 0.5)
    return set(rng.sample(range(n), k))


def split_dataset(ds: Dataset, test_fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded train/test split; progressive cases move as a whole.

    Each pool (IQ questions, PQ cases) contributes ``round(test_fraction * n)``
    units to the test side.  Both sides keep the original relative order.
    """
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    if not ds.iq and not ds.pq:
        raise EmptyDataset("cannot split an empty dataset")
    rng = random.Random(seed)
    iq_test = _pick_test(len(ds.iq), test_fraction, rng)
    pq_test = _pick_test(len(ds.pq), test_fraction, rng)
    meta = dict(ds.metadata)
    train = Dataset(
        tuple(q for i, q in enumerate(ds.iq) if i not in iq_test),
        tuple(c for i, c in enumerate(ds.pq) if i not in pq_test),
        {**meta, "split": "train", "split_seed": str(seed)},
    )
    test = Dataset(
        tuple(q for i, q in enumerate(ds.iq) if i in iq_test),
        tuple(c for i, c in enumerate(ds.pq) if i in pq_test),
        {**meta, "split": "test", "split_seed": str(seed)},
    )
    return train, test


# ---------------------------------------------------------------------------
# context assembly

BLOCK_SEP = "\n\n"


def render_answer(question: Question) -> str:
    return "Answer: " + "; ".join(question.correct_texts)


def assemble_context(case: ProgressiveCase, index: int,
                     policy: ContextPolicy | str = DEFAULT_CONTEXT_POLICY) -> str:
    policy = ContextPolicy(policy)
    if not 0 <= index < len(case.questions):
        raise IndexOutOfRange(f"question index {index} out of range for case {case.case_id!r}")
    current = case.questions[index].stem
    if policy is ContextPolicy.STEM_ONLY:
        return current
    blocks = [case.introduction]
    for prior in case.questions[:index]:
        blocks.append(prior.stem)
        if policy is ContextPolicy.INTRO_STEMS_AND_GOLD:
            blocks.append(render_answer(prior))
    blocks.append(current)
    return BLOCK_SEP.join(blocks)


def render_statement(context: str, proposition: str) -> str:
    """Context followed by one proposition; continuation scoring appends to this."""
    return f"{context}{BLOCK_SEP}{proposition}"


def _items_for(q: Question, context: str) -> Iterator[EvalItem]:
    for p in q.propositions:
        yield EvalItem(
            item_id=f"{q.id}:{p.label}",
            context=context,
            proposition_text=p.text,
            gold=p.correct,
            subject=q.subject,
            question_id=q.id,
            proposition_label=p.label,
        )


def to_eval_items(ds: Dataset, policy: ContextPolicy | str = DEFAULT_CONTEXT_POLICY) -> list[EvalItem]:
    """Five items per question, dataset order then label order a..e."""
    policy = ContextPolicy(policy)
    items: list[EvalItem] = []
    for q in ds.iq:
        items.extend(_items_for(q, q.stem))
    for case in ds.pq:
        for i, q in enumerate(case.questions):
            items.extend(_items_for(q, assemble_context(case, i, policy)))
    return items
