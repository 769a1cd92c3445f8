"""Clinical-case generation from textbook knowledge.

A generation prompt is three parts: a pre-prompt that sets up the task, a
numbered list of rules the cases must follow (the "constitution"), and a
knowledge section taken from the corpus.  Responses are requested as
structured JSON, checked, optionally repaired, and de-duplicated.
"""
from __future__ import annotations

import logging
import os
import re
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from sklearn.base import BaseEstimator, TransformerMixin

from ._io import fingerprint, iter_jsonl, write_jsonl
from .corpus import Section
from .llmclient import LLMClient, ProviderError, schema_errors

log = logging.getLogger(__name__)

DEFAULT_PRE_PROMPT = (
    "You are a French professor of medicine. You seek to test the level of medicine of your students. "
    "Your task is to generate 1 to 2 different clinical cases requiring the highest medical understanding. "
    "Each clinical case consists of an Introduction and 4-10 multiple-choice questions. "
    "They must be formatted as follows: Introduction, Propositions. "
    "Propositions contain several proposals with a justification and a field to know if they are correct.\n"
    "The clinical case needs to be very very hard and accurate. The level of difficulty is 10 out of 10. "
    "It should be very hard even for the best students. And you should have a very detailed justification.\n"
    "The case should be long with detailed questions and detailed justification."
)

DEFAULT_CONSTITUTION = (
    "The introduction is common to all questions.",
    "There must be 4-10 different questions.",
    "A question can have 5-10 possible choices.",
    "One or more proposals may be fair.",
    "Justification must be specific, justified and sourced. It is very important to have a very good and "
    "long justification. It should be at least 3 lines long.",
    "Uses the highest medical level possible.",
    "Questions must be diversified to a minimum of 4. They must deal with the patient’s disease but "
    "also with the examinations to be carried out, the follow-up and the possible developments of the case. "
    "They will make the case both nuanced and complex.",
    "The case must be precise or even quantitative. It is a question of providing as much information as "
    "possible, and the solution to the questions may be found in detail.",
    "Cases must be pedagogical and the questions must be linked to build a complete reasoning.",
    "Responses should be directed to prioritize severe and frequent cases.",
    "The student’s expected behaviour is above all to avoid medical misconduct.",
    "The student’s method must be a probabilistic approach.",
    "A language model must be able to answer questions. For example, do not ask the wizard to create "
    "images or audio.",
    "The case must be written in English.",
    "All fields must be completed.",
    "The MA for the drug and the recommendations of the HAS and ANSM must be respected. In the absence of "
    "recommendations from HAS and ANSM, the current practices recommended by French speciality colleges "
    "and learned societies will be applied.",
)

SEPARATOR = "###"
KNOWLEDGE_MARKER = "To do that you can use the following information:"

DEFAULT_LAYOUT = (
    "{{PRE_PROMPT}}\n\nThe criteria to be met are:\n\n{{CONSTITUTION}}\n\n"
    f"{SEPARATOR}\n\n{KNOWLEDGE_MARKER}\n{{{{KNOWLEDGE}}}}"
)

PLACEHOLDERS = ("{{PRE_PROMPT}}", "{{CONSTITUTION}}", "{{KNOWLEDGE}}")

MIN_QUESTIONS, MAX_QUESTIONS = 4, 10
MIN_CHOICES, MAX_CHOICES = 5, 10
REPAIR_MARKER = "(justification unavailable)"

_CHOICE_SCHEMA = {
    "type": "object",
    "required": ["text", "correct", "justification"],
    "properties": {
        "text": {"type": "string"},
        "correct": {"type": "boolean"},
        "justification": {"type": "string"},
    },
}
CASE_SCHEMA = {
    "type": "object",
    "required": ["introduction", "questions"],
    "properties": {
        "introduction": {"type": "string"},
        "questions": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["stem", "choices"],
                "properties": {
                    "stem": {"type": "string"},
                    "choices": {"type": "array", "items": _CHOICE_SCHEMA},
                },
            },
        },
    },
}
RESPONSE_SCHEMA = {
    "type": "object",
    "required": ["cases"],
    "properties": {"cases": {"type": "array", "minItems": 1, "maxItems": 2, "items": CASE_SCHEMA}},
}


class EmptySection(ValueError):
    pass


# ---------------------------------------------------------------------------
# prompt

@dataclass(frozen=True)
class PromptTemplate:
    pre_prompt: str = DEFAULT_PRE_PROMPT
    constitution: tuple[str, ...] = DEFAULT_CONSTITUTION
    layout: str = DEFAULT_LAYOUT

    def __post_init__(self):
        object.__setattr__(self, "constitution", tuple(self.constitution))
        if "{{KNOWLEDGE}}" not in self.layout:
            raise ValueError("template layout must contain {{KNOWLEDGE}}")
        positions = [self.layout.find(p) for p in PLACEHOLDERS if p in self.layout]
        if positions != sorted(positions):
            raise ValueError("placeholders must appear in PRE_PROMPT, CONSTITUTION, KNOWLEDGE order")

    @classmethod
    def from_file(cls, path: str | os.PathLike, pre_prompt: str | None = None,
                  constitution: Sequence[str] | None = None) -> "PromptTemplate":
        return cls(
            pre_prompt if pre_prompt is not None else DEFAULT_PRE_PROMPT,
            tuple(constitution) if constitution is not None else DEFAULT_CONSTITUTION,
            Path(path).read_text(encoding="utf-8"),
        )

    @property
    def template_hash(self) -> str:
        return fingerprint([self.pre_prompt, list(self.constitution), self.layout])

    def numbered_rules(self) -> str:
        return "\n\n".join(f"{i}. {rule}" for i, rule in enumerate(self.constitution, start=1))


@dataclass(frozen=True)
class GenerationPrompt:
    pre_prompt: str
    constitution: tuple[str, ...]
    knowledge: str
    rendered: str
    section_id: str = ""


def build_generation_prompt(section: Section, template: PromptTemplate | None = None) -> GenerationPrompt:
    template = template or PromptTemplate()
    if not section.text.strip():
        raise EmptySection(f"section {section.section_id!r} has no text")
    rendered = (
        template.layout.replace("{{PRE_PROMPT}}", template.pre_prompt)
        .replace("{{CONSTITUTION}}", template.numbered_rules())
        .replace("{{KNOWLEDGE}}", section.text)
    )
    return GenerationPrompt(template.pre_prompt, template.constitution, section.text, rendered, section.section_id)


# ---------------------------------------------------------------------------
# case model

@dataclass(frozen=True)
class GeneratedChoice:
    text: str
    correct: bool
    justification: str


@dataclass(frozen=True)
class GeneratedQuestion:
    stem: str
    choices: tuple[GeneratedChoice, ...]


@dataclass(frozen=True)
class GeneratedCase:
    case_id: str
    source_section_id: str
    introduction: str
    questions: tuple[GeneratedQuestion, ...]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["questions"] = [
            {"stem": q.stem, "choices": [asdict(c) for c in q.choices]} for q in self.questions
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict, case_id: str | None = None, source_section_id: str | None = None) -> "GeneratedCase":
        return cls(
            case_id=case_id if case_id is not None else str(d.get("case_id", "")),
            source_section_id=source_section_id if source_section_id is not None
            else str(d.get("source_section_id", "")),
            introduction=str(d.get("introduction") or ""),
            questions=tuple(
                GeneratedQuestion(
                    str(q.get("stem") or ""),
                    tuple(
                        GeneratedChoice(str(c.get("text") or ""), bool(c.get("correct")),
                                        str(c.get("justification") or ""))
                        for c in q.get("choices") or ()
                    ),
                )
                for q in d.get("questions") or ()
            ),
        )


@dataclass(frozen=True)
class Defect:
    code: str
    path: str


@dataclass(frozen=True)
class DefectReport:
    case_id: str
    defects: tuple[Defect, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.defects

    @property
    def codes(self) -> list[str]:
        return [d.code for d in self.defects]

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, "defects": [asdict(d) for d in self.defects]}

    @classmethod
    def from_dict(cls, d: dict) -> "DefectReport":
        return cls(d["case_id"], tuple(Defect(x["code"], x["path"]) for x in d.get("defects", [])))


def validate_case(case: GeneratedCase) -> DefectReport:
    """Structural checks, reported in a fixed order with stable codes."""
    defects: list[Defect] = []
    if not MIN_QUESTIONS <= len(case.questions) <= MAX_QUESTIONS:
        defects.append(Defect("question_count", "/questions"))
    for i, q in enumerate(case.questions):
        if not MIN_CHOICES <= len(q.choices) <= MAX_CHOICES:
            defects.append(Defect("choice_count", f"/questions/{i}/choices"))
    for i, q in enumerate(case.questions):
        if not any(c.correct for c in q.choices):
            defects.append(Defect("no_correct_choice", f"/questions/{i}/choices"))
    if not case.introduction.strip():
        defects.append(Defect("empty_field", "/introduction"))
    for i, q in enumerate(case.questions):
        if not q.stem.strip():
            defects.append(Defect("empty_field", f"/questions/{i}/stem"))
        for j, c in enumerate(q.choices):
            if not c.text.strip():
                defects.append(Defect("empty_field", f"/questions/{i}/choices/{j}/text"))
            if not c.justification.strip():
                defects.append(Defect("empty_field", f"/questions/{i}/choices/{j}/justification"))
    return DefectReport(case.case_id, tuple(defects))


_JUSTIFICATION_PATH = re.compile(r"^/questions/\d+/choices/\d+/justification$")


def repairable(report: DefectReport) -> bool:
    return bool(report.defects) and all(
        d.code == "empty_field" and _JUSTIFICATION_PATH.match(d.path) for d in report.defects
    )


def repair_case(case: GeneratedCase) -> GeneratedCase:
    """Fill empty justifications with a visible marker."""
    return GeneratedCase(
        case.case_id,
        case.source_section_id,
        case.introduction,
        tuple(
            GeneratedQuestion(q.stem, tuple(
                c if c.justification.strip() else GeneratedChoice(c.text, c.correct, REPAIR_MARKER)
                for c in q.choices
            ))
            for q in case.questions
        ),
    )


# ---------------------------------------------------------------------------
# response normalization

_ALIASES = {
    "introduction": ("intro", "Introduction", "clinical_case", "case_introduction", "context"),
    "questions": ("Questions", "question_list", "items"),
    "stem": ("question", "Question", "prompt", "statement"),
    "choices": ("propositions", "Propositions", "proposals", "options", "answers"),
    "text": ("proposition", "proposal", "option", "answer", "choice"),
    "correct": ("is_correct", "isCorrect", "right", "is_true"),
    "justification": ("explanation", "Justification", "rationale", "reason"),
}


def _rename(obj: dict, canonical: Iterable[str]) -> dict:
    out = dict(obj)
    for name in canonical:
        if name not in out:
            for alt in _ALIASES[name]:
                if alt in out:
                    out[name] = out.pop(alt)
                    break
    return out


def _as_flag(v):
    if isinstance(v, str) and v.strip().lower() in ("true", "false", "yes", "no"):
        return v.strip().lower() in ("true", "yes")
    return v


def normalize_response(doc) -> dict | None:
    """Map alternative field names and shapes onto the case schema.

    Returns ``None`` when the document is not even roughly case-shaped.
    """
    if isinstance(doc, list):
        doc = {"cases": doc}
    if not isinstance(doc, dict):
        return None
    if "cases" not in doc:
        for alt in ("clinical_cases", "Cases", "data"):
            if alt in doc:
                doc = {"cases": doc[alt]}
                break
        else:
            doc = {"cases": [doc]}
    cases = doc["cases"]
    if isinstance(cases, dict):
        cases = [cases]
    if not isinstance(cases, list):
        return None
    fixed = []
    for case in cases:
        if not isinstance(case, dict):
            return None
        case = _rename(case, ("introduction", "questions"))
        qs = []
        for q in case.get("questions") or []:
            if not isinstance(q, dict):
                return None
            q = _rename(q, ("stem", "choices"))
            chs = []
            for c in q.get("choices") or []:
                if not isinstance(c, dict):
                    return None
                c = _rename(c, ("text", "correct", "justification"))
                if "correct" in c:
                    c["correct"] = _as_flag(c["correct"])
                chs.append(c)
            q["choices"] = chs
            qs.append(q)
        case["questions"] = qs
        fixed.append(case)
    return {**{k: v for k, v in doc.items() if k != "cases"}, "cases": fixed}


# ---------------------------------------------------------------------------
# generation

@dataclass
class GenerationResult:
    cases: list[GeneratedCase]
    defects: list[DefectReport]
    attempts: int
    status: str  # ok | blocked | parse_error

    def __iter__(self):
        # allows ``cases, defects = generate_cases(...)``
        return iter((self.cases, self.defects))


def generate_cases(prompt: GenerationPrompt, client: LLMClient, max_retries: int = 2,
                   temperature: float = 1.0, max_tokens: int = 4096) -> GenerationResult:
    """Request 1-2 cases for one prompt.

    Malformed responses are first normalized (renamed fields, string
    booleans); if still invalid the same prompt is re-sent, at most
    ``max_retries`` more times.  Blocked prompts yield no cases and a
    ``blocked`` defect report; provider errors propagate.
    """
    req = client.request(prompt.rendered, temperature=temperature, max_tokens=max_tokens,
                         response_schema=RESPONSE_SCHEMA)
    sid = prompt.section_id
    last_errors: tuple[str, ...] = ("",)
    for attempt in range(1, max_retries + 2):
        out = client.generate_structured(req)
        if out.status == "blocked":
            return GenerationResult([], [DefectReport(sid, (Defect("blocked", ""),))], attempt, "blocked")
        if out.status == "provider_error":
            raise ProviderError(f"generation failed for section {sid!r}", code=out.provider_code)
        doc = out.structured
        if out.status == "parse_error":
            doc = normalize_response(doc) if doc is not None else None
            errs = schema_errors(RESPONSE_SCHEMA, doc) if doc is not None else [""]
            if errs:
                last_errors = tuple(errs)
                log.info("section %s: malformed response (attempt %d): %s", sid, attempt, errs[:3])
                continue
        cases = [
            GeneratedCase.from_dict(c, case_id=f"{sid}#{k}", source_section_id=sid)
            for k, c in enumerate(doc["cases"])
        ]
        return GenerationResult(cases, [], attempt, "ok")
    defects = tuple(Defect("parse_error", p) for p in last_errors)
    return GenerationResult([], [DefectReport(sid, defects)], max_retries + 1, "parse_error")


def round_robin(sections: Sequence[Section]) -> list[Section]:
    """Interleave documents: first section of each doc, then the second, ..."""
    by_doc: OrderedDict[str, list[Section]] = OrderedDict()
    for s in sections:
        by_doc.setdefault(s.doc_id, []).append(s)
    queues = list(by_doc.values())
    out = []
    depth = max((len(q) for q in queues), default=0)
    for i in range(depth):
        out.extend(q[i] for q in queues if i < len(q))
    return out


# ---------------------------------------------------------------------------
# de-duplication

def word_ngrams(text: str, n: int = 3) -> frozenset[tuple[str, ...]]:
    words = text.lower().split()
    if len(words) < n:
        return frozenset([tuple(words)]) if words else frozenset()
    return frozenset(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def dedupe_cases(cases: Sequence[GeneratedCase], threshold: float = 0.8, n: int = 3) -> list[GeneratedCase]:
    """Greedy in input order: drop a case whose introduction is too close to a kept one."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    kept: list[tuple[GeneratedCase, frozenset]] = []
    for case in cases:
        grams = word_ngrams(case.introduction, n)
        if all(jaccard(grams, g) < threshold for _, g in kept):
            kept.append((case, grams))
    return [c for c, _ in kept]


class CaseDeduplicator(TransformerMixin, BaseEstimator):
    def __init__(self, threshold=0.8, ngram=3):
        self.threshold = threshold
        self.ngram = ngram

    def fit(self, X=None, y=None):
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must be in (0, 1]")
        if self.ngram < 1:
            raise ValueError("ngram must be >= 1")
        return self

    def transform(self, X: Sequence[GeneratedCase]) -> list[GeneratedCase]:
        return dedupe_cases(list(X), self.threshold, self.ngram)


@dataclass
class FilterSummary:
    kept: list[GeneratedCase]
    defect_reports: list[DefectReport] = field(default_factory=list)
    dropped_defect: list[str] = field(default_factory=list)
    dropped_duplicate: list[str] = field(default_factory=list)
    repaired: list[str] = field(default_factory=list)

    @property
    def counts(self) -> dict:
        return {
            "generated": len(self.kept) + len(self.dropped_defect) + len(self.dropped_duplicate),
            "kept": len(self.kept),
            "dropped_defect": len(self.dropped_defect),
            "dropped_duplicate": len(self.dropped_duplicate),
            "repaired": len(self.repaired),
        }


def filter_cases(cases: Sequence[GeneratedCase], repair: bool = False, threshold: float = 0.8) -> FilterSummary:
    """validate -> optional repair -> dedupe; every input lands in exactly one bucket."""
    summary = FilterSummary(kept=[])
    valid = []
    for case in cases:
        report = validate_case(case)
        if report.valid:
            valid.append(case)
            continue
        if repair and repairable(report):
            summary.repaired.append(case.case_id)
            valid.append(repair_case(case))
            continue
        summary.defect_reports.append(report)
        summary.dropped_defect.append(case.case_id)
    summary.kept = dedupe_cases(valid, threshold)
    kept_ids = {c.case_id for c in summary.kept}
    summary.dropped_duplicate = [c.case_id for c in valid if c.case_id not in kept_ids]
    return summary


def read_cases(path: str | os.PathLike) -> list[GeneratedCase]:
    return [GeneratedCase.from_dict(obj) for _, obj in iter_jsonl(path)]


def write_cases(path: str | os.PathLike, cases: Iterable[GeneratedCase]) -> int:
    return write_jsonl(path, (c.to_dict() for c in cases))
