"""Per-proposition evaluation of model endpoints.

Every proposition is judged on its own (true/false).  A question scores the
fraction of its five propositions judged correctly, so question scores only
take the values 0, 0.2, ..., 1.0; overall accuracy is their mean.
"""
from __future__ import annotations

import csv
import enum
import io
import logging
import random
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from ._io import canonical_json, fingerprint
from .llmclient import ChatRequest, ContentFiltered, LLMClient, ProviderError
from .qadata import DEFAULT_CONTEXT_POLICY, ContextPolicy, EvalItem, render_statement

log = logging.getLogger(__name__)

SCORE_BINS = ("0.0", "0.2", "0.4", "0.6", "0.8", "1.0")
INSTRUCTION = "Answer with exactly one word: true or false."
DEFAULT_EVAL_TEMPLATE = "{context}\n\nProposition: {proposition}\n\n" + INSTRUCTION
CANDIDATES = (" true", " false")

_BINARY = re.compile(r"\b(true|false)\b", re.IGNORECASE)


class Evaluator(str, enum.Enum):
    ZERO_SHOT = "zero_shot"
    FEW_SHOT = "few_shot"
    CONTINUATION = "continuation"


class LengthMismatch(ValueError):
    pass


class ExemplarLeak(ValueError):
    pass


class CoverageError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    item_id: str
    predicted: bool | None
    status: str  # ok | blocked | unparseable
    raw: str = ""
    latency_ms: int = 0

    def __post_init__(self):
        if self.status not in ("ok", "blocked", "unparseable"):
            raise ValueError(f"unknown status {self.status!r}")
        if (self.status == "ok") != (self.predicted is not None):
            raise ValueError("predicted must be present exactly when status is ok")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionRecord":
        return cls(d["item_id"], d["predicted"], d["status"], d.get("raw", ""), int(d.get("latency_ms", 0)))


@dataclass(frozen=True)
class QuestionScore:
    question_id: str
    matches: int

    def __post_init__(self):
        if not 0 <= self.matches <= 5:
            raise ValueError("matches must be in [0, 5]")

    @property
    def score(self) -> float:
        return self.matches / 5

    @property
    def bin(self) -> str:
        return SCORE_BINS[self.matches]


@dataclass
class EvalReport:
    overall_accuracy: float
    histogram: dict[str, int]
    per_subject: dict[str, float]
    config_fingerprint: str
    records: list[PredictionRecord]
    question_scores: list[QuestionScore] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "histogram": dict(self.histogram),
            "per_subject": dict(self.per_subject),
            "config_fingerprint": self.config_fingerprint,
            "config": dict(self.config),
            "question_count": len(self.question_scores),
            "question_scores": [
                {"question_id": q.question_id, "matches": q.matches, "score": q.score}
                for q in self.question_scores
            ],
            # latency stays in the journal; it would break byte-identical reports
            "records": [{k: v for k, v in r.to_dict().items() if k != "latency_ms"} for r in self.records],
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            d["overall_accuracy"], d["histogram"], d["per_subject"], d["config_fingerprint"],
            [PredictionRecord.from_dict(r) for r in d.get("records", [])],
            [QuestionScore(q["question_id"], q["matches"]) for q in d.get("question_scores", [])],
            d.get("config", {}),
        )

    def histogram_csv(self) -> str:
        return _csv([("key", "count")] + [(k, self.histogram[k]) for k in SCORE_BINS])

    def per_subject_csv(self) -> str:
        return _csv([("key", "accuracy")] + sorted(self.per_subject.items()))


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# scoring

def score_question(predicted: Sequence[bool | None], gold: Sequence[bool], question_id: str = "") -> QuestionScore:
    """A proposition matches when a prediction exists and equals the gold flag."""
    if len(predicted) != 5 or len(gold) != 5:
        raise LengthMismatch(f"expected 5 predictions and 5 gold labels, got {len(predicted)} and {len(gold)}")
    matches = sum(1 for p, g in zip(predicted, gold) if p is not None and p == g)
    return QuestionScore(question_id, matches)


def aggregate(records: Iterable[PredictionRecord], items: Sequence[EvalItem],
              config_fingerprint: str = "", config: dict | None = None) -> EvalReport:
    by_id: dict[str, PredictionRecord] = {}
    for r in records:
        if r.item_id in by_id:
            raise CoverageError(f"duplicate record for item {r.item_id!r}")
        by_id[r.item_id] = r
    missing = [it.item_id for it in items if it.item_id not in by_id]
    if missing:
        raise CoverageError(f"{len(missing)} items have no record, e.g. {missing[0]!r}")

    grouped: dict[str, list[EvalItem]] = defaultdict(list)
    for it in items:
        grouped[it.question_id].append(it)

    scores: list[QuestionScore] = []
    subject_of: dict[str, str] = {}
    for qid, qitems in grouped.items():
        qitems = sorted(qitems, key=lambda it: it.proposition_label)
        scores.append(score_question([by_id[it.item_id].predicted for it in qitems],
                                     [it.gold for it in qitems], qid))
        subject_of[qid] = qitems[0].subject

    histogram = {b: 0 for b in SCORE_BINS}
    subj_matches: dict[str, int] = defaultdict(int)
    subj_n: dict[str, int] = defaultdict(int)
    for s in scores:
        histogram[s.bin] += 1
        subj_matches[subject_of[s.question_id]] += s.matches
        subj_n[subject_of[s.question_id]] += 1

    total = sum(s.matches for s in scores)
    overall = total / (5 * len(scores)) if scores else 0.0
    per_subject = {k: subj_matches[k] / (5 * subj_n[k]) for k in sorted(subj_n)}
    ordered = [by_id[it.item_id] for it in items]
    return EvalReport(overall, histogram, per_subject, config_fingerprint, ordered, scores, dict(config or {}))


# ---------------------------------------------------------------------------
# prompting

def parse_binary_answer(raw: str | None) -> bool | None:
    """First standalone ``true``/``false`` (any case) in *raw*, else None."""
    if not raw:
        return None
    m = _BINARY.search(raw)
    return None if m is None else m.group(1).lower() == "true"


def _render_item(item: EvalItem, template: str) -> str:
    return template.format(context=item.context, proposition=item.proposition_text)


def build_zero_shot_prompt(item: EvalItem, template: str = DEFAULT_EVAL_TEMPLATE, model: str = "",
                           temperature: float = 0.0, max_tokens: int = 8) -> ChatRequest:
    text = _render_item(item, template)
    if not text.endswith(INSTRUCTION):
        text = f"{text}\n\n{INSTRUCTION}"
    return ChatRequest.user(model, text, temperature=temperature, max_tokens=max_tokens)


def select_exemplars(pool: Sequence[EvalItem], k: int, seed: int) -> list[EvalItem]:
    if k > len(pool):
        raise ValueError(f"k={k} exceeds the exemplar pool size {len(pool)}")
    return random.Random(seed).sample(list(pool), k)


def build_few_shot_prompt(item: EvalItem, exemplars: Sequence[EvalItem], k: int = 5, seed: int = 0,
                          model: str = "", temperature: float = 0.0, max_tokens: int = 8) -> ChatRequest:
    """k gold-labelled exemplars, then the target item with the answer left open.

    The exemplar draw depends only on (pool, k, seed), so every item of a run
    sees the same exemplars.
    """
    leaks = [e.item_id for e in exemplars if e.question_id == item.question_id]
    if leaks:
        raise ExemplarLeak(f"exemplar pool shares question {item.question_id!r} with the target")
    blocks = [
        f"{e.context}\n\nProposition: {e.proposition_text}\nAnswer: {'true' if e.gold else 'false'}"
        for e in select_exemplars(exemplars, k, seed)
    ]
    blocks.append(f"{item.context}\n\nProposition: {item.proposition_text}\n\n{INSTRUCTION}")
    return ChatRequest.user(model, "\n\n---\n\n".join(blocks), temperature=temperature, max_tokens=max_tokens)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalConfig:
    model: str = ""
    evaluator: Evaluator | str = Evaluator.ZERO_SHOT
    context_policy: ContextPolicy | str = DEFAULT_CONTEXT_POLICY
    seed: int = 0
    k_shots: int = 5
    concurrency: int = 4
    temperature: float = 0.0
    max_tokens: int = 8
    template: str = DEFAULT_EVAL_TEMPLATE
    candidates: tuple[str, str] = CANDIDATES

    def __post_init__(self):
        self.evaluator = Evaluator(self.evaluator)
        self.context_policy = ContextPolicy(self.context_policy)
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")

    def describe(self) -> dict:
        return {
            "model": self.model,
            "evaluator": self.evaluator.value,
            "context_policy": self.context_policy.value,
            "seed": self.seed,
            "k_shots": self.k_shots if self.evaluator is Evaluator.FEW_SHOT else None,
            "temperature": self.temperature,
            "candidates": list(self.candidates) if self.evaluator is Evaluator.CONTINUATION else None,
            "template_hash": fingerprint(self.template),
        }

    @property
    def fingerprint(self) -> str:
        d = self.describe()
        return fingerprint({k: d[k] for k in ("model", "evaluator", "context_policy", "seed", "template_hash")})


def predict_continuation(item: EvalItem, client: LLMClient, candidates=CANDIDATES,
                         model: str | None = None) -> PredictionRecord:
    """Pick the higher-scoring of the true/false continuations; ties go to false."""
    prefix = render_statement(item.context, item.proposition_text)
    try:
        s_true, s_false = client.score_continuations(prefix, list(candidates), model=model)
    except ContentFiltered:
        return PredictionRecord(item.item_id, None, "blocked", "")
    predicted = s_true.logprob_sum > s_false.logprob_sum
    raw = canonical_json({s_true.candidate: s_true.logprob_sum, s_false.candidate: s_false.logprob_sum})
    return PredictionRecord(item.item_id, predicted, "ok", raw, s_true.latency_ms + s_false.latency_ms)


def _predict_chat(req: ChatRequest, item: EvalItem, client: LLMClient) -> PredictionRecord:
    out = client.chat_complete(req)
    if out.status == "blocked":
        return PredictionRecord(item.item_id, None, "blocked", "", out.latency_ms)
    if out.status != "ok":
        raise ProviderError(f"item {item.item_id}: {out.provider_code}", code=out.provider_code)
    value = parse_binary_answer(out.text)
    status = "ok" if value is not None else "unparseable"
    return PredictionRecord(item.item_id, value, status, out.text or "", out.latency_ms)


def evaluate(items: Sequence[EvalItem], evaluator: Evaluator | str, client: LLMClient,
             config: EvalConfig | None = None, exemplars: Sequence[EvalItem] = (),
             done: dict[str, PredictionRecord] | None = None,
             on_record: Callable[[PredictionRecord], None] | None = None) -> EvalReport:
    """Run one evaluator over *items* and aggregate.

    ``done`` holds records from an interrupted run; those items are not
    re-queried.  ``on_record`` is called as each new record completes (from
    worker threads).  Blocked and unparseable answers are recorded and count
    as wrong; provider errors after retries abort the run.
    """
    config = replace(config or EvalConfig(), evaluator=Evaluator(evaluator))
    model = config.model or client.model
    if config.evaluator is Evaluator.FEW_SHOT and len(exemplars) < config.k_shots:
        raise ValueError(f"few-shot needs at least {config.k_shots} exemplars, got {len(exemplars)}")

    def predict(item: EvalItem) -> PredictionRecord:
        if config.evaluator is Evaluator.CONTINUATION:
            rec = predict_continuation(item, client, config.candidates, model)
        elif config.evaluator is Evaluator.FEW_SHOT:
            req = build_few_shot_prompt(item, exemplars, config.k_shots, config.seed, model,
                                        config.temperature, config.max_tokens)
            rec = _predict_chat(req, item, client)
        else:
            req = build_zero_shot_prompt(item, config.template, model, config.temperature, config.max_tokens)
            rec = _predict_chat(req, item, client)
        if on_record is not None:
            on_record(rec)
        return rec

    done = dict(done or {})
    todo = [it for it in items if it.item_id not in done]
    fresh = client.map(predict, todo, key=lambda it: it.item_id, workers=config.concurrency)
    records = {**done, **fresh}
    return aggregate((records[it.item_id] for it in items), items, config.fingerprint, config.describe())


class PropositionClassifier(ClassifierMixin, BaseEstimator):
    """Estimator view of an endpoint: ``predict`` true/false per ``EvalItem``.

    ``fit`` only stores the exemplar pool used by the few-shot evaluator.
    ``score`` returns the per-question accuracy, not plain label accuracy.
    """

    def __init__(self, client=None, evaluator="zero_shot", k_shots=5, seed=0, concurrency=4,
                 context_policy="intro_stems_and_gold", model=""):
        self.client = client
        self.evaluator = evaluator
        self.k_shots = k_shots
        self.seed = seed
        self.concurrency = concurrency
        self.context_policy = context_policy
        self.model = model

    def _config(self) -> EvalConfig:
        return EvalConfig(model=self.model, evaluator=self.evaluator, context_policy=self.context_policy,
                          seed=self.seed, k_shots=self.k_shots, concurrency=self.concurrency)

    def fit(self, X: Sequence[EvalItem], y=None):
        if self.client is None:
            raise ValueError("PropositionClassifier needs a client")
        self.exemplars_ = list(X)
        self.classes_ = np.array([False, True])
        return self

    def evaluate(self, X: Sequence[EvalItem]) -> EvalReport:
        if not hasattr(self, "exemplars_"):
            raise NotFittedError("call fit() first")
        return evaluate(list(X), self.evaluator, self.client, self._config(), self.exemplars_)

    def predict(self, X: Sequence[EvalItem]) -> np.ndarray:
        """Object array of True / False / None (None for blocked or unparseable)."""
        report = self.evaluate(X)
        return np.array([r.predicted for r in report.records], dtype=object)

    def score(self, X: Sequence[EvalItem], y=None, sample_weight=None) -> float:
        return self.evaluate(X).overall_accuracy
