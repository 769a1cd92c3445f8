"""Acceptance criteria 1-10, one test each.

Every test records a PASS/FAIL line (with its runtime) that the session
summary prints; run with ``pytest tests/test_acceptance.py -v``.
"""
import hashlib
import itertools
import json
import random
import re
import time
from collections import defaultdict
from contextlib import contextmanager

from medqg.cli import main
from medqg.corpus import RawDocument, RawElement, Section, SectionSegmenter, filter_paragraphs
from medqg.evalharness import SCORE_BINS, PredictionRecord, aggregate, evaluate, score_question
from medqg.exporter import export_case_sft, render_case
from medqg.generator import GeneratedCase, build_generation_prompt, read_cases, validate_case
from medqg.llmclient import LLMClient, RetryPolicy, ScriptedProvider
from medqg.qadata import Dataset, ProgressiveCase, Proposition, Question, parse_dataset, serialize, split_dataset, to_eval_items

RESULTS: dict[int, str] = {}
_TOKEN = r"\w+|[^\w\s]"


@contextmanager
def criterion(n: int, title: str, limit_s: float | None = None):
    t0 = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - t0
        if limit_s is not None:
            assert elapsed < limit_s, f"took {elapsed:.2f}s, limit {limit_s}s"
    except BaseException as exc:
        RESULTS[n] = f"FAIL criterion {n:2d} {title} ({time.perf_counter() - t0:.2f}s): {exc}"
        print(RESULTS[n])
        raise
    RESULTS[n] = f"PASS criterion {n:2d} {title} ({elapsed:.2f}s)"
    print(RESULTS[n])


def cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


# ---------------------------------------------------------------------------

def test_01_metric_fidelity():
    with criterion(1, "metric fidelity", 1.0):
        gold = [False, False, True, True, False]  # c and d correct
        assert score_question([False, False, False, True, False], gold).score == 0.8
        vecs = list(itertools.product([False, True], repeat=5))
        for p, g in itertools.product(vecs, vecs):
            oracle = 0
            for a, b in zip(p, g):
                if a == b:
                    oracle += 1
            s = score_question(list(p), list(g))
            assert s.matches == oracle and s.score == oracle / 5


def test_02_histogram_legality():
    with criterion(2, "histogram legality", 5.0):
        rng = random.Random(2024)
        qs = []
        for i in range(1000):
            gold = [rng.random() < 0.5 for _ in range(5)]
            if not any(gold):
                gold[rng.randrange(5)] = True
            qs.append(Question(f"q{i}", "stem", tuple(Proposition(l, f"p{l}", g) for l, g in zip("abcde", gold)),
                               rng.choice(["a", "b", "c"])))
        items = to_eval_items(Dataset(tuple(qs)))
        recs = []
        for it in items:
            r = rng.random()
            if r < 0.05:
                recs.append(PredictionRecord(it.item_id, None, "blocked"))
            else:
                recs.append(PredictionRecord(it.item_id, rng.random() < 0.5, "ok"))
        rep = aggregate(recs, items)
        legal = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}
        assert all(s.score in legal for s in rep.question_scores)
        assert set(rep.histogram) == set(SCORE_BINS) and sum(rep.histogram.values()) == 1000
        total = sum(1 for it, r in zip(items, recs) if r.predicted is not None and r.predicted == it.gold)
        assert abs(rep.overall_accuracy - total / (5 * 1000)) <= 1e-12


def test_03_blocked_handling(capsys, desk):
    with criterion(3, "blocked handling", 5.0):
        code, out, err = cli(capsys, "evaluate", "--dataset", desk / "qa/dataset.jsonl",
                             "--endpoint", "mock://" + str(desk / "mocks/blocked.json"), "--model", "m",
                             "--reports-out", desk / "work/blocked")
        assert code == 0, err
        report = json.loads((desk / "work/blocked/eval_report.json").read_text())
        assert report["overall_accuracy"] == 0.0
        assert report["records"] and all(r["status"] == "blocked" for r in report["records"])


def _offline_rescore(script: dict, ds: Dataset):
    """Re-score the logprob script without the package: text -> candidate -> summed logprob."""
    sums = defaultdict(dict)
    for rule in script["rules"]:
        text = rule["contains"][2:]  # strip the leading blank line
        total = 0.0
        for v in rule["response"]["logprobs"]:
            total += v
        sums[text][rule["candidate"]] = total
    matches, predicted = {}, {}
    for q in ds.iq:
        m = 0
        for p in q.propositions:
            t, f = sums[p.text][" true"], sums[p.text][" false"]
            pred = t > f  # tie -> false
            predicted[f"{q.id}:{p.label}"] = pred
            m += pred == p.correct
        matches[q.id] = m
    by_subject = defaultdict(list)
    for q in ds.iq:
        by_subject[q.subject].append(matches[q.id])
    per_subject = {s: sum(v) / (5 * len(v)) for s, v in sorted(by_subject.items())}
    hist = {b: 0 for b in SCORE_BINS}
    for m in matches.values():
        hist[SCORE_BINS[m]] += 1
    overall = sum(matches.values()) / (5 * len(matches))
    return overall, hist, per_subject, matches, predicted


def test_04_continuation_evaluator(fixtures):
    with criterion(4, "continuation evaluator", 5.0):
        script = json.loads((fixtures / "mocks/logprobs.json").read_text())
        ds = parse_dataset(fixtures / "qa/ten_questions.jsonl")
        assert len(ds.iq) == 10
        client = LLMClient(ScriptedProvider(script), "m", retry=RetryPolicy(1, 0))
        rep = evaluate(to_eval_items(ds), "continuation", client)
        overall, hist, per_subject, matches, predicted = _offline_rescore(script, ds)
        assert rep.overall_accuracy == overall
        assert rep.histogram == hist
        assert rep.per_subject == per_subject
        assert {s.question_id: s.matches for s in rep.question_scores} == matches
        assert {r.item_id: r.predicted for r in rep.records} == predicted
        # the fixture does contain ties, and they all went to false
        ties = [t for t, c in _tie_texts(script)]
        assert ties and all(not predicted[k] for k in _tie_ids(ds, ties))


def _tie_texts(script):
    sums = defaultdict(dict)
    for rule in script["rules"]:
        sums[rule["contains"][2:]][rule["candidate"]] = sum(rule["response"]["logprobs"])
    return [(t, c) for t, c in sums.items() if c[" true"] == c[" false"]]


def _tie_ids(ds, texts):
    return [f"{q.id}:{p.label}" for q in ds.iq for p in q.propositions if p.text in texts]


def _adversarial_corpus(rng: random.Random) -> list[RawDocument]:
    lengths = [1, 3, 4, 120, 499, 500, 501, 999, 1000, 1001, 1999, 2000, 2001, 3500]
    docs = []
    for d in range(50):
        elements, page = [], 1
        for k in range(rng.randint(1, 14)):
            if rng.random() < 0.35:
                elements.append(RawElement("title", f"{k}. Heading {d}-{k}", page))
            n = rng.choice(lengths)
            # long unpunctuated runs force word-level cuts
            sep = "" if rng.random() < 0.5 else "."
            words = [f"w{d}x{k}y{i}" + (sep if i % 17 == 16 else "") for i in range(n)]
            elements.append(RawElement("paragraph", " ".join(words), page))
            page += rng.randint(0, 2)
        docs.append(RawDocument(f"doc{d:02d}", "", tuple(elements)))
    return docs


def test_05_segmentation_bounds():
    with criterion(5, "segmentation bounds", 10.0):
        docs = _adversarial_corpus(random.Random(55))
        seg = SectionSegmenter().fit()
        out = seg.transform(docs)
        assert all(s.word_count <= 1000 for s in out)
        for d in docs:
            mine = [s for s in out if s.doc_id == d.doc_id]
            assert sum(s.word_count < 500 for s in mine) <= 1
            kept = [e for e in filter_paragraphs(d) if e.kind == "paragraph"]
            assert sum(s.word_count for s in mine) == sum(len(e.text.split()) for e in kept)
            assert " ".join(s.text for s in mine).split() == " ".join(e.text for e in kept).split()


PRE_PROMPT_START = "You are a French professor of medicine"
RULES = [
    "The introduction is common to all questions.",
    "There must be 4-10 different questions.",
    "A question can have 5-10 possible choices.",
    "One or more proposals may be fair.",
    "Justification must be specific, justified and sourced. It is very important to have a very good and long "
    "justification. It should be at least 3 lines long.",
    "Uses the highest medical level possible.",
    "Questions must be diversified to a minimum of 4. They must deal with the patient’s disease but also with "
    "the examinations to be carried out, the follow-up and the possible developments of the case. They will make "
    "the case both nuanced and complex.",
    "The case must be precise or even quantitative. It is a question of providing as much information as possible, "
    "and the solution to the questions may be found in detail.",
    "Cases must be pedagogical and the questions must be linked to build a complete reasoning.",
    "Responses should be directed to prioritize severe and frequent cases.",
    "The student’s expected behaviour is above all to avoid medical misconduct.",
    "The student’s method must be a probabilistic approach.",
    "A language model must be able to answer questions. For example, do not ask the wizard to create images or "
    "audio.",
    "The case must be written in English.",
    "All fields must be completed.",
    "The MA for the drug and the recommendations of the HAS and ANSM must be respected. In the absence of "
    "recommendations from HAS and ANSM, the current practices recommended by French speciality colleges and "
    "learned societies will be applied.",
]


def test_06_prompt_fidelity():
    with criterion(6, "prompt fidelity"):
        text = ("Essential hypertension is defined by a blood pressure of 140/90 mmHg or more.\n\n"
                "Measure it twice, on both arms; use the higher value.")
        rendered = build_generation_prompt(Section.build("book/00003", "book", ("HTA",), text)).rendered
        assert rendered.startswith(PRE_PROMPT_START)
        pos = 0
        for i, rule in enumerate(RULES, start=1):
            line = f"{i}. {rule}"
            at = rendered.find("\n" + line + "\n", pos)
            assert at >= 0, f"rule {i} missing or out of order"
            pos = at + len(line)
        marker = "To do that you can use the following information:"
        assert rendered.index("###") > pos
        assert rendered.endswith(marker + "\n" + text)
        assert rendered.count(marker) == 1


def test_07_case_validation(fixtures):
    with criterion(7, "generated-case validation", 1.0):
        expected = json.loads((fixtures / "cases/defects_expected.json").read_text())
        cases = read_cases(fixtures / "cases/defects.jsonl")
        assert len(cases) == 12
        kinds = set()
        for case in cases:
            report = validate_case(case)
            got = [{"code": d.code, "path": d.path} for d in report.defects]
            assert got == expected[case.case_id], case.case_id
            for d in report.defects:
                kinds.add((d.code, d.path.rsplit("/", 1)[-1] if d.code == "empty_field" else ""))
            if not expected[case.case_id]:
                assert report.valid and report.defects == ()
        assert len(kinds) == 7


def test_08_loss_mask(fixtures):
    with criterion(8, "loss-mask correctness", 10.0):
        cases = read_cases(fixtures / "cases/sft.jsonl")
        recs, _ = export_case_sft(cases)
        assert len(recs) == 20
        for case, rec in zip(cases, recs):
            tokens = [m.span() for m in re.finditer(_TOKEN, rec.text)]
            decoded = [rec.text[tokens[s][0]:tokens[e - 1][1]] for s, e in rec.loss_spans]
            expected = []
            for q in case.questions:
                for c in q.choices:
                    expected += ["true" if c.correct else "false", c.justification]
            assert decoded == expected
            # character alignment: each decoded span sits exactly where the rendering put it
            pos = 0
            labels = itertools.cycle(["Answer: ", "Justification: "])
            for (s, e), want, label in zip(rec.loss_spans, expected, labels):
                at = rec.text.index(label + want, pos) + len(label)
                assert (tokens[s][0], tokens[e - 1][1]) == (at, at + len(want))
                pos = at + len(want)

        # a case whose rendering is exactly 3000 tokens
        base = GeneratedCase.from_dict(cases[0].to_dict())
        fixed = len(re.findall(_TOKEN, render_case(base)[0])) - len(re.findall(_TOKEN, base.introduction))
        long_case = GeneratedCase.from_dict({**base.to_dict(), "introduction": " ".join(["dyspnoea"] * (3000 - fixed))})
        assert len(re.findall(_TOKEN, render_case(long_case)[0])) == 3000
        (rec,), _ = export_case_sft([long_case], context_limit=2048)
        assert rec.truncated is True and rec.token_count == 2048
        assert len(re.findall(_TOKEN, rec.text)) == 2048


def test_09_determinism(capsys, desk):
    with criterion(9, "determinism and order independence"):
        reports = []
        for conc in (1, 8):
            code, _, err = cli(capsys, "evaluate", "--config", desk / "desk_config.json",
                               "--endpoint", "mock://mocks/eval_desk.json", "--concurrency", conc,
                               "--reports-out", f"work/c{conc}")
            assert code == 0, err
            reports.append((desk / f"work/c{conc}/eval_report.json").read_bytes())
        assert reports[0] == reports[1]

        ds = parse_dataset(desk / "qa/dataset.jsonl")
        big = Dataset(ds.iq, ds.pq + tuple(
            ProgressiveCase(f"x{i}", "Intro", tuple(
                Question(f"x{i}-{j}", "s", tuple(Proposition(l, "t", l == "a") for l in "abcde")) for j in range(16)))
            for i in range(10)))
        first = [serialize(p) for p in split_dataset(big, 0.25, seed=8)]
        again = [serialize(p) for p in split_dataset(big, 0.25, seed=8)]
        assert first == again
        train, test = split_dataset(big, 0.25, seed=8)
        train_q = {q.id for c in train.pq for q in c.questions}
        test_q = {q.id for c in test.pq for q in c.questions}
        assert train_q.isdisjoint(test_q) and test.pq
        for c in big.pq:
            ids = {q.id for q in c.questions}
            assert ids <= train_q or ids <= test_q


def test_10_end_to_end(capsys, desk):
    with criterion(10, "end-to-end desk run", 60.0):
        cfg = desk / "desk_config.json"
        eval_mock = "mock://mocks/eval_desk.json"
        steps = [
            ["segment"], ["generate"], ["validate"],
            ["export", "--kind", "pretrain"], ["export", "--kind", "case_sft"],
            ["evaluate", "--endpoint", eval_mock],
        ]
        manifests = {}
        for step in steps:
            code, out, err = cli(capsys, *step, "--config", cfg)
            assert code == 0, (step, err)
            m = json.loads(open(out["manifest"]).read())
            assert m["config_fingerprint"] == out["config_fingerprint"]
            for rel, digest in m["outputs"].items():
                assert hashlib.sha256((desk / rel).read_bytes()).hexdigest() == digest
            manifests[" ".join(step)] = m
        # artifacts link back: each stage's input digest is the previous stage's output digest
        seg_out = manifests["segment"]["outputs"]["work/sections.jsonl"]
        assert manifests["generate"]["inputs"]["work/sections.jsonl"] == seg_out
        gen_out = manifests["generate"]["outputs"]["work/cases.jsonl"]
        assert manifests["validate"]["inputs"]["work/cases.jsonl"] == gen_out
        valid = manifests["validate"]["outputs"]["work/cases.valid.jsonl"]
        assert manifests["export --kind case_sft"]["inputs"]["work/cases.valid.jsonl"] == valid
        gen = manifests["generate"]["counts"]
        assert gen["generated"] == gen["kept"] + gen["dropped_defect"] + gen["dropped_duplicate"]
        assert gen["kept"] > 0
        sft_meta = json.loads((desk / "work/reports/export/case_sft.manifest.json").read_text())
        assert sft_meta["config_fingerprint"] == manifests["export --kind case_sft"]["config_fingerprint"]
        report = json.loads((desk / "work/reports/eval_report.json").read_text())
        assert 0.0 <= report["overall_accuracy"] <= 1.0
