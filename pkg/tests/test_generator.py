import itertools
import json

import pytest
from sklearn.base import clone

from medqg.corpus import Section
from medqg.generator import (
    DEFAULT_CONSTITUTION,
    KNOWLEDGE_MARKER,
    REPAIR_MARKER,
    SEPARATOR,
    CaseDeduplicator,
    EmptySection,
    GeneratedCase,
    PromptTemplate,
    build_generation_prompt,
    dedupe_cases,
    filter_cases,
    generate_cases,
    normalize_response,
    read_cases,
    repair_case,
    round_robin,
    validate_case,
    write_cases,
)
from medqg.llmclient import LLMClient, ProviderError, RetryPolicy, ScriptedProvider

NO_WAIT = RetryPolicy(max_attempts=3, base_delay_ms=0)


def sec(text="Hypertension is defined by ...", sid="doc/00000"):
    return Section.build(sid, sid.split("/")[0], ("Cardiology",), text)


def case_dict(tag="a", nq=4, nc=5):
    return {"introduction": f"Patient {tag} presents with a cough and mild fever for two days.",
            "questions": [{"stem": f"Q{i}?", "choices": [
                {"text": f"c{j}", "correct": j == 0, "justification": f"because {j}"} for j in range(nc)]}
                for i in range(nq)]}


def make_case(cid, intro, nq=4):
    d = case_dict(nq=nq)
    d["introduction"] = intro
    return GeneratedCase.from_dict(d, case_id=cid, source_section_id="s")


# -- prompt -------------------------------------------------------------------

def test_default_prompt_layout():
    p = build_generation_prompt(sec("Knowledge text here."))
    assert p.rendered.startswith("You are a French professor of medicine")
    assert p.rendered.endswith(KNOWLEDGE_MARKER + "\nKnowledge text here.")
    assert p.rendered.count(SEPARATOR) == 1
    assert len(DEFAULT_CONSTITUTION) == 16


def test_empty_section_rejected():
    with pytest.raises(EmptySection):
        build_generation_prompt(sec("   \n"))


def test_custom_constitution_numbering():
    t = PromptTemplate(constitution=("Rule one.", "Rule two.", "Rule three."))
    rendered = build_generation_prompt(sec(), t).rendered
    before = rendered.split(SEPARATOR)[0]
    numbered = [line.split(" ", 1)[0] for line in before.splitlines() if line[:1].isdigit()]
    assert numbered == ["1.", "2.", "3."]


def test_prompt_is_pure():
    assert build_generation_prompt(sec()) == build_generation_prompt(sec())


def test_template_file(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("{{PRE_PROMPT}}\n{{CONSTITUTION}}\n--\n{{KNOWLEDGE}}")
    t = PromptTemplate.from_file(path, pre_prompt="Pre.", constitution=["A."])
    assert build_generation_prompt(sec("K"), t).rendered == "Pre.\n1. A.\n--\nK"
    with pytest.raises(ValueError):
        PromptTemplate(layout="no knowledge placeholder")
    with pytest.raises(ValueError):
        PromptTemplate(layout="{{KNOWLEDGE}} {{PRE_PROMPT}}")


# -- generation ----------------------------------------------------------------

def client(script):
    return LLMClient(ScriptedProvider(script), "m", retry=NO_WAIT)


def test_two_valid_cases():
    c = client({"default": {"json": {"cases": [case_dict("a"), case_dict("b")]}}})
    res = generate_cases(build_generation_prompt(sec()), c)
    cases, defects = res
    assert [x.case_id for x in cases] == ["doc/00000#0", "doc/00000#1"]
    assert defects == [] and res.attempts == 1 and res.status == "ok"
    assert all(x.source_section_id == "doc/00000" for x in cases)


def test_blocked():
    cases, defects = generate_cases(build_generation_prompt(sec()), client({"default": {"error": "content_filter"}}))
    assert cases == [] and defects[0].codes == ["blocked"]


def test_malformed_then_valid():
    c = client({"rules": [{"responses": [{"text": "not json"}, {"json": {"cases": [case_dict()]}}]}]})
    res = generate_cases(build_generation_prompt(sec()), c)
    assert len(res.cases) == 1 and res.attempts == 2


def test_alias_fields_normalized_without_retry():
    alias = {"intro": "x y z", "questions": [{"question": "s", "propositions": [
        {"proposition": "t", "is_correct": "True", "explanation": "e"}]}]}
    c = client({"default": {"json": alias}})
    res = generate_cases(build_generation_prompt(sec()), c)
    assert res.attempts == 1
    ch = res.cases[0].questions[0].choices[0]
    assert (ch.text, ch.correct, ch.justification) == ("t", True, "e")


def test_retries_exhausted():
    c = client({"default": {"json": {"cases": "nope"}}})
    res = generate_cases(build_generation_prompt(sec()), c, max_retries=2)
    assert res.cases == [] and res.status == "parse_error" and res.attempts == 3
    assert c.provider.calls == 3


def test_provider_error_propagates():
    with pytest.raises(ProviderError):
        generate_cases(build_generation_prompt(sec()), client({"default": {"error": "bad_request"}}))


def test_normalize_response_shapes():
    assert normalize_response([case_dict()])["cases"][0]["introduction"]
    assert normalize_response(case_dict())["cases"][0]["questions"]
    assert normalize_response("text") is None


# -- validation ----------------------------------------------------------------

def test_three_questions():
    report = validate_case(GeneratedCase.from_dict(case_dict(nq=3)))
    assert [(d.code, d.path) for d in report.defects] == [("question_count", "/questions")]


def test_empty_justification_path():
    d = case_dict()
    d["questions"][0]["choices"][2]["justification"] = ""
    report = validate_case(GeneratedCase.from_dict(d))
    assert [(x.code, x.path) for x in report.defects] == [("empty_field", "/questions/0/choices/2/justification")]


def test_conforming_case():
    assert validate_case(GeneratedCase.from_dict(case_dict())).valid


def test_repair():
    d = case_dict()
    d["questions"][1]["choices"][3]["justification"] = " "
    fixed = repair_case(GeneratedCase.from_dict(d))
    assert fixed.questions[1].choices[3].justification == REPAIR_MARKER
    assert validate_case(fixed).valid


# -- dedup ---------------------------------------------------------------------

def test_identical_introductions():
    a, b = make_case("a", "same words in this intro"), make_case("b", "same words in this intro")
    assert dedupe_cases([a, b]) == [a]


def test_disjoint_introductions():
    a, b = make_case("a", "one two three four"), make_case("b", "five six seven eight")
    assert dedupe_cases([a, b]) == [a, b]


def _oracle_grams(text):
    w = text.lower().split()
    return {" ".join(w[i:i + 3]) for i in range(len(w) - 2)}


def test_dedupe_matches_pairwise_oracle():
    base = "the patient is a sixty year old man with chest pain radiating to the left arm"
    intros = [base,
              base + " since yesterday",
              "a young woman with fever and headache after travel to the tropics",
              base.replace("sixty", "seventy"),
              "a young woman with fever and headache after travel to the tropics recently"]
    cases = [make_case(f"c{i}", t) for i, t in enumerate(intros)]
    grams = [_oracle_grams(t) for t in intros]
    sim = {(i, j): len(grams[i] & grams[j]) / len(grams[i] | grams[j])
           for i, j in itertools.combinations(range(5), 2)}
    keep = []
    for j in range(5):
        if all(sim[(i, j)] < 0.8 for i in keep):
            keep.append(j)
    assert [c.case_id for c in dedupe_cases(cases, 0.8)] == [f"c{i}" for i in keep]
    assert dedupe_cases(dedupe_cases(cases)) == dedupe_cases(cases)


def test_deduplicator_estimator():
    est = CaseDeduplicator(threshold=0.5)
    assert clone(est).get_params()["threshold"] == 0.5
    cases = [make_case("a", "x y z w"), make_case("b", "x y z w")]
    assert est.fit_transform(cases) == cases[:1]
    with pytest.raises(ValueError):
        CaseDeduplicator(threshold=0).fit()


def test_filter_conservation(fixtures):
    cases = read_cases(fixtures / "cases" / "defects.jsonl")
    cases = cases + [GeneratedCase.from_dict(c.to_dict() | {"case_id": c.case_id + "-dup"}) for c in cases[:2]]
    for repair in (False, True):
        s = filter_cases(cases, repair=repair)
        n = s.counts
        assert n["generated"] == len(cases) == n["kept"] + n["dropped_defect"] + n["dropped_duplicate"]
        assert all(validate_case(c).valid for c in s.kept)
    assert filter_cases(cases, repair=True).repaired == ["empty-justification"]


def test_round_robin():
    secs = [sec("t", f"a/{i:05d}") for i in range(3)] + [sec("t", f"b/{i:05d}") for i in range(1)]
    assert [s.section_id for s in round_robin(secs)] == ["a/00000", "b/00000", "a/00001", "a/00002"]


def test_cases_round_trip(tmp_path):
    cases = [GeneratedCase.from_dict(case_dict("q"), case_id="x#0", source_section_id="x")]
    write_cases(tmp_path / "c.jsonl", cases)
    assert read_cases(tmp_path / "c.jsonl") == cases
    assert json.loads((tmp_path / "c.jsonl").read_text())["case_id"] == "x#0"
