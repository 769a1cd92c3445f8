import io
import json

import pytest

from medqg.qadata import (
    ContextPolicy,
    Dataset,
    EmptyDataset,
    IndexOutOfRange,
    InvariantError,
    ParseError,
    ProgressiveCase,
    Proposition,
    Question,
    assemble_context,
    parse_dataset,
    parse_records,
    serialize,
    split_dataset,
    to_eval_items,
    write_dataset,
)


def q(qid, stem="stem?", correct=(True, False, False, False, False), subject="cardiology"):
    props = tuple(Proposition(l, f"{qid} prop {l}", c) for l, c in zip("abcde", correct))
    return Question(qid, stem, props, subject)


def iq_line(qid, n_props=5, **extra):
    obj = {"id": qid, "type": "IQ", "stem": "Which?",
           "propositions": [{"label": l, "text": f"t{l}", "correct": l == "a"} for l in "abcde"[:n_props]]}
    obj.update(extra)
    return json.dumps(obj)


def case(cid, n, intro="A 30-year-old woman consults."):
    return ProgressiveCase(cid, intro, tuple(
        q(f"{cid}-{i}", f"Step {i} stem", tuple(j in (i % 5, (i + 2) % 5) for j in range(5))) for i in range(n)))


# -- parsing -----------------------------------------------------------------

def test_parse_two_questions():
    ds = parse_records([iq_line("q1"), iq_line("q2")])
    assert [x.id for x in ds.iq] == ["q1", "q2"]
    assert ds.question_count == 2


def test_four_propositions_rejected():
    with pytest.raises(InvariantError) as err:
        parse_records([iq_line("q1"), iq_line("q2", n_props=4)])
    assert err.value.rule == "proposition_count"
    assert err.value.line == 2


def test_duplicate_id():
    with pytest.raises(InvariantError) as err:
        parse_records([iq_line("q1"), "", iq_line("q1")])
    assert err.value.rule == "duplicate_id"
    assert err.value.line == 3


@pytest.mark.parametrize("line,exc", [
    ("{not json", ParseError),
    ("[1, 2]", ParseError),
    (json.dumps({"type": "XQ"}), ParseError),
    (json.dumps({"type": "IQ", "stem": "x", "propositions": []}), ParseError),
])
def test_malformed_lines(line, exc):
    with pytest.raises(exc) as err:
        parse_records([iq_line("ok"), line])
    assert err.value.line == 2


@pytest.mark.parametrize("mutate,rule", [
    (lambda o: o["propositions"].__setitem__(0, {**o["propositions"][0], "correct": False}), "correct_count"),
    (lambda o: o.__setitem__("stem", "  "), "empty_stem"),
    (lambda o: o["propositions"][1].__setitem__("text", ""), "empty_proposition"),
    (lambda o: o["propositions"][1].__setitem__("label", "a"), "proposition_labels"),
    (lambda o: o.__setitem__("origin", "web"), "origin"),
])
def test_question_invariants(mutate, rule):
    obj = json.loads(iq_line("q"))
    mutate(obj)
    with pytest.raises(InvariantError) as err:
        parse_records([json.dumps(obj)])
    assert err.value.rule == rule


def test_string_booleans_rejected():
    obj = json.loads(iq_line("q"))
    obj["propositions"][0]["correct"] = "true"
    with pytest.raises(ParseError):
        parse_records([json.dumps(obj)])


def test_round_trip_and_pq_ordering(tmp_path):
    ds = Dataset((q("a1"),), (case("c1", 3),), {"source": "unit"})
    path = tmp_path / "ds.jsonl"
    write_dataset(path, ds)
    assert parse_dataset(path) == ds
    # shuffled sub-questions come back in index order
    lines = serialize(ds).splitlines()
    obj = json.loads(lines[-1])
    obj["questions"].reverse()
    lines[-1] = json.dumps(obj)
    assert parse_records(lines) == ds


def test_fixture_dataset_parses(fixtures):
    ds = parse_dataset(fixtures / "qa" / "dataset.jsonl")
    assert len(ds.iq) == 20 and len(ds.pq) == 4


# -- splitting ---------------------------------------------------------------

def test_split_arithmetic():
    ds = Dataset(tuple(q(f"q{i}") for i in range(100)))
    train, test = split_dataset(ds, 0.1, seed=4)
    assert (len(train.iq), len(test.iq)) == (90, 10)
    assert {x.id for x in train.iq}.isdisjoint({x.id for x in test.iq})


def test_split_byte_stable():
    ds = Dataset(tuple(q(f"q{i}") for i in range(37)), tuple(case(f"c{i}", 4) for i in range(9)))
    a = [serialize(part) for part in split_dataset(ds, 0.2, seed=11)]
    b = [serialize(part) for part in split_dataset(ds, 0.2, seed=11)]
    assert a == b
    c = [serialize(part) for part in split_dataset(ds, 0.2, seed=12)]
    assert a != c


def test_no_case_straddles_split():
    ds = Dataset((), tuple(case(f"c{i}", 16) for i in range(10)))
    train, test = split_dataset(ds, 0.3, seed=2)
    side = {}
    for name, part in (("train", train), ("test", test)):
        for c in part.pq:
            for sub in c.questions:
                side.setdefault(c.case_id, set()).add(name)
                assert sub.id.startswith(c.case_id + "-")
    assert all(len(s) == 1 for s in side.values())
    assert len(side) == 10
    assert train.question_count + test.question_count == 160


def test_split_errors():
    with pytest.raises(EmptyDataset):
        split_dataset(Dataset(), 0.1)
    with pytest.raises(ValueError):
        split_dataset(Dataset((q("a"),)), 1.0)


# -- contexts ----------------------------------------------------------------

def test_context_policies():
    c = case("c", 3)
    assert assemble_context(c, 0, ContextPolicy.INTRO_PLUS_STEMS) == c.introduction + "\n\n" + "Step 0 stem"
    for i in range(3):
        assert assemble_context(c, i, "stem_only") == f"Step {i} stem"


def test_gold_context_oracle():
    c = case("c", 3)
    parts = [c.introduction]
    for prior in c.questions[:2]:
        parts.append(prior.stem)
        parts.append("Answer: " + "; ".join(p.text for p in prior.propositions if p.correct))
    parts.append(c.questions[2].stem)
    assert assemble_context(c, 2, ContextPolicy.INTRO_STEMS_AND_GOLD) == "\n\n".join(parts)


def test_context_index_out_of_range():
    with pytest.raises(IndexOutOfRange):
        assemble_context(case("c", 2), 2)


def test_eval_items():
    items = to_eval_items(Dataset((q("x"),)))
    assert [it.proposition_label for it in items] == list("abcde")
    assert [it.item_id for it in items][0] == "x:a"
    assert to_eval_items(Dataset()) == []

    c = case("c", 2)
    items = to_eval_items(Dataset((), (c,)), ContextPolicy.INTRO_PLUS_STEMS)
    assert len(items) == 10
    second = [it for it in items if it.question_id == "c-1"]
    assert all(it.context == assemble_context(c, 1, "intro_plus_stems") for it in second)
    assert all(c.questions[0].stem in it.context for it in second)


def test_serialize_is_text_jsonl():
    text = serialize(Dataset((q("a"), q("b"))))
    assert len(list(io.StringIO(text))) == 2
