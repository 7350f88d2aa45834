import json

import pytest

from layerscope import synthgen as sg
from layerscope import tasks as K
from layerscope.persistence import JsonlError


@pytest.fixture(scope="module")
def small_sets():
    cfg = sg.GeneratorConfig()
    return K.build_probe_datasets(cfg, sizes={"train": 200, "dev": 60, "test": 60}, seed=11)


def test_canonical_supporting_fact_samples():
    lex = sg.Lexicon(n_kinds=4)
    pair = K.qa_pair_from_sample(sg.canonical_sample(lex), lex)
    sup = K.build_supporting_fact_task([pair])
    assert len(sup) == 8
    true = [" ".join(s.tokens[a:b]) for s in sup for a, b in s.spans if s.label == "true"]
    assert true == ["wolves are afraid of cats .", "emily is a wolf ."]


def test_single_hop_supporting_from_answer_span():
    pair = K.QAPair(["[CLS]", "q", "[SEP]", "a", "b", ".", "c", "d", "."], [(3, 6), (6, 9)], None, (7, 8))
    labels = [s.label for s in K.build_supporting_fact_task([pair])]
    assert labels == ["false", "true"]


def test_missing_sentence_boundaries_rejected():
    with pytest.raises(K.FormatError):
        K.build_supporting_fact_task([K.QAPair(["x"], None)])


def test_question_type_rule_oracle_agrees_with_generator():
    qs = K.generate_questions(sg.GeneratorConfig(), 120, "train", seed=2)
    for toks, qtype in qs:
        assert K.template_question_type(toks) == qtype
    counts = K.class_balance(K.build_question_type_task(qs))
    assert set(counts) == set(sg.QUESTION_TYPES) and len(set(counts.values())) == 1


def test_probe_datasets_shapes_and_labels(small_sets):
    for task, splits in small_sets.items():
        for split, xs in splits.items():
            assert xs, (task, split)
            for s in xs[:50]:
                assert len(s.spans) == K.N_SPANS[task]
                assert s.label in K.LABELS[task]
    assert K.class_balance(small_sets["COREF"]["train"])["same"] == K.class_balance(small_sets["COREF"]["train"])["different"]


def test_span_tokens_match_annotations(small_sets):
    for s in small_sets["NEL"]["train"][:40]:
        (a, b), = s.spans
        tok = s.tokens[a]
        expected = "person" if tok in sg.NAMES else ("none" if s.label == "none" else "animal-kind")
        assert s.label == expected
    for s in small_sets["REL"]["train"][:40]:
        if s.label == "is-a":
            (a, _), (c, _) = s.spans
            assert s.tokens[a + 1] == "is" and c == a + 3


def test_probe_sample_validation():
    with pytest.raises(K.FormatError):
        K.ProbingSample(["a", "b"], [(1, 3)], "person", "NEL")
    with pytest.raises(K.FormatError):
        K.ProbingSample(["a", "b"], [(0, 1)], "maybe", "SUP")
    with pytest.raises(K.FormatError):
        K.ProbingSample(["a", "b"], [(0, 1)], "same", "COREF")


def test_encode_probe_sample_wraps_and_shifts():
    lex = sg.Lexicon()
    inp, spans = K.encode_probe_sample(K.ProbingSample(["emily", "is", "a", "wolf", "."], [(0, 1)], "person", "NEL"), lex)
    assert inp.tokens[0] == sg.CLS and inp.tokens[-1] == sg.SEP and spans == [(1, 2)]


def test_edge_jsonl_roundtrip_and_diagnostics(tmp_path, small_sets):
    path = tmp_path / "nel.jsonl"
    xs = small_sets["NEL"]["dev"][:10]
    K.write_edge_jsonl(xs, path)
    assert K.import_edge_jsonl(path) == xs
    bad = tmp_path / "bad.jsonl"
    good = json.dumps(xs[0].to_record())
    bad.write_text("\n".join([
        good,
        json.dumps({"tokens": ["a"], "spans": [[0, 1]], "task": "NEL"}),
        json.dumps({"tokens": ["a"], "spans": [[0, 5]], "label": "x", "task": "NEL"}),
        json.dumps({"tokens": ["a"], "spans": [[0, 1]], "label": "x", "task": "POS"}),
        json.dumps({"tokens": "a b", "spans": [[0, 1]], "label": "x", "task": "NEL"}),
    ]) + "\n")
    samples, errors = K.load_edge_jsonl(bad)
    assert len(samples) == 1
    assert [n for n, _ in errors] == [2, 3, 4, 5]
    assert "label" in errors[0][1] and "out of bounds" in errors[1][1] and "task" in errors[2][1]
    with pytest.raises(JsonlError):
        K.import_edge_jsonl(bad)


def test_imported_open_label_extends_inventory():
    s = K.record_to_sample({"tokens": ["x", "y"], "spans": [[0, 1]], "label": "ORG", "task": "NEL"})
    assert K.label_inventory("NEL", [s])[-1] == "ORG"
