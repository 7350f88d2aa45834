import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerscope import synthgen as sg
from layerscope.encoder import Encoder, ModelConfig, forward_with_trace


@pytest.fixture(scope="module")
def lex():
    return sg.Lexicon.from_config(sg.GeneratorConfig())


def test_canonical_instance(lex):
    s = sg.canonical_sample()
    assert s.answer == "cats"
    assert [" ".join(s.context_sentences[i]) for i in s.supporting_fact_indices] == [
        "wolves are afraid of cats .", "emily is a wolf ."]


def test_zero_distractors_gives_two_supporting_sentences():
    cfg = sg.GeneratorConfig(n_distractor_sentences=0)
    for s in sg.generate(cfg, 20):
        assert len(s.context_sentences) == 2
        assert s.supporting_fact_indices == [0, 1]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 8))
def test_generated_answer_matches_symbolic_solver(seed, n_distract):
    cfg = sg.GeneratorConfig(seed=seed, n_distractor_sentences=n_distract)
    lex = sg.Lexicon.from_config(cfg)
    for s in sg.generate(cfg, 5):
        assert sg.solve(s, lex) == s.answer
        assert len(s.context_sentences) == n_distract + 2
        assert len(s.supporting_fact_indices) == 2
        subjects = [c[0] for c in s.context_sentences if c[2] == "afraid"]
        assert len(subjects) == len(set(subjects))


def test_name_pools_are_disjoint_across_splits():
    cfg = sg.GeneratorConfig()
    pools = sg.name_pools(cfg)
    seen = {k: {s.question[2] for s in sg.generate(cfg, 200, k)} for k in pools}
    assert not seen["train"] & seen["dev"] and not seen["train"] & seen["test"] and not seen["dev"] & seen["test"]
    assert all(seen[k] <= set(pools[k]) for k in pools)


def test_generation_is_seed_deterministic():
    cfg = sg.GeneratorConfig(seed=5)
    a = [s.to_dict() for s in sg.generate(cfg, 10)]
    b = [s.to_dict() for s in sg.generate(cfg, 10)]
    assert a == b
    c = [s.to_dict() for s in sg.generate(sg.GeneratorConfig(seed=6), 10)]
    assert a != c


def test_sample_dict_roundtrip():
    s = sg.generate(sg.GeneratorConfig(), 1)[0]
    assert sg.DeductionSample.from_dict(s.to_dict()) == s


def test_too_small_lexicon_rejected():
    with pytest.raises(sg.GenerationError):
        sg.GeneratorConfig(n_kinds=len(sg.KINDS) + 1)
    with pytest.raises(sg.GenerationError):
        sg.generate(sg.GeneratorConfig(n_kinds=2), 1)


def test_unknown_token_rejected(lex):
    with pytest.raises(sg.GenerationError):
        lex.ids(["zebra"])


def test_span_encoding_appends_every_candidate(lex):
    s = sg.generate(sg.GeneratorConfig(), 1)[0]
    inp, (a, b) = sg.encode_for_span(s, lex)
    assert a == b and inp.tokens[a] == s.answer
    tail = inp.tokens[-len(lex.plurals) - 1:-1]
    assert tail == list(lex.plurals) and inp.tokens[-1] == sg.SEP
    assert inp.roles[a] == "answer"


def test_classification_encoding_and_roles(lex):
    s = sg.generate(sg.GeneratorConfig(), 1)[0]
    inp, label = sg.encode_for_classification(s, lex)
    assert lex.plurals[label] == s.answer
    assert inp.tokens[0] == sg.CLS
    q = [t for t, r in zip(inp.tokens, inp.roles) if r == "question"]
    assert q == s.question
    for i, r in zip(inp.sentence_ids, inp.roles):
        if r == "supporting-fact":
            assert i in s.supporting_fact_indices
    assert "answer" in inp.roles


def test_source_offset_points_at_source_token(lex):
    s = sg.generate(sg.GeneratorConfig(), 1)[0]
    inp, _ = sg.encode_for_classification(s, lex)
    for i, t in enumerate(s.source_tokens):
        assert inp.tokens[sg.source_offset(s, i)] == t


def test_annotations(lex):
    s = sg.canonical_sample()
    toks = s.source_tokens
    assert s.entity_categories[toks.index("emily")] == "person"
    assert s.entity_categories[toks.index("wolves")] == "animal-kind"
    assert s.entity_categories[toks.index("afraid")] == "none"
    for a, b, same in s.coref_pairs:
        ka, kb = toks[a[0]], toks[b[0]]
        if same and ka in lex.names:
            assert ka == kb
    labels = {r[2] for r in s.relations}
    assert labels == {"is-a", "afraid-of", "none"}


def test_encoded_sample_fits_default_model(lex):
    s = sg.generate(sg.GeneratorConfig(), 1)[0]
    inp, _ = sg.encode_for_span(s, lex)
    m = Encoder(ModelConfig(vocab_size=len(lex), n_layers=1, d_model=8, n_heads=2, d_ff=8))
    assert forward_with_trace(m, inp).layers[0].shape[0] == len(inp)
