import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from envcodegen import grammar as G
from envcodegen import tensor as T
from envcodegen.baselines import (EOS, SEP, SEP2, Seq2Prod, Seq2Seq, TfIdfIndex, _substitute,
                                  copy_labels, flat_input, parse_failure_rate, retrieval_predict,
                                  retrieval_predict_corpus)
from envcodegen.corpus import UNK, Example
from envcodegen.inference import beam_decode, greedy_decode
from tests.conftest import tiny_config


# ---------------------------------------------------------------- tf-idf

def brute_cosine(docs, query):
    """Dense tf-idf cosine over a fixed vocabulary (independent of the index)."""
    vocab = sorted({w for d in docs for w in d})
    N = len(docs)
    idf = np.array([math.log(N / sum(w in d for d in docs)) for w in vocab])

    def vec(tokens):
        v = np.array([tokens.count(w) for w in vocab], dtype=float) * idf
        n = np.linalg.norm(v)
        return v / n if n > 0 else v
    q = vec(query)
    return np.array([vec(d) @ q for d in docs])


words = st.sampled_from(["get", "set", "the", "value", "size", "of", "vector", "add", "x"])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(words, min_size=1, max_size=8), min_size=1, max_size=12),
       st.lists(words, min_size=0, max_size=8))
def test_tfidf_matches_brute_force(docs, query):
    idx = TfIdfIndex(docs)
    np.testing.assert_allclose(idx.similarities(query), brute_cosine(docs, query), atol=1e-9)


def test_tfidf_identical_document_scores_one():
    docs = [["sets", "the", "size"], ["returns", "the", "value"], ["adds", "x"]]
    sims = TfIdfIndex(docs).similarities(["returns", "the", "value"])
    assert sims[1] == pytest.approx(1.0, abs=1e-12) and sims.argmax() == 1


def test_tfidf_word_in_every_document_has_zero_idf():
    idx = TfIdfIndex([["a", "b"], ["a", "c"]])
    assert idx.idf["a"] == 0.0
    assert idx.idf["b"] == pytest.approx(math.log(2))
    assert not idx.similarities(["a"]).any()


def test_tfidf_empty_corpus():
    with pytest.raises(ValueError):
        TfIdfIndex([])


# ---------------------------------------------------------------- member substitution

def test_substitution_same_type():
    toks = ["vecElements", "[", "loc0", "]", "+=", "arg0", ";"]
    out = _substitute(toks, [("vecElements", "double[]")], [("n", "int"), ("data", "double[]")],
                      np.random.default_rng(0))
    assert out == ["data", "[", "loc0", "]", "+=", "arg0", ";"]


def test_substitution_without_candidate_keeps_token():
    out = _substitute(["size"], [("size", "int")], [("name", "String")], np.random.default_rng(0))
    assert out == ["size"]


def test_substitution_maps_each_name_once():
    rng = np.random.default_rng(3)
    target = [(f"v{i}", "int") for i in range(10)]
    out = _substitute(["a", "+", "a", "+", "a"], [("a", "int")], target, rng)
    assert out[0] == out[2] == out[4] and out[0] in {n for n, _ in target}


def _ex(nl, variables, methods, tokens):
    return Example(list(nl), list(variables), list(methods), " ".join(tokens), list(tokens))


def test_retrieval_picks_nearest_and_substitutes():
    train = [_ex(["returns", "the", "size"], [("size", "int")], [], ["int", "function", "(", ")",
             "{", "return", "size", ";", "}"]),
             _ex(["clears", "buffer"], [("buf", "int[]")], [], ["void", "function", "(", ")",
                 "{", "}"])]
    test = _ex(["returns", "the", "size"], [("count", "int")], [], [])
    out = retrieval_predict(test, TfIdfIndex.from_corpus(train), train, 0)
    assert out == ["int", "function", "(", ")", "{", "return", "count", ";", "}"]


def test_retrieval_byte_identical_with_seed(corpus):
    test, train = corpus[:10], corpus[10:]
    a = retrieval_predict_corpus(test, train, seed=7)
    b = retrieval_predict_corpus(test, train, seed=7)
    assert "\n".join(map(" ".join, a)).encode() == "\n".join(map(" ".join, b)).encode()


def test_retrieval_tie_breaking_uses_seed():
    train = [_ex(["a"], [], [], [str(i)]) for i in range(20)]
    test = _ex(["zzz"], [], [], [])  # unknown query: every similarity is 0
    picks = {retrieval_predict(test, TfIdfIndex.from_corpus(train), train, s)[0] for s in range(10)}
    assert len(picks) > 1
    assert retrieval_predict(test, TfIdfIndex.from_corpus(train), train, 4) == \
        retrieval_predict(test, TfIdfIndex.from_corpus(train), train, 4)


# ---------------------------------------------------------------- flat input

def test_flat_input_layout():
    ex = _ex(["adds", "x"], [("vec", "double[]")], [("size", "int")], [])
    assert flat_input(ex) == ["adds", "x", SEP, "double[]", SEP2, "vec", SEP, "int", SEP2, "size"]


# ---------------------------------------------------------------- Seq2Seq

@pytest.fixture
def s2s(corpus):
    return Seq2Seq(tiny_config(), corpus, seed=2)


def test_seq2seq_loss_gradients(s2s, corpus):
    rep = T.grad_check(lambda: s2s.loss([corpus[0]], train=False), s2s.parameters(), tol=1e-3,
                       n_coords=200, floor=1e-5)
    assert rep.passed, rep.failures[:5]


def test_seq2seq_predict_bounded(s2s, corpus):
    out = s2s.predict(corpus[0], max_tokens=12)
    assert len(out.tokens) <= 12 and math.isfinite(out.logp)


def test_seq2seq_unk_replaced_by_most_attended_source(s2s, corpus):
    ex = corpus[0]
    src = flat_input(ex)
    j = len(src) - 1
    calls = {"n": 0}

    def step(mem, mask, states, prev, feed, train):
        calls["n"] += 1
        logp = np.full((1, len(s2s.tgt)), -10.0)
        logp[0, UNK if calls["n"] == 1 else s2s.tgt[EOS]] = -0.1
        alpha = np.zeros((1, mem.data.shape[1]))
        alpha[0, j] = 1.0
        return states, T.const(alpha), feed, T.const(logp)
    s2s.step = step
    out = s2s.predict(ex)
    assert out.tokens == [src[j]] and out.replaced == 1


def test_seq2seq_tables_round_trip(s2s, corpus):
    again = Seq2Seq(tiny_config(), tables=s2s.tables(), seed=2)
    assert again.shapes() == s2s.shapes()
    again.load_state_dict(s2s.state_dict())
    assert s2s.predict(corpus[1]).tokens == again.predict(corpus[1]).tokens


def test_parse_failure_rate(java, corpus):
    good = corpus[0].tokens
    assert parse_failure_rate([good, good[:-1]], java) == 50.0
    assert parse_failure_rate([], java) == 0.0


# ---------------------------------------------------------------- Seq2Prod

@pytest.fixture
def s2p(vocab, java, corpus):
    return Seq2Prod(tiny_config(), vocab, java, corpus, seed=2)


def test_seq2prod_outputs_validate(s2p, corpus, java):
    for ex in corpus[:5]:
        for r in beam_decode(ex, s2p, 2):
            assert G.realize(G.validate(r.rules, java), java) == r.tokens


def test_seq2prod_copy_slots_exclude_separators(s2p, corpus):
    ex = next(e for e in corpus if e.variables)
    enc = s2p.encode([ex], False)
    src = flat_input(ex)
    for j, w in enumerate(src):
        if w in (SEP, SEP2):
            assert not enc.copy_valid[0, j]
    assert enc.copy_valid[0, src.index(ex.variables[0][0])]


def test_seq2prod_copy_labels_match_targets(s2p, corpus, java):
    for ex in corpus:
        tg = s2p.targets([ex])
        labels = copy_labels(ex, java)
        n = len(ex.target)
        for t in range(n):
            if tg.label[0, t] >= 0:
                assert tg.label[0, t] == labels[t]
                assert flat_input(ex)[labels[t]] == G.terminal_text(
                    java.rules[ex.target.steps[t].rule].rhs[0])


def test_seq2prod_copy_label_oracle(java):
    from envcodegen.corpus import make_example
    ex = make_example("returns size", [("size", "int")], [("size", "int")],
                      "int f(){return size;}", java)
    labels = copy_labels(ex, java)
    # "returns size <sep> int <sep2> size ..." -> first "size" is NL position 1
    assert [l for l in labels if l >= 0] == [1]


def test_seq2prod_loss_gradients(s2p, corpus):
    ex = next(e for e in corpus if e.variables)
    rep = T.grad_check(lambda: s2p.loss([ex], train=False), s2p.parameters(), tol=1e-3,
                       n_coords=200, floor=1e-5)
    assert rep.passed, rep.failures[:5]


def test_seq2prod_greedy_terminates(s2p, corpus):
    r = greedy_decode(corpus[2], s2p)
    assert not r.truncated and len(r.tokens) <= G.MAX_TOKENS
