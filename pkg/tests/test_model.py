import math

import numpy as np
import pytest

from envcodegen import grammar as G
from envcodegen import tensor as T
from envcodegen.corpus import NT_SENTINEL, PREV_SENTINEL, UNK
from envcodegen.model import ContextModel, EpochLog, ModelConfig, train
from tests.conftest import tiny_config


def _rich(corpus):
    """An example with variables, methods and at least one copy label."""
    for ex in corpus:
        if ex.variables and ex.methods and any(l is not None for l in ex.copy_labels):
            return ex
    raise AssertionError("fixture corpus has no rich example")


def _softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


# ---------------------------------------------------------------- config

def test_config_rejects_odd_hidden():
    with pytest.raises(ValueError):
        ModelConfig(H=7)


def test_config_replace_keeps_other_fields():
    c = tiny_config().replace(use_copy=False)
    assert not c.use_copy and c.H == 8
    assert "use_two_step_attention" in ModelConfig.field_names()


# ---------------------------------------------------------------- encoders

def test_encode_nl_shapes(tiny_model, corpus):
    exs = corpus[:3]
    mem, mask, init = tiny_model.encode_nl([ex.nl for ex in exs], train=False)
    Z = max(len(ex.nl) for ex in exs)
    assert mem.data.shape == (3, Z, 8)
    assert mask.sum(axis=1).tolist() == [len(ex.nl) for ex in exs]
    assert len(init) == 1 and init[0].data.shape == (3, 16)


def test_encode_nl_padding_does_not_leak(tiny_model, corpus):
    a, b = corpus[0].nl, corpus[1].nl
    alone = tiny_model.encode_nl([a], train=False)
    both = tiny_model.encode_nl([a, b], train=False)
    n = len(a)
    np.testing.assert_allclose(both[0].data[0, :n], alone[0].data[0, :n], atol=1e-12)
    np.testing.assert_allclose(both[2][0].data[0], alone[2][0].data[0], atol=1e-12)


def test_encode_nl_order_sensitive(tiny_model):
    a = tiny_model.encode_nl([["returns", "the", "size"]], train=False)[2][0].data
    b = tiny_model.encode_nl([["size", "the", "returns"]], train=False)[2][0].data
    assert not np.allclose(a, b)


def test_encode_nl_empty_rejected(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.encode_nl([[]], train=False)


def test_encode_env_slot_counts(tiny_model):
    envs = [([("vecElements", "double[]")], [("size", "int")]), ([], [])]
    env, mask = tiny_model.encode_env(envs, train=False)
    assert env.data.shape == (2, 4, 8)
    assert mask.tolist() == [[1, 1, 1, 1], [0, 0, 0, 0]]
    np.testing.assert_array_equal(env.data[1], 0.0)


def test_encode_env_empty(tiny_model):
    env, mask = tiny_model.encode_env([([], [])], train=False)
    assert env is None and mask.shape == (1, 0)


def test_visible_env_toggles(vocab, java, corpus):
    ex = _rich(corpus)
    m = ContextModel(tiny_config(use_variables=False), vocab, java, seed=3)
    enc = m.encode([ex], train=False)
    assert enc.env_mask.sum() == 2 * len(ex.methods)
    assert m.copy_sources(ex) == [r for _, r in ex.methods] + [n for n, _ in ex.methods]
    m = ContextModel(tiny_config(use_methods=False), vocab, java, seed=3)
    assert m.encode([ex], train=False).env_mask.sum() == 2 * len(ex.variables)


def test_camel_toggle_changes_name_states(vocab, java, corpus):
    ex = _rich(corpus)
    on = ContextModel(tiny_config(), vocab, java, seed=3)
    off = ContextModel(tiny_config(use_camel_encoding=False), vocab, java, seed=3)
    a = on.encode([ex], train=False).env.data
    b = off.encode([ex], train=False).env.data
    assert a.shape == b.shape and not np.allclose(a, b)


# ---------------------------------------------------------------- attention

def _attend_oracle(mem, mask, env, env_mask, s, F, Gm, two_step):
    n = int(mask.sum())
    alpha = _softmax(mem[:n] @ (s @ F))
    z = alpha @ mem[:n]
    q = z if two_step else s
    k = int(env_mask.sum())
    beta = _softmax(env[:k] @ (q @ Gm))
    return alpha, z, beta, beta @ env[:k]


@pytest.mark.parametrize("two_step", [True, False])
def test_attend_matches_oracle(vocab, java, corpus, rng, two_step):
    m = ContextModel(tiny_config(use_two_step_attention=two_step), vocab, java, seed=3)
    ex = _rich(corpus)
    enc = m.encode([ex], train=False)
    s = T.const(rng.normal(size=(1, 8)))
    alpha, z, beta, e = m.attend(enc, s)
    oa, oz, ob, oe = _attend_oracle(enc.mem.data[0], enc.mem_mask[0], enc.env.data[0],
                                    enc.env_mask[0], s.data[0], m.params["F"].data,
                                    m.params["G"].data, two_step)
    n, k = len(oa), len(ob)
    np.testing.assert_allclose(alpha.data[0, :n], oa, atol=1e-12)
    np.testing.assert_allclose(z.data[0], oz, atol=1e-12)
    np.testing.assert_allclose(beta.data[0, :k], ob, atol=1e-12)
    np.testing.assert_allclose(e.data[0], oe, atol=1e-12)


def test_attend_hand_example(tiny_model):
    # two NL positions with scores 0 and 1 -> alpha = (0.2689, 0.7311)
    m = tiny_model
    H = m.config.H
    mem = np.zeros((1, 2, H))
    mem[0, 1, 0] = 1.0
    mem[0, 0, 1] = 1.0
    F = np.zeros((H, H))
    F[0, 0] = 1.0
    m.params["F"].data[...] = F
    s = np.zeros((1, H))
    s[0, 0] = 1.0
    from envcodegen.model import Encoded
    enc = Encoded(T.const(mem), np.ones((1, 2)), None, np.zeros((1, 0)), [], np.zeros((1, 0), bool),
                  [[]])
    alpha, z, beta, e = m.attend(enc, T.const(s))
    np.testing.assert_allclose(alpha.data[0], [0.2689414213699951, 0.7310585786300049], atol=1e-12)
    np.testing.assert_allclose(z.data[0, :2], [0.7310585786300049, 0.2689414213699951], atol=1e-12)
    assert beta is None and not e.data.any()


def test_two_step_off_leaves_alpha(vocab, java, corpus, rng):
    ex = _rich(corpus)
    on = ContextModel(tiny_config(), vocab, java, seed=3)
    off = ContextModel(tiny_config(use_two_step_attention=False), vocab, java, seed=3)
    s = T.const(rng.normal(size=(1, 8)))
    a_on, _, b_on, _ = on.attend(on.encode([ex], False), s)
    a_off, _, b_off, _ = off.attend(off.encode([ex], False), s)
    np.testing.assert_array_equal(a_on.data, a_off.data)
    assert not np.allclose(b_on.data, b_off.data)


# ---------------------------------------------------------------- decoder and outputs

def test_decoder_step_depends_on_nonterminal(tiny_model, corpus):
    m = tiny_model
    enc = m.encode([corpus[0]], False)
    parent = T.slice_cols(enc.init[-1], 0, 8)
    _, s1 = m.decoder_step(np.array([3]), np.array([PREV_SENTINEL]), np.array([PREV_SENTINEL]),
                           enc.init, parent, False)
    _, s2 = m.decoder_step(np.array([4]), np.array([PREV_SENTINEL]), np.array([PREV_SENTINEL]),
                           enc.init, parent, False)
    assert s1.data.shape == (1, 8) and not np.allclose(s1.data, s2.data)


def _nts(m):
    return np.array(sorted(i for i in m.vocab.nonterminal.values() if m.allowed[i].any()))


def test_masked_output_equals_per_nonterminal_softmax(tiny_model, rng):
    m = tiny_model
    nts = _nts(m)
    ctx = rng.normal(size=(len(nts), 8))
    logp, _ = m.output_distribution(T.const(ctx), nts, None, np.zeros(len(nts), bool))
    R = m.params["R"].data
    for row, nt in enumerate(nts):
        cols = np.flatnonzero(m.allowed[nt])
        ref = _softmax(R[cols] @ ctx[row])
        got = np.exp(logp.data[row])
        assert np.abs(got[cols] - ref).max() <= 1e-12
        assert np.all(got[~m.allowed[nt]] == 0.0)


def test_copy_gate_only_at_identifier_nonterminals(tiny_model, rng):
    m = tiny_model
    m.params["b_copy"].data[...] = 0.0
    nts = _nts(m)
    ctx = T.const(rng.normal(size=(len(nts), 8)))
    _, copy = m.output_distribution(ctx, nts, None, np.ones(len(nts), bool))
    expected = np.where(m.nt_is_ident[nts], 0.5, 0.0)
    np.testing.assert_array_equal(copy.data, expected)
    _, copy = m.output_distribution(ctx, nts, None, np.zeros(len(nts), bool))
    assert not copy.data.any()


def test_step_logprobs_mixture_normalized(tiny_model, corpus, rng):
    m = tiny_model
    ex = _rich(corpus)
    enc = m.encode([ex], False)
    ident = [i for i in _nts(m) if m.nt_is_ident[i]][0]
    other = [i for i in _nts(m) if not m.nt_is_ident[i]][0]
    encK = enc.rows([0, 0])
    states = [T.const(rng.normal(size=(2, 16)))]
    _, _, lg, lc = m.step_logprobs(encK, np.array([ident, other]), np.array([2, 2]),
                                   np.array([2, 2]), states, rng.normal(size=(2, 8)))
    assert abs(np.exp(lg[1]).sum() - 1.0) < 1e-12
    assert np.all(np.isneginf(lc[1]))
    # copy mass over all slots (valid or not) completes the identifier row
    ctx, beta, _ = m.context(encK, T.const(np.zeros((2, 8))), False)
    assert np.exp(lc[0][np.isfinite(lc[0])]).sum() <= 1.0


# ---------------------------------------------------------------- loss

def test_targets_layout(tiny_model, corpus, java):
    ex = _rich(corpus)
    tg = tiny_model.targets([ex, corpus[1]])
    n = len(ex.target)
    assert tg.mask[0].sum() == n
    assert tg.par_step[0, 0] == 0 and tg.prev[0, 0] == PREV_SENTINEL
    labels = [l if l is not None else -1 for l in ex.copy_labels]
    assert tg.label[0, :n].tolist() == labels
    short = 1 if len(corpus[1].target) < tg.nt.shape[1] else None
    if short:
        assert tg.nt[1, -1] == NT_SENTINEL


def test_uniform_loss(vocab, java, corpus):
    m = ContextModel(tiny_config(use_copy=False), vocab, java, seed=3)
    m.params["R"].data[...] = 0.0
    ex = corpus[0]
    tg = m.targets([ex])
    expected = 0.0
    for t in range(len(ex.target)):
        nt = tg.nt[0, t]
        expected += math.log(m.allowed[nt].sum())
    assert float(m.loss([ex], train=False).data) == pytest.approx(expected, abs=1e-9)


def test_loss_is_sum_over_batch(tiny_model, corpus):
    a = float(tiny_model.loss([corpus[0]], False).data)
    b = float(tiny_model.loss([corpus[1]], False).data)
    ab = float(tiny_model.loss([corpus[0], corpus[1]], False).data)
    assert ab == pytest.approx(a + b, abs=1e-9)


def test_loss_gradient_check(vocab, java, corpus):
    # gradients below 1e-5 are dominated by finite-difference round-off (~1e-9 absolute)
    m = ContextModel(tiny_config(), vocab, java, seed=5)
    ex = _rich(corpus)
    rep = T.grad_check(lambda: m.loss([ex], train=False), m.parameters(), tol=1e-3,
                       n_coords=300, rng=np.random.default_rng(0), floor=1e-5)
    assert rep.passed, rep.failures[:5]


def test_loss_decreases_under_adam(vocab, java, corpus):
    m = ContextModel(tiny_config(), vocab, java, seed=3)
    ex = _rich(corpus)
    opt = T.Adam(m.parameters(), lr=0.003)
    values = []
    for _ in range(50):
        T.zero_grads(opt.params)
        loss = m.loss([ex], train=True)
        values.append(float(loss.data))
        T.backward(loss)
        opt.step()
    assert values[-1] < 0.5 * values[0]
    assert all(b < a for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------- training loop

def test_lr_decays_when_dev_stalls(vocab, java, corpus):
    m = ContextModel(tiny_config(), vocab, java, seed=3)
    res = train(m, corpus[:8], dev=corpus[8:10], epochs=3, eval_fn=lambda mm, d: 0.0)
    assert [e.lr for e in res.log] == pytest.approx([0.001, 0.001, 0.0002])
    assert all(isinstance(e, EpochLog) for e in res.log)


def test_training_deterministic(vocab, java, corpus):
    losses = []
    for _ in range(2):
        m = ContextModel(tiny_config(), vocab, java, seed=3)
        losses.append(train(m, corpus[:8], epochs=1).log[0].loss)
    assert losses[0] == losses[1]


def test_divergence_restores_last_good(vocab, java, corpus):
    m = ContextModel(tiny_config(), vocab, java, seed=3)
    snapshots = []
    real_loss = m.loss
    calls = {"n": 0}

    def loss(batch, train=True):
        calls["n"] += 1
        out = real_loss(batch, train)
        if calls["n"] > 1:
            out.data = np.asarray(np.nan)
        return out
    m.loss = loss
    res = train(m, corpus[:8], epochs=3, callback=lambda e: snapshots.append(m.state_dict()))
    assert res.diverged and len(res.log) == 1
    for k, arr in snapshots[0].items():
        np.testing.assert_array_equal(m.params[k].data, arr)


def test_train_rejects_empty(tiny_model):
    with pytest.raises(ValueError):
        train(tiny_model, [])


def test_checkpoint_round_trip(tmp_path, vocab, java, corpus):
    a = ContextModel(tiny_config(), vocab, java, seed=3)
    b = ContextModel(tiny_config(), vocab, java, seed=4)
    T.save_checkpoint(tmp_path / "m.ckpt", a.state_dict())
    b.load_state_dict(T.load_checkpoint(tmp_path / "m.ckpt", b.shapes()))
    assert float(a.loss([corpus[0]], False).data) == float(b.loss([corpus[0]], False).data)


def test_unk_label_only_via_copy(vocab, java, corpus):
    m = ContextModel(tiny_config(), vocab, java, seed=3)
    for ex in corpus:
        tg = m.targets([ex])
        for t in range(len(ex.target)):
            if tg.gen_ok[0, t] == 0.0:
                assert tg.gold[0, t] == UNK and tg.label[0, t] >= 0
                rule = java.rules[ex.target.steps[t].rule]
                assert rule.kind == G.IDENTIFIER_TERMINAL
