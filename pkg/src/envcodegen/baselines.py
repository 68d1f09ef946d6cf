"""Comparison systems: tf-idf retrieval with member substitution, a token
level Seq2Seq with attention, and Seq2Prod (grammar decoder over a flat
encoding of the whole input)."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import grammar as G
from . import tensor as T
from .corpus import PAD, UNK, Example, Vocabulary
from .lexer import is_identifier
from .model import (Encoded, GrammarDecoderModel, ModelConfig, _col, _pack, _zero_state,
                    _lstm_params, bilstm)

SEP = "<sep>"
SEP2 = "<sep2>"
BOS = "<s>"
EOS = "</s>"


# ---------------------------------------------------------------- retrieval

class TfIdfIndex:
    """Sparse tf-idf vectors of the training NL, L2-normalized.

    tf is the raw count, idf = ln(N / df).  Stopwords are kept.
    """

    def __init__(self, documents):
        documents = [list(d) for d in documents]
        if not documents:
            raise ValueError("cannot index an empty training corpus")
        self.n = len(documents)
        self.df = Counter()
        for doc in documents:
            self.df.update(set(doc))
        self.idf = {w: math.log(self.n / c) for w, c in self.df.items()}
        self.vectors = [self.vector(doc) for doc in documents]

    def vector(self, tokens) -> dict:
        tf = Counter(w for w in tokens if w in self.idf)
        vec = {w: c * self.idf[w] for w, c in tf.items()}
        norm = math.sqrt(sum(x * x for x in vec.values()))
        if norm == 0.0:
            return {}
        return {w: x / norm for w, x in vec.items()}

    def similarities(self, tokens) -> np.ndarray:
        q = self.vector(tokens)
        out = np.zeros(self.n)
        if not q:
            return out
        for i, d in enumerate(self.vectors):
            if len(d) < len(q):
                out[i] = sum(x * q[w] for w, x in d.items() if w in q)
            else:
                out[i] = sum(x * d[w] for w, x in q.items() if w in d)
        return out

    @classmethod
    def from_corpus(cls, corpus):
        return cls([ex.nl for ex in corpus])


def _substitute(tokens, source_env, target_env, rng):
    """Replace members of ``source_env`` with same-typed members of ``target_env``.

    ``*_env`` are lists of (name, type).  Each distinct source name is
    mapped once; with no same-typed candidate the token is kept.
    """
    src = dict(source_env)
    by_type = {}
    for name, typ in target_env:
        by_type.setdefault(typ, []).append(name)
    mapping = {}
    out = []
    for tok in tokens:
        if tok in src:
            if tok not in mapping:
                cands = by_type.get(src[tok], [])
                mapping[tok] = cands[int(rng.integers(len(cands)))] if cands else tok
            out.append(mapping[tok])
        else:
            out.append(tok)
    return out


def retrieval_predict(test_ex: Example, index: TfIdfIndex, corpus, rng) -> list[str]:
    """Code of the most similar training example, with member substitution.

    ``rng`` is a numpy Generator; ties on similarity are broken with it.
    """
    if not corpus:
        raise ValueError("retrieval needs a nonempty training corpus")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    sims = index.similarities(test_ex.nl)
    best = np.flatnonzero(sims >= sims.max() - 1e-12)
    pick = int(best[rng.integers(len(best))]) if len(best) > 1 else int(best[0])
    src = corpus[pick]
    toks = _substitute(src.tokens, src.variables, test_ex.variables, rng)
    return _substitute(toks, src.methods, test_ex.methods, rng)


def retrieval_predict_corpus(test, corpus, seed=0) -> list[list[str]]:
    index = TfIdfIndex.from_corpus(corpus)
    rng = np.random.default_rng(seed)
    return [retrieval_predict(ex, index, corpus, rng) for ex in test]


# ---------------------------------------------------------------- flat inputs

def flat_input(ex: Example) -> list[str]:
    """NL, then ``type <sep2> name`` per variable, then the same per method."""
    out = list(ex.nl) + [SEP]
    for name, typ in ex.variables:
        out += [typ, SEP2, name]
    out.append(SEP)
    for name, ret in ex.methods:
        out += [ret, SEP2, name]
    return out


def token_table(sequences, min_count=1, reserved=("<pad>", "<unk>")) -> dict:
    counts = Counter(w for seq in sequences for w in seq)
    table = {w: i for i, w in enumerate(reserved)}
    for w in sorted(w for w, c in counts.items() if c >= min_count and w not in table):
        table[w] = len(table)
    return table


def _input_table(corpus, min_count):
    return token_table([flat_input(ex) for ex in corpus], min_count,
                       reserved=("<pad>", "<unk>", SEP, SEP2))


def _ids(table, seqs):
    B = len(seqs)
    Z = max(1, max(len(s) for s in seqs))
    ids = np.zeros((B, Z), dtype=np.int64)
    mask = np.zeros((B, Z), dtype=T.DTYPE)
    for b, s in enumerate(seqs):
        ids[b, :len(s)] = [table.get(w, UNK) for w in s]
        mask[b, :len(s)] = 1.0
    return ids, mask


# ---------------------------------------------------------------- Seq2Seq

@dataclass
class Seq2SeqOutput:
    tokens: list
    logp: float
    replaced: int  # UNK outputs replaced from the source


class Seq2Seq:
    """LSTM encoder, LSTM decoder over code tokens with general attention.

    At prediction time every UNK is replaced by the source token that got
    the most attention at that step.
    """

    def __init__(self, config: ModelConfig, corpus=(), min_count=1, seed=None, tables=None):
        self.config = config
        self.rng = np.random.default_rng(config.seed if seed is None else seed)
        if tables is not None:
            self.src, self.tgt = dict(tables["src"]), dict(tables["tgt"])
        else:
            self.src = _input_table(corpus, min_count)
            self.tgt = token_table([ex.tokens for ex in corpus], min_count,
                                   reserved=("<pad>", "<unk>", BOS, EOS))
        self.tgt_words = sorted(self.tgt, key=self.tgt.get)
        H, L = config.H, config.layers
        p, rng = {}, self.rng
        p["E_src"] = T.parameter(rng.normal(0, 0.1, (len(self.src), H)), "E_src")
        p["E_tgt"] = T.parameter(rng.normal(0, 0.1, (len(self.tgt), H)), "E_tgt")
        for layer in range(L):
            _lstm_params(rng, f"enc_l{layer}", H, H, p)
            _lstm_params(rng, f"dec_l{layer}", 2 * H if layer == 0 else H, H, p)
        p["W_a"] = T.parameter(T.glorot(rng, H, H), "W_a")
        p["W_c"] = T.parameter(T.glorot(rng, 2 * H, H), "W_c")
        p["W_o"] = T.parameter(T.glorot(rng, H, len(self.tgt)), "W_o")
        self.params = p

    # same state interface as the grammar models, so model.train applies
    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays):
        for k, arr in arrays.items():
            self.params[k].data[...] = arr

    def shapes(self):
        return {k: v.data.shape for k, v in self.params.items()}

    def tables(self):
        return {"src": self.src, "tgt": self.tgt}

    def encode(self, examples, train):
        c = self.config
        ids, mask = _ids(self.src, [flat_input(ex) for ex in examples])
        emb = T.embedding_lookup(self.params["E_src"], ids)
        xs = [_col(emb, t) for t in range(ids.shape[1])]
        finals = []
        for layer in range(c.layers):
            if layer > 0:
                xs = [T.dropout(x, c.dropout_p, train, self.rng) for x in xs]
            st = _zero_state(len(examples), c.H)
            outs = []
            for t, x in enumerate(xs):
                new = T.lstm_cell(x, st, self.params[f"enc_l{layer}_W"], self.params[f"enc_l{layer}_b"])
                st = new if mask[:, t].all() else T.blend(mask[:, t], new, st)
                outs.append(st)
            finals.append(st)
            xs = [T.slice_cols(o, 0, c.H) for o in outs]
        return T.stack(xs, axis=1), mask, finals

    def step(self, mem, mask, states, prev_tok, feed, train):
        """One decoder step with input feeding; returns states, attention, h~, logp."""
        c = self.config
        x = T.concat([T.embedding_lookup(self.params["E_tgt"], prev_tok), feed])
        new = []
        for layer in range(c.layers):
            if layer > 0:
                x = T.dropout(x, c.dropout_p, train, self.rng)
            st = T.lstm_cell(x, states[layer], self.params[f"dec_l{layer}_W"],
                             self.params[f"dec_l{layer}_b"])
            new.append(st)
            x = T.slice_cols(st, 0, c.H)
        alpha = T.softmax(T.bdot(mem, T.matmul(x, self.params["W_a"])), mask=mask)
        ctx = T.wsum(alpha, mem)
        ht = T.tanh(T.matmul(T.concat([x, ctx]), self.params["W_c"]))
        ht_d = T.dropout(ht, c.dropout_p, train, self.rng)
        logp = T.log_softmax(T.matmul(ht_d, self.params["W_o"]))
        return new, alpha, ht, logp

    def loss(self, examples, train=True):
        mem, mask, states = self.encode(examples, train)
        B = len(examples)
        seqs = [list(ex.tokens) + [EOS] for ex in examples]
        gold, gmask = _ids(self.tgt, seqs)
        prev = np.full(B, self.tgt[BOS])
        feed = T.const(np.zeros((B, self.config.H), dtype=T.DTYPE))
        total = None
        for t in range(gold.shape[1]):
            states, _, feed, logp = self.step(mem, mask, states, prev, feed, train)
            lp = T.gather_cols(logp, gold[:, t])
            step = T.total(T.mul(lp, T.const(-gmask[:, t])))
            total = step if total is None else T.add(total, step)
            prev = gold[:, t]
        return total

    def predict(self, ex: Example, max_tokens=G.MAX_TOKENS) -> Seq2SeqOutput:
        """Greedy token decoding with attention-based UNK replacement."""
        source = flat_input(ex)
        with T.no_grad():
            mem, mask, states = self.encode([ex], False)
            prev = np.array([self.tgt[BOS]])
            feed = T.const(np.zeros((1, self.config.H), dtype=T.DTYPE))
            out, logp_sum, replaced = [], 0.0, 0
            eos = self.tgt[EOS]
            for _ in range(max_tokens + 1):
                states, alpha, feed, logp = self.step(mem, mask, states, prev, feed, False)
                row = logp.data[0].copy()
                row[PAD] = row[self.tgt[BOS]] = -np.inf
                if len(out) >= max_tokens:
                    k = eos
                else:
                    k = int(np.argmax(row))
                logp_sum += float(row[k])
                if k == eos:
                    break
                if k == UNK:
                    out.append(source[int(np.argmax(alpha.data[0, :len(source)]))])
                    replaced += 1
                else:
                    out.append(self.tgt_words[k])
                prev = np.array([k])
        return Seq2SeqOutput(out, logp_sum, replaced)

    def exact_match(self, examples) -> float:
        hits = sum(self.predict(ex).tokens == list(ex.tokens) for ex in examples)
        return 100.0 * hits / len(examples)


def parse_failure_rate(predictions, g: G.Grammar) -> float:
    """Percentage of token sequences that the grammar rejects."""
    if not predictions:
        return 0.0
    bad = 0
    for toks in predictions:
        try:
            G.parse(toks, g)
        except (G.ParseError, ValueError):
            bad += 1
    return 100.0 * bad / len(predictions)


# ---------------------------------------------------------------- Seq2Prod

class Seq2Prod(GrammarDecoderModel):
    """BiLSTM over the flat input; the grammar decoder with one attention
    step over it and copying from any input position."""

    context_inputs = 2

    def __init__(self, config: ModelConfig, vocab: Vocabulary, grammar: G.Grammar, corpus=(),
                 min_count=1, seed=None, tables=None):
        self.src = dict(tables["src"]) if tables is not None else _input_table(corpus, min_count)
        super().__init__(config, vocab, grammar, seed)

    def tables(self):
        return {"src": self.src}

    def _init_encoder_params(self):
        H = self.config.H
        self.params["E_src"] = T.parameter(self.rng.normal(0, 0.1, (len(self.src), H)), "E_src")
        self.params["F"] = T.parameter(T.glorot(self.rng, H, H), "F")
        self._bilstm_params("flat", H)

    def copy_sources(self, ex: Example) -> list[str]:
        return flat_input(ex)

    def encode(self, examples, train):
        c = self.config
        seqs = [flat_input(ex) for ex in examples]
        ids, mask = _ids(self.src, seqs)
        emb = T.embedding_lookup(self.params["E_src"], ids)
        xs = [_col(emb, t) for t in range(ids.shape[1])]
        outs, info = bilstm(self.params, "flat", xs, mask, c.layers, c.dropout_p, train, self.rng)
        hid = c.H // 2
        init = [_pack(li["fwd_last"], li["bwd_at_last"], hid) for li in info]
        valid = np.zeros(ids.shape, dtype=bool)
        for b, s in enumerate(seqs):
            for j, w in enumerate(s):
                valid[b, j] = w not in (SEP, SEP2) and is_identifier(w)
        return Encoded(T.stack(outs, axis=1), mask, None, np.zeros((len(examples), 0)), init,
                       valid, seqs)

    def context(self, enc, s, train):
        alpha = T.softmax(T.bdot(enc.mem, T.matmul(s, self.params["F"])), mask=enc.mem_mask)
        z = T.wsum(alpha, enc.mem)
        ctx = T.tanh(T.matmul(T.concat([s, z]), self.params["W_c"]))
        return ctx, alpha, {"alpha": alpha, "z": z}


def copy_labels(ex: Example, g: G.Grammar) -> list[int]:
    """Per derivation step, the first input position equal to the gold
    identifier (or -1); the Seq2Prod supervision."""
    src = flat_input(ex)
    first = {}
    for j, w in enumerate(src):
        if w not in (SEP, SEP2):
            first.setdefault(w, j)
    out = []
    for st in ex.target.steps:
        rule = g.rules[st.rule]
        if rule.kind == G.IDENTIFIER_TERMINAL and rule.lhs in g.identifier_nts:
            out.append(first.get(G.terminal_text(rule.rhs[0]), -1))
        else:
            out.append(-1)
    return out
